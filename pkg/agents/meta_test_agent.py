import logging
from typing import Optional, Tuple

import numpy as np

from models.config_model import FinetuneConfig
from models.unet import UNet
from utils.autodiff import Params, value_and_grad
from utils.losses import attach_labels, deep_supervised_loss
from utils.optim import sgd_nesterov_step


def meta_test_finetune(network: UNet, theta: Params, phi: Params, support: Tuple[np.ndarray, np.ndarray],
                       shots: int, steps: int, finetune_mask: str = "last-3", lr: float = 0.01,
                       momentum: float = 0.99, weight_decay: float = 3e-5) -> Params:
    """
    Few-shot adaptation of the head on an unseen domain.

    The head starts from phi; only parameters selected by the mask move,
    with SGD + Nesterov on the deep-supervised Dice + CE of the first
    `shots` support samples. The encoder is read, never written.
    """
    images, labels = support
    mask = network.resolve_mask(finetune_mask, phi.keys())
    head = {k: v.copy() for k, v in phi.items()}
    if shots == 0 or steps == 0 or not mask:
        return head
    if len(images) == 0:
        raise ValueError("meta-test support set is empty")
    if shots > len(images):
        raise ValueError(f"{shots} shots requested but the support set holds {len(images)} samples")

    images = np.asarray(images[:shots])
    labels = np.asarray(labels[:shots])
    if images.ndim == 3:
        images = images[:, None]
    num_classes = network.config.num_classes

    def loss_fn(tape, variables):
        pyramid, _ = network.forward(tape, variables, images)
        attach_labels(pyramid, labels, num_classes)
        return deep_supervised_loss(pyramid.logits, pyramid.labels)

    momentum_state = {}
    for _ in range(steps):
        _, grads = value_and_grad(loss_fn, {**theta, **head}, wrt=sorted(mask))
        head, momentum_state = sgd_nesterov_step(head, grads, lr, momentum_state, momentum, weight_decay)
    return head


class MetaTestAgent:
    """
    Runs the frozen-encoder few-shot protocol for one or more shot counts.
    """

    def __init__(self, network: UNet, config: Optional[FinetuneConfig] = None):
        self.network = network
        self.config = config or FinetuneConfig()
        self.logger = logging.getLogger(__name__)

    def adapt(self, theta: Params, phi: Params, support: Tuple[np.ndarray, np.ndarray], shots: int,
              mask: Optional[str] = None) -> Params:
        cfg = self.config
        mask = mask or cfg.mask
        self.logger.info(f"Fine-tuning head ({mask}) on {shots} shot(s) for {cfg.steps} steps")
        return meta_test_finetune(self.network, theta, phi, support, shots, cfg.steps, mask,
                                  cfg.lr, cfg.momentum, cfg.weight_decay)
