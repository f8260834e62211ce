"""
Desk-scale U-Net split into an encoder (feature extractor, theta) and a
decoder (segmentation head, omega).

Parameters live in a flat dict keyed by ids of the form
`<block>.<layer>.<tensor>`, e.g. `enc1.conv_a.w` or `up2.tconv.b`.
Blocks run enc0 .. enc{D} (enc{D} is the bottleneck), then up0 .. up{D-1}
from coarse to fine, then the output convolution `out`.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional, Tuple, Union

import numpy as np

from config import Config
from models.config_model import NetworkConfig
from utils.autodiff import (Params, Tape, Tensor, concat, conv2d, conv_transpose2x2,
                            lift, mean, relu, sqrt)
from utils.exceptions import ConfigValidationError, ShapeError

logger = logging.getLogger(__name__)


@dataclass
class FeaturePyramid:
    """Decoder taps and per-scale logits, coarsest scale first."""

    features: List[Tensor]
    logits: List[Tensor]
    labels: List[np.ndarray] = field(default_factory=list)

    @property
    def scales(self) -> int:
        return len(self.features)

    def factors(self, extents: Tuple[int, int]) -> List[int]:
        """Downsampling factor of every scale relative to the input extents."""
        return [extents[0] // f.shape[2] for f in self.features]


@dataclass
class ParamPartition:
    theta: Params
    omega: Params
    phi: Params
    finetune_mask: FrozenSet[str]

    def merged(self, head: Optional[Params] = None) -> Params:
        return {**self.theta, **(self.omega if head is None else head)}


def layer_of(param_id: str) -> str:
    return param_id.rsplit(".", 1)[0]


def block_of(param_id: str) -> str:
    return param_id.split(".", 1)[0]


def deep_supervision_weights(scales: int) -> List[float]:
    """Per-scale loss weights, coarsest first; halving towards coarser scales."""
    if scales == len(Config.DEEP_SUPERVISION_WEIGHTS):
        return list(Config.DEEP_SUPERVISION_WEIGHTS)
    return [0.5 ** (scales - 1 - k) for k in range(scales)]


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> Tensor:
    """Per sample, per channel normalization with an affine map."""
    channels = x.shape[1]
    centered = x - mean(x, axis=(2, 3), keepdims=True)
    var = mean(centered * centered, axis=(2, 3), keepdims=True)
    normed = centered / sqrt(var + eps)
    return normed * gamma.reshape(1, channels, 1, 1) + beta.reshape(1, channels, 1, 1)


class UNet:
    """
    Encoder/decoder network with instance norm, ReLU, strided-conv
    downsampling, transposed-conv upsampling and a 1x1 head per decoder scale.
    """

    def __init__(self, config: Optional[NetworkConfig] = None):
        self.config = config or NetworkConfig()
        self.logger = logging.getLogger(__name__)
        self._shapes = self._build_shapes()

    # ---------------------------------------------------------------- structure

    def width(self, level: int) -> int:
        return self.config.channels * 2 ** level

    def _build_shapes(self) -> Dict[str, Tuple[int, ...]]:
        cfg = self.config
        depth, n = cfg.depth, cfg.num_classes
        shapes: Dict[str, Tuple[int, ...]] = {}

        def conv_layer(prefix, c_out, c_in):
            shapes[f"{prefix}.w"] = (c_out, c_in, 3, 3)
            shapes[f"{prefix}.gamma"] = (c_out,)
            shapes[f"{prefix}.beta"] = (c_out,)

        for level in range(depth + 1):
            c_in = cfg.in_channels if level == 0 else self.width(level - 1)
            conv_layer(f"enc{level}.conv_a", self.width(level), c_in)
            conv_layer(f"enc{level}.conv_b", self.width(level), self.width(level))

        for u in range(depth):
            level = depth - 1 - u
            ch = self.width(level)
            shapes[f"up{u}.tconv.w"] = (self.width(level + 1), ch, 2, 2)
            shapes[f"up{u}.tconv.b"] = (ch,)
            conv_layer(f"up{u}.conv_a", ch, 2 * ch)
            conv_layer(f"up{u}.conv_b", ch, ch)
            head = "out" if u == depth - 1 else f"up{u}.head"
            shapes[f"{head}.w"] = (n, ch, 1, 1)
            shapes[f"{head}.b"] = (n,)
        return shapes

    @property
    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return dict(self._shapes)

    @property
    def blocks(self) -> List[str]:
        depth = self.config.depth
        return [f"enc{i}" for i in range(depth + 1)] + [f"up{u}" for u in range(depth)] + ["out"]

    def head_trunk(self) -> List[str]:
        """Head layers on the path to the final logits, ordered from the output backwards."""
        trunk = ["out"]
        for u in reversed(range(self.config.depth)):
            trunk += [f"up{u}.conv_b", f"up{u}.conv_a", f"up{u}.tconv"]
        return trunk

    def init_params(self, seed: int) -> Params:
        """He-normal weights, unit/zero norm affine, zero biases."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in self._shapes.items():
            if name.endswith(".gamma"):
                params[name] = np.ones(shape)
            elif name.endswith(".beta") or name.endswith(".b"):
                params[name] = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[1:])) if not name.endswith("tconv.w") else shape[0] * 4
                params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        return params

    def check_params(self, params: Params) -> None:
        if set(params) != set(self._shapes):
            missing = sorted(set(self._shapes) - set(params))
            extra = sorted(set(params) - set(self._shapes))
            raise ShapeError(f"parameter set mismatch: missing {missing[:4]}, unexpected {extra[:4]}")
        for name, shape in self._shapes.items():
            if params[name].shape != shape:
                raise ShapeError(f"'{name}' has shape {params[name].shape}, expected {shape}")

    # ---------------------------------------------------------------- forward

    def _conv_block(self, v: Dict[str, Tensor], prefix: str, x: Tensor, stride: int) -> Tensor:
        for layer, s in (("conv_a", stride), ("conv_b", 1)):
            key = f"{prefix}.{layer}"
            x = conv2d(x, v[f"{key}.w"], stride=s, padding=1)
            x = relu(instance_norm(x, v[f"{key}.gamma"], v[f"{key}.beta"], self.config.norm_eps))
        return x

    def _head(self, v: Dict[str, Tensor], key: str, x: Tensor) -> Tensor:
        bias = v[f"{key}.b"]
        return conv2d(x, v[f"{key}.w"], padding=0) + bias.reshape(1, bias.shape[0], 1, 1)

    def forward(self, tape: Tape, variables: Dict[str, Tensor],
                images: Union[np.ndarray, Tensor]) -> Tuple[FeaturePyramid, Tensor]:
        """Run the network on images [B, C, H, W] (or [B, H, W]); returns (pyramid, final logits)."""
        cfg = self.config
        if isinstance(images, np.ndarray) and images.ndim == 3:
            images = images[:, None]
        x = lift(tape, images)
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeError(f"expected input [B, {cfg.in_channels}, H, W], got {x.shape}")
        cfg.check_extents(x.shape[2:])

        skips = []
        h = x
        for level in range(cfg.depth + 1):
            h = self._conv_block(variables, f"enc{level}", h, stride=1 if level == 0 else 2)
            skips.append(h)

        features, logits = [], []
        for u in range(cfg.depth):
            level = cfg.depth - 1 - u
            bias = variables[f"up{u}.tconv.b"]
            h = conv_transpose2x2(h, variables[f"up{u}.tconv.w"]) + bias.reshape(1, bias.shape[0], 1, 1)
            h = concat([h, skips[level]], axis=1)
            h = self._conv_block(variables, f"up{u}", h, stride=1)
            features.append(h)
            logits.append(self._head(variables, "out" if u == cfg.depth - 1 else f"up{u}.head", h))
        return FeaturePyramid(features=features, logits=logits), logits[-1]

    def predict(self, params: Params, images: np.ndarray) -> np.ndarray:
        """Final logits as an array, no gradient tracking needed by callers."""
        tape = Tape()
        variables = {name: tape.constant(value) for name, value in params.items()}
        _, final = self.forward(tape, variables, images)
        return np.array(final.value)

    # ---------------------------------------------------------------- partition

    def resolve_mask(self, mask: str, omega_ids) -> FrozenSet[str]:
        """
        Parameter ids selected by a fine-tune mask over the head.

        none | all | last-N (trunk layers counted from the output) |
        up-N (last N up blocks, including their heads, plus `out`).
        """
        omega_ids = set(omega_ids)
        if mask == "none":
            return frozenset()
        if mask == "all":
            return frozenset(omega_ids)
        kind, _, count = mask.partition("-")
        if kind not in ("last", "up") or not count.isdigit() or int(count) < 1:
            raise ConfigValidationError(f"invalid fine-tune mask '{mask}'")
        count = int(count)
        if kind == "last":
            trunk = self.head_trunk()
            if count > len(trunk):
                raise ConfigValidationError(f"mask '{mask}' exceeds the {len(trunk)} head trunk layers")
            layers = set(trunk[:count])
            selected = {p for p in omega_ids if layer_of(p) in layers}
        else:
            depth = self.config.depth
            if count > depth:
                raise ConfigValidationError(f"mask '{mask}' exceeds the {depth} up blocks")
            blocks = {f"up{u}" for u in range(depth - count, depth)} | {"out"}
            selected = {p for p in omega_ids if block_of(p) in blocks}
            layers = {layer_of(p) for p in self._shapes if block_of(p) in blocks}
        outside = {layer_of(p) for p in self._shapes if layer_of(p) in layers} - {layer_of(p) for p in omega_ids}
        if outside:
            raise ShapeError(f"mask '{mask}' reaches layers outside the head: {sorted(outside)}")
        return frozenset(selected)


def split_params(network: UNet, params: Params, split_point: Union[int, str, None] = None,
                 finetune_mask: str = Config.FINETUNE_MASK) -> ParamPartition:
    """
    Partition parameters at a block boundary: blocks before the split form
    theta, the rest form omega. The default split sits after the bottleneck.
    `split_point` is a block index or the name of the first head block.
    """
    network.check_params(params)
    blocks = network.blocks
    if split_point is None:
        index = network.config.depth + 1
    elif isinstance(split_point, str):
        if split_point not in blocks:
            raise ShapeError(f"split point '{split_point}' is not a block boundary")
        index = blocks.index(split_point)
    else:
        index = int(split_point)
    if not 1 <= index < len(blocks):
        raise ShapeError(f"split index {index} must leave both partitions non-empty")

    head_blocks = set(blocks[index:])
    theta = {k: v.copy() for k, v in params.items() if block_of(k) not in head_blocks}
    omega = {k: v.copy() for k, v in params.items() if block_of(k) in head_blocks}
    mask = network.resolve_mask(finetune_mask, omega.keys())
    return ParamPartition(theta=theta, omega=omega, phi={k: v.copy() for k, v in omega.items()},
                          finetune_mask=mask)
