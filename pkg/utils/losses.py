"""
Segmentation objective and the class-aware feature regularizer.

Segmentation: soft Dice + cross-entropy, deep supervised over the decoder
scales. Regularization: per-class pooled decoder features are pulled towards
their memory-bank prototype and pushed away from the other two tissues'
features through a margin triplet on cosine distances.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from config import Config
from knowledge.tissue_knowledge import tissue_knowledge
from models.unet import FeaturePyramid, deep_supervision_weights
from utils.autodiff import Tensor, exp, log_softmax, relu, sqrt
from utils.exceptions import ShapeError
from utils.membank import MemoryBank

logger = logging.getLogger(__name__)

Scalar = Union[Tensor, float]
Vector = Union[Tensor, np.ndarray]


@dataclass
class ClassFeatures:
    """Mean feature vector and presence flag per tissue at one scale."""

    vectors: Dict[int, Vector]
    present: Dict[int, bool]

    def detached(self) -> Dict[int, np.ndarray]:
        return {c: np.array(v.value if isinstance(v, Tensor) else v) for c, v in self.vectors.items()}


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"label values must lie in [0, {num_classes}), got range [{labels.min()}, {labels.max()}]")
    return np.moveaxis(np.eye(num_classes)[labels], -1, 1)


def dice_ce_loss(logits: Tensor, labels: np.ndarray, smooth: float = Config.DICE_SMOOTH) -> Tensor:
    """Mean per-class soft-Dice loss plus mean voxel cross-entropy, logits [B, n, H, W]."""
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],) + tuple(logits.shape[2:]):
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    target = one_hot(labels, logits.shape[1])
    log_probs = log_softmax(logits, axis=1)
    probs = exp(log_probs)

    voxels = labels.size
    ce = -(log_probs * target).sum() * (1.0 / voxels)

    axes = (0, 2, 3)
    intersection = (probs * target).sum(axis=axes)
    denominator = probs.sum(axis=axes) + target.sum(axis=axes) + smooth
    dice = (intersection * 2.0 + smooth) / denominator
    return (1.0 - dice).mean() + ce


def downsample_labels(labels: np.ndarray, factor: int, num_classes: Optional[int] = None) -> np.ndarray:
    """Majority vote over factor x factor windows; ties go to the smallest class index."""
    labels = np.asarray(labels)
    if factor == 1:
        return labels.copy()
    h, w = labels.shape[-2:]
    if h % factor or w % factor:
        raise ShapeError(f"label extents {(h, w)} are not divisible by {factor}")
    n = int(labels.max()) + 1 if num_classes is None else num_classes
    windows = labels.reshape(labels.shape[:-2] + (h // factor, factor, w // factor, factor))
    counts = np.stack([(windows == c).sum(axis=(-3, -1)) for c in range(n)], axis=-1)
    return counts.argmax(axis=-1).astype(labels.dtype)


def attach_labels(pyramid: FeaturePyramid, labels: np.ndarray, num_classes: int) -> FeaturePyramid:
    """Fill the pyramid's per-scale label maps M_k from full-resolution labels."""
    extents = np.asarray(labels).shape[-2:]
    pyramid.labels = [downsample_labels(labels, f, num_classes) for f in pyramid.factors(extents)]
    return pyramid


def deep_supervised_loss(logits: Sequence[Tensor], labels: Sequence[np.ndarray],
                         weights: Optional[Sequence[float]] = None,
                         smooth: float = Config.DICE_SMOOTH) -> Tensor:
    """Weighted sum of dice_ce_loss over scales, coarsest first."""
    if len(logits) != len(labels):
        raise ShapeError(f"{len(logits)} logit scales but {len(labels)} label scales")
    weights = deep_supervision_weights(len(logits)) if weights is None else list(weights)
    if len(weights) != len(logits):
        raise ShapeError(f"{len(weights)} weights for {len(logits)} scales")
    total = None
    for w, scale_logits, scale_labels in zip(weights, logits, labels):
        term = dice_ce_loss(scale_logits, scale_labels, smooth) * w
        total = term if total is None else total + term
    return total


def class_pool(features: Union[Tensor, np.ndarray], labels: np.ndarray,
               classes: Sequence[int] = tissue_knowledge.tissues) -> ClassFeatures:
    """Per-class mean feature over every voxel of the batch carrying that label."""
    labels = np.asarray(labels)
    if labels.shape != (features.shape[0],) + tuple(features.shape[2:]):
        raise ShapeError(f"labels {labels.shape} do not match features {features.shape}")
    channels = features.shape[1]
    vectors, present = {}, {}
    for cls in classes:
        mask = (labels == cls)[:, None].astype(np.float64)
        count = float(mask.sum())
        present[cls] = count > 0
        if not present[cls]:
            vectors[cls] = np.zeros(channels)
        elif isinstance(features, Tensor):
            vectors[cls] = (features * mask).sum(axis=(0, 2, 3)) * (1.0 / count)
        else:
            vectors[cls] = (features * mask).sum(axis=(0, 2, 3)) / count
    return ClassFeatures(vectors=vectors, present=present)


def pool_pyramid(pyramid: FeaturePyramid, detach: bool = False) -> List[ClassFeatures]:
    if len(pyramid.labels) != pyramid.scales:
        raise ShapeError("pyramid labels are missing; call attach_labels first")
    return [class_pool(np.array(f.value) if detach else f, m)
            for f, m in zip(pyramid.features, pyramid.labels)]


def cosine_distance(x: Vector, y: Vector, floor: float = Config.COSINE_NORM_FLOOR) -> Scalar:
    """1 - cos(x, y); 1 when either vector is (numerically) zero."""
    xv = x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    yv = y.value if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    if xv.shape != yv.shape:
        raise ShapeError(f"cosine distance between shapes {xv.shape} and {yv.shape}")
    if np.linalg.norm(xv) < floor or np.linalg.norm(yv) < floor:
        return 1.0
    if not isinstance(x, Tensor) and not isinstance(y, Tensor):
        return float(1.0 - xv @ yv / (np.linalg.norm(xv) * np.linalg.norm(yv)))
    tensor = x if isinstance(x, Tensor) else y
    x = x if isinstance(x, Tensor) else tensor.tape.constant(xv)
    y = y if isinstance(y, Tensor) else tensor.tape.constant(yv)
    return 1.0 - (x * y).sum() / (sqrt((x * x).sum()) * sqrt((y * y).sum()))


def triplet_term(prototype: Optional[np.ndarray], positive: Optional[Vector],
                 negatives: Sequence[Optional[Vector]], margin: float = Config.LAMBDA1,
                 reduction: str = "triplet") -> Scalar:
    """
    max(0, d(p, f_same) - d(p, f_other1) - d(p, f_other2) + margin).

    The prototype is a constant anchor. A missing anchor or feature (None)
    makes the term 0. reduction="sum" drops the hinge.
    """
    if prototype is None or positive is None or any(n is None for n in negatives):
        return 0.0
    anchor = np.array(prototype.value if isinstance(prototype, Tensor) else prototype, dtype=np.float64)
    z = cosine_distance(positive, anchor) + margin
    for negative in negatives:
        z = z - cosine_distance(negative, anchor)
    if reduction == "sum":
        return z
    if reduction != "triplet":
        raise ValueError(f"unknown reduction '{reduction}'")
    return relu(z) if isinstance(z, Tensor) else max(0.0, z)


def reg_loss(bank: MemoryBank, pyramids: Sequence[FeaturePyramid], margin: float = Config.LAMBDA1,
             scales: Optional[Sequence[int]] = None, reduction: str = "triplet",
             anchor: str = "prototype") -> Scalar:
    """
    Class-aware regularizer over the outer datasets' pyramids.

    Averages 3 tissues x 2 datasets x K scales triplet terms; inactive terms
    (empty bank, absent class, missing dataset) count as zero in the mean.
    anchor="sample" replaces the bank prototype by the detached same-class
    feature of the other outer dataset.
    """
    if len(pyramids) > 2:
        raise ValueError("the regularizer takes at most two outer datasets")
    if not pyramids:
        return 0.0
    active_scales = list(range(pyramids[0].scales) if scales is None else scales)
    if not active_scales:
        return 0.0
    tissues = tissue_knowledge.tissues
    pooled = [pool_pyramid(p) for p in pyramids]

    total: Scalar = 0.0
    skipped = []
    for k in active_scales:
        for d, per_scale in enumerate(pooled):
            feats = per_scale[k]
            other = pooled[1 - d][k] if len(pooled) == 2 else None
            if not all(feats.present[c] for c in tissues):
                skipped.append((d, k))
                continue
            for cls in tissues:
                if anchor == "prototype":
                    proto = bank.prototype(cls, k)
                elif anchor == "sample":
                    proto = other.detached()[cls] if other is not None and other.present[cls] else None
                else:
                    raise ValueError(f"unknown anchor '{anchor}'")
                negatives = [feats.vectors[c] for c in tissues if c != cls]
                total = total + triplet_term(proto, feats.vectors[cls], negatives, margin, reduction)
    if skipped:
        logger.warning(f"Regularizer skipped {len(skipped)} (dataset, scale) pair(s) with an absent tissue: {skipped}")
    return total * (1.0 / (6 * len(active_scales)))


def outer1_loss(seg_loss: Scalar, reg: Scalar, weight: float = Config.LAMBDA2) -> Scalar:
    """seg + lambda2 * reg"""
    return seg_loss + reg * weight
