"""
Overlap and surface-distance metrics on binary masks.
"""

import math
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial.distance import cdist

from utils.exceptions import ShapeError

BRUTE_FORCE_LIMIT = 4_000_000


def _check_pair(pred: np.ndarray, gt: np.ndarray):
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask extents differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """2|P & G| / (|P| + |G|), 1.0 when both masks are empty."""
    pred, gt = _check_pair(pred, gt)
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


def boundary(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one face-adjacent voxel outside the mask (or outside the grid)."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = np.ones_like(mask)
    core = tuple(slice(1, -1) for _ in range(mask.ndim))
    for axis in range(mask.ndim):
        for shift in (-1, 1):
            neighbour = np.roll(padded, shift, axis=axis)[core]
            interior &= neighbour
    return mask & ~interior


def _spacing(spacing: Optional[Sequence[float]], ndim: int) -> np.ndarray:
    if spacing is None:
        return np.ones(ndim)
    spacing = np.asarray(spacing, dtype=np.float64)
    if spacing.shape != (ndim,) or np.any(spacing <= 0):
        raise ShapeError(f"spacing must hold {ndim} positive values")
    return spacing


def asd(pred: np.ndarray, gt: np.ndarray, spacing: Optional[Sequence[float]] = None,
        method: str = "auto") -> float:
    """
    Average symmetric surface distance between the mask boundaries.
    NaN when either mask is empty. `method` is "brute", "edt" or "auto".
    """
    pred, gt = _check_pair(pred, gt)
    if not pred.any() or not gt.any():
        return math.nan
    sp = _spacing(spacing, pred.ndim)
    bp, bg = boundary(pred), boundary(gt)
    n_p, n_g = int(bp.sum()), int(bg.sum())

    if method == "auto":
        method = "brute" if n_p * n_g <= BRUTE_FORCE_LIMIT else "edt"
    if method == "brute":
        pts_p = np.argwhere(bp) * sp
        pts_g = np.argwhere(bg) * sp
        distances = cdist(pts_p, pts_g)
        total = distances.min(axis=1).sum() + distances.min(axis=0).sum()
    elif method == "edt":
        to_g = ndimage.distance_transform_edt(~bg, sampling=sp)
        to_p = ndimage.distance_transform_edt(~bp, sampling=sp)
        total = to_g[bp].sum() + to_p[bg].sum()
    else:
        raise ValueError(f"unknown ASD method '{method}'")
    return float(total / (n_p + n_g))
