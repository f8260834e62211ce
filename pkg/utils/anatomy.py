"""
Synthetic brain-like anatomy: concentric WM core, GM ring and CSF ring on a
smooth random blob, rendered under a domain intensity regime.
"""

from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from knowledge.tissue_knowledge import BACKGROUND, CSF, GM, WM
from models.domain_model import DomainSpec, Morphology
from utils.exceptions import ShapeError

MIN_EXTENT = 16
BLOB_RADIUS = 0.38
HARMONICS = (2, 3, 4)


def _radial_coordinate(rng: np.random.Generator, extents: Tuple[int, int]) -> np.ndarray:
    """Normalized radius: 1 on the blob outline, 0 at its center."""
    h, w = extents
    center = np.array([h, w]) / 2.0 + rng.uniform(-0.04, 0.04, size=2) * np.array([h, w])
    yy, xx = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    dy, dx = yy - center[0], xx - center[1]
    angle = np.arctan2(dy, dx)

    outline = np.ones_like(angle)
    for m in HARMONICS:
        outline += rng.uniform(0.0, 0.06) * np.cos(m * angle + rng.uniform(0, 2 * np.pi))
    rho = np.hypot(dy, dx) / (BLOB_RADIUS * min(h, w) * outline)

    wobble = ndimage.gaussian_filter(rng.normal(size=(h, w)), sigma=min(h, w) / 8.0, mode="wrap")
    wobble /= max(wobble.std(), 1e-12)
    return rho + 0.03 * wobble


def ring_bounds(morphology: Morphology) -> Tuple[float, float, float]:
    """Outer radii (normalized) of WM, GM and CSF."""
    wm = 0.5 * morphology.wm_scale
    gm = max(wm + 0.3 * morphology.ring_scale - 0.25 * morphology.atrophy, wm + 0.02)
    csf = max(1.0 + 0.1 * morphology.atrophy, gm + 0.05)
    return wm, gm, csf


def generate_label_map(seed: int, extents: Tuple[int, int] = (32, 32),
                       morphology: Optional[Morphology] = None, stride: int = 1) -> np.ndarray:
    """Deterministic label map (0 background, 1 CSF, 2 GM, 3 WM) for a seed."""
    extents = tuple(int(e) for e in extents)
    if len(extents) != 2 or min(extents) < MIN_EXTENT:
        raise ShapeError(f"extents {extents} too small for three tissue rings (need >= {MIN_EXTENT})")
    if any(e % stride for e in extents):
        raise ShapeError(f"extents {extents} not divisible by the network stride {stride}")
    morphology = morphology or Morphology()
    rho = _radial_coordinate(np.random.default_rng(seed), extents)
    wm, gm, csf = ring_bounds(morphology)

    label = np.full(extents, BACKGROUND, dtype=np.int64)
    label[rho < csf] = CSF
    label[rho < gm] = GM
    label[rho < wm] = WM
    return label


def bias_field(rng: np.random.Generator, extents: Tuple[int, int], amplitude: float,
               frequency: int, components: int) -> np.ndarray:
    """Sum of a few low-frequency cosines scaled to peak `amplitude`."""
    if amplitude == 0 or components == 0:
        return np.zeros(extents)
    h, w = extents
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    field = np.zeros(extents)
    for _ in range(components):
        ky, kx = rng.integers(0, frequency + 1, size=2)
        field += rng.normal() * np.cos(2 * np.pi * (ky * yy + kx * xx) + rng.uniform(0, 2 * np.pi))
    peak = np.abs(field).max()
    return field * (amplitude / peak) if peak > 0 else field


def render(label: np.ndarray, spec: DomainSpec, seed: int) -> np.ndarray:
    """Class-mean lookup plus bias field plus Gaussian noise, clamped to [0, 1]."""
    label = np.asarray(label)
    lookup = spec.lookup()
    if label.min() < 0 or label.max() >= lookup.size:
        raise ShapeError(f"label values outside [0, {lookup.size})")
    rng = np.random.default_rng([seed, 7])
    image = lookup[label]
    image = image + bias_field(rng, label.shape, spec.bias_amplitude, spec.bias_frequency, spec.bias_components)
    if spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, size=label.shape)
    return np.clip(image, 0.0, 1.0)


def augment(image: np.ndarray, label: np.ndarray, rng: np.random.Generator,
            jitter: float = 0.05) -> Tuple[np.ndarray, np.ndarray]:
    """Random flips along each axis and a small intensity scale/shift."""
    for axis in (-2, -1):
        if rng.random() < 0.5:
            image = np.flip(image, axis=axis)
            label = np.flip(label, axis=axis)
    scale = 1.0 + rng.uniform(-jitter, jitter)
    shift = rng.uniform(-jitter, jitter)
    return np.clip(image * scale + shift, 0.0, 1.0), np.ascontiguousarray(label)
