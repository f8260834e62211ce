"""
Parameter updates and step-size schedules.

Plain SGD is what the meta-equations prescribe inside an iteration; the
Nesterov optimizer (PyTorch semantics, weight decay folded into the gradient)
wraps only the aggregate encoder and head-initialization updates.
"""

import math
from typing import Dict, Optional, Tuple

import numpy as np

from models.config_model import ScheduleConfig
from utils.autodiff import GradMap, Params
from utils.exceptions import NonFiniteError, ShapeError

MomentumState = Dict[str, np.ndarray]


def _check_congruent(params: Params, grads: GradMap) -> None:
    missing = [k for k in grads if k not in params]
    if missing:
        raise ShapeError(f"gradients for unknown parameters: {missing}")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient '{name}' has shape {g.shape}, parameter has {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for '{name}'")


def sgd_step(params: Params, grads: GradMap, lr: float) -> Params:
    """w - lr * g for every parameter in grads; others are copied through."""
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    _check_congruent(params, grads)
    return {name: value - lr * grads[name] if name in grads else value.copy()
            for name, value in params.items()}


def sgd_nesterov_step(params: Params, grads: GradMap, lr: float,
                      momentum_state: Optional[MomentumState] = None,
                      momentum: float = 0.99, weight_decay: float = 3e-5,
                      nesterov: bool = True) -> Tuple[Params, MomentumState]:
    """
    One SGD step with (Nesterov) momentum and L2 weight decay.

        d   = g + wd * w
        buf = mu * buf + d          (buf = d on the first step)
        d   = d + mu * buf          (Nesterov) or buf
        w   = w - lr * d

    Only parameters present in `grads` move. Only lr < 0 is rejected:
    lr == 0 is a no-op step that leaves both the parameters and the
    momentum buffers untouched. Returns new dicts.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    _check_congruent(params, grads)
    state = {k: v.copy() for k, v in (momentum_state or {}).items()}
    if lr == 0:
        return {k: v.copy() for k, v in params.items()}, state

    updated = {}
    for name, value in params.items():
        if name not in grads:
            updated[name] = value.copy()
            continue
        d = grads[name] + weight_decay * value if weight_decay else grads[name]
        if momentum:
            buf = d.copy() if name not in state else momentum * state[name] + d
            state[name] = buf
            d = d + momentum * buf if nesterov else buf
        updated[name] = value - lr * d
    return updated, state


def theorem_rate(lipschitz: float, c: float, horizon: int) -> float:
    """min{1/L, c/sqrt(T)}"""
    if lipschitz <= 0:
        raise ValueError(f"Lipschitz constant must be positive, got {lipschitz}")
    return min(1.0 / lipschitz, c / math.sqrt(horizon))


def schedule(t: int, cfg: ScheduleConfig) -> Tuple[float, float]:
    """Step sizes (alpha_t, beta_t) at iteration t of a horizon cfg.horizon."""
    if not 0 <= t <= cfg.horizon:
        raise ValueError(f"iteration {t} outside [0, {cfg.horizon}]")
    if cfg.mode == "theorem":
        if cfg.lipschitz is None:
            raise ValueError("theorem schedule needs a Lipschitz constant")
        # constant over the horizon
        return (theorem_rate(cfg.lipschitz, cfg.c1, cfg.horizon),
                theorem_rate(cfg.lipschitz, cfg.c2, cfg.horizon))
    decay = (1.0 - t / cfg.horizon) ** cfg.power
    return cfg.alpha * decay, cfg.beta * decay
