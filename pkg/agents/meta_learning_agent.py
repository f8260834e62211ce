"""
Dual meta-learning engine.

One iteration seeds the working head from its meta-initialization, takes a
single plain gradient step on the inner domain, then

  * updates the encoder theta with the bilevel hypergradient of the
    regularized outer loss (direct term plus the mixed second-order term), and
  * updates the head initialization phi with the gradient of the outer
    segmentation loss at the adapted head (first order by default).

The step functions are pure and work on any pair of loss callables; the
`MetaLearningAgent` drives them over a synthetic domain pool.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from agents.data_generation_agent import DomainPool
from knowledge.tissue_knowledge import tissue_knowledge
from models.config_model import RunConfig
from models.unet import ParamPartition, UNet, split_params
from utils.autodiff import (GradMap, LossFn, Params, Tape, Tensor, evaluate, fd_hvp,
                            fd_mixed_hvp, tree_norm, value_and_grad)
from utils.exceptions import CheckpointError, DivergenceError, NonFiniteError, SizeCapError
from utils.losses import (attach_labels, deep_supervised_loss, outer1_loss, pool_pyramid,
                          reg_loss)
from utils.membank import MemoryBank
from utils.metrics import dice
from utils.optim import MomentumState, schedule, sgd_nesterov_step, sgd_step
from utils.tensor_io import load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

Batch = Tuple[np.ndarray, np.ndarray]


def _check_finite(grads: GradMap, what: str) -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite {what} for '{name}'")


# ---------------------------------------------------------------- step functions

def inner_step(inner_loss_fn: LossFn, theta: Params, omega: Params, alpha: float,
               stats: Optional[Dict[str, float]] = None) -> Params:
    """omega* = omega - alpha * grad_omega L_inner(omega, theta); plain SGD, theta untouched."""
    loss, grads = value_and_grad(inner_loss_fn, {**theta, **omega}, wrt=omega.keys())
    _check_finite(grads, "inner gradient")
    if stats is not None:
        stats["inner_loss"] = loss
    return sgd_step(omega, grads, alpha)


def mfl_hypergradient(inner_loss_fn: LossFn, outer_loss_fn: LossFn, theta: Params, omega: Params,
                      omega_star: Params, alpha: float, eps: float = 1e-3,
                      stats: Optional[Dict[str, float]] = None) -> GradMap:
    """
    d/dtheta L_outer(omega*(theta), theta) for omega* from one inner step at omega:

        g_direct - alpha * v^T d2 L_inner / (d omega d theta),   v = dL_outer/d omega*

    with the mixed term from a central-difference HVP evaluated at (omega, theta).
    """
    loss, grads = value_and_grad(outer_loss_fn, {**theta, **omega_star})
    direct = {k: grads[k] for k in theta}
    if alpha == 0:
        hyper = direct
    else:
        v = {k: grads[k] for k in omega_star}
        mixed = fd_mixed_hvp(inner_loss_fn, omega, theta, v, eps)
        hyper = {k: direct[k] - alpha * mixed[k] for k in theta}
    _check_finite(hyper, "hypergradient")
    if stats is not None:
        stats["outer1_loss"] = loss
        stats["theta_hypergrad_norm"] = tree_norm(hyper)
    return hyper


def mfl_outer_step(inner_loss_fn: LossFn, outer_loss_fn: LossFn, theta: Params, omega: Params,
                   omega_star: Params, alpha: float, beta: float, eps: float = 1e-3) -> Params:
    """theta' = theta - beta * hypergradient (plain step)."""
    hyper = mfl_hypergradient(inner_loss_fn, outer_loss_fn, theta, omega, omega_star, alpha, eps)
    return sgd_step(theta, hyper, beta)


def mil_hypergradient(inner_loss_fn: LossFn, outer_loss_fn: LossFn, theta: Params, phi: Params,
                      omega_star: Params, alpha: float, second_order: bool = False,
                      eps: float = 1e-3, size_cap: int = 5000,
                      stats: Optional[Dict[str, float]] = None) -> GradMap:
    """
    Gradient of L_outer2 w.r.t. the head initialization.

    First order: g = dL_outer2/d omega*. Second order: (I - alpha * H_inner(phi)) g,
    the Hessian-vector product taken by central differences at (phi, theta).
    """
    loss, grads = value_and_grad(outer_loss_fn, {**theta, **omega_star}, wrt=omega_star.keys())
    if second_order and alpha != 0:
        size = sum(v.size for v in phi.values())
        if size > size_cap:
            raise SizeCapError(f"second-order head update on {size} parameters exceeds the cap of {size_cap}")
        hvp = fd_hvp(inner_loss_fn, {**theta, **phi}, grads, wrt=phi.keys(), eps=eps)
        grads = {k: grads[k] - alpha * hvp[k] for k in phi}
    _check_finite(grads, "head-initialization gradient")
    if stats is not None:
        stats["outer2_loss"] = loss
        stats["phi_grad_norm"] = tree_norm(grads)
    return grads


def mil_outer_step(inner_loss_fn: LossFn, outer_loss_fn: LossFn, theta: Params, phi: Params,
                   omega_star: Params, alpha: float, beta: float, second_order: bool = False,
                   eps: float = 1e-3, size_cap: int = 5000) -> Params:
    """phi' = phi - beta * head-initialization gradient (plain step)."""
    grads = mil_hypergradient(inner_loss_fn, outer_loss_fn, theta, phi, omega_star, alpha,
                              second_order, eps, size_cap)
    return sgd_step(phi, grads, beta)


def fd_unrolled_hypergradient(inner_loss_fn: LossFn, outer_loss_fn: LossFn, theta: Params,
                              omega: Params, alpha: float, eps: float = 1e-5) -> GradMap:
    """
    Central differences of theta -> L_outer(omega - alpha * grad_omega L_inner(omega, theta), theta),
    one coordinate at a time. Only meant for tiny networks.
    """
    def unrolled(theta_point: Params) -> float:
        omega_star = inner_step(inner_loss_fn, theta_point, omega, alpha)
        return evaluate(outer_loss_fn, {**theta_point, **omega_star})

    result = {}
    for name, value in theta.items():
        grad = np.zeros_like(value)
        flat = grad.reshape(-1)
        for i in range(value.size):
            probe = value.copy().reshape(-1)
            probe[i] += eps
            f_plus = unrolled({**theta, name: probe.reshape(value.shape)})
            probe[i] -= 2 * eps
            f_minus = unrolled({**theta, name: probe.reshape(value.shape)})
            flat[i] = (f_plus - f_minus) / (2 * eps)
        result[name] = grad
    return result


# ---------------------------------------------------------------- segmentation objective

class SegmentationObjective:
    """
    Builds the loss callables of one iteration over mini-batches and keeps the
    detached class features of the latest outer evaluation for the bank.
    """

    def __init__(self, network: UNet, config: RunConfig, bank: MemoryBank):
        self.network = network
        self.config = config
        self.bank = bank
        self.last_outer_features: List[list] = []
        self.last_inner_features: List[list] = []
        self.last_reg: float = 0.0

    def _pyramid_loss(self, tape: Tape, variables: Dict[str, Tensor], batch: Batch):
        images, labels = batch
        pyramid, _ = self.network.forward(tape, variables, images)
        attach_labels(pyramid, labels, self.network.config.num_classes)
        return pyramid, deep_supervised_loss(pyramid.logits, pyramid.labels)

    def segmentation_fn(self, batch: Batch, record_inner: bool = False) -> LossFn:
        def loss_fn(tape: Tape, variables: Dict[str, Tensor]) -> Tensor:
            pyramid, loss = self._pyramid_loss(tape, variables, batch)
            if record_inner and not self.last_inner_features:
                # first evaluation is the unperturbed one
                self.last_inner_features = pool_pyramid(pyramid, detach=True)
            return loss
        return loss_fn

    def outer_fn(self, batches: Sequence[Batch], regularize: bool = True, record: bool = True) -> LossFn:
        reg_cfg = self.config.regularization

        def loss_fn(tape: Tape, variables: Dict[str, Tensor]) -> Tensor:
            pyramids, seg = [], None
            for batch in batches:
                pyramid, loss = self._pyramid_loss(tape, variables, batch)
                pyramids.append(pyramid)
                seg = loss if seg is None else seg + loss
            seg = seg * (1.0 / len(batches))
            total = seg
            if regularize and reg_cfg.weight > 0:
                reg = reg_loss(self.bank, pyramids, reg_cfg.lambda1, reg_cfg.tap_scales,
                               reg_cfg.reduction, reg_cfg.anchor)
                self.last_reg = float(reg.item() if isinstance(reg, Tensor) else reg)
                total = outer1_loss(seg, reg, reg_cfg.weight)
            if record:
                self.last_outer_features = [pool_pyramid(p, detach=True) for p in pyramids]
            return total
        return loss_fn

    def push_features(self, include_inner: bool = False) -> int:
        pushed = 0
        pooled_sets = list(self.last_outer_features)
        if include_inner and self.last_inner_features:
            pooled_sets.append(self.last_inner_features)
        for per_scale in pooled_sets:
            for k, feats in enumerate(per_scale):
                pushed += self.bank.push_pooled(k, feats.detached(), feats.present)
        return pushed


# ---------------------------------------------------------------- state and episodes

@dataclass
class MetaState:
    theta: Params
    phi: Params
    omega: Params
    t: int = 0
    theta_momentum: MomentumState = field(default_factory=dict)
    phi_momentum: MomentumState = field(default_factory=dict)
    bank: MemoryBank = field(default_factory=MemoryBank)


@dataclass
class Episode:
    inner_domain: str
    outer_domains: Tuple[str, str]
    inner: Batch
    outer_mfl: Tuple[Batch, Batch]
    outer_mil: Tuple[Batch, Batch]


def draw_episode(pool: DomainPool, seed: int, t: int, batch_size: int, augmented: bool) -> Episode:
    """Domain assignment and batches of iteration t from the dedicated data stream."""
    rng = np.random.default_rng([seed, 1, t])
    inner, outer = pool.assign(rng)

    def batch(domain):
        return pool.train[domain].sample_batch(batch_size, rng, augmented)

    return Episode(inner, outer, batch(inner), (batch(outer[0]), batch(outer[1])),
                   (batch(outer[0]), batch(outer[1])))


METRIC_COLUMNS = ["iteration", "inner_domain", "alpha", "beta", "inner_loss", "outer1_loss", "reg_loss",
                  "outer2_loss", "theta_hypergrad_norm", "phi_grad_norm", "bank_pushes"]


class MetaLearningAgent:
    """
    Runs dual meta-learning over a domain pool, with checkpoints, an
    append-only metrics CSV and periodic held-in validation.
    """

    def __init__(self, config: RunConfig, network: Optional[UNet] = None):
        self.config = config
        self.network = network or UNet(config.network)
        self.logger = logging.getLogger(__name__)

    # ------------------------------------------------------------ setup

    def initialize(self) -> MetaState:
        params = self.network.init_params(self.config.seed)
        partition: ParamPartition = split_params(self.network, params, finetune_mask=self.config.finetune.mask)
        return MetaState(theta=partition.theta, phi=partition.phi,
                         omega={k: v.copy() for k, v in partition.phi.items()},
                         bank=MemoryBank(self.config.bank.capacity))

    def _rates(self, t: int) -> Tuple[float, float]:
        sched = self.config.schedule
        alpha, beta = schedule(min(t, sched.horizon), sched)
        if self.config.meta.mode == "joint":
            alpha = 0.0
        return alpha, beta

    def _apply(self, params: Params, grads: GradMap, lr: float, momentum: MomentumState):
        meta = self.config.meta
        if meta.outer_optimizer == "sgd":
            return sgd_step(params, grads, lr), momentum
        return sgd_nesterov_step(params, grads, lr, momentum, meta.momentum, meta.weight_decay)

    # ------------------------------------------------------------ one iteration

    def iteration(self, state: MetaState, episode: Episode,
                  stats: Optional[Dict[str, float]] = None) -> MetaState:
        """One full dual meta-learning iteration; returns a new state (the bank is shared)."""
        cfg = self.config
        stats = {} if stats is None else stats
        alpha, beta = self._rates(state.t)
        stats.update(alpha=alpha, beta=beta, inner_domain=episode.inner_domain)
        objective = SegmentationObjective(self.network, cfg, state.bank)

        if state.t == 0 and state.bank.is_empty() and cfg.regularization.weight > 0:
            self.logger.warning("Memory bank is empty; the regularizer stays inactive until the first push")

        omega = {k: v.copy() for k, v in state.phi.items()}
        inner_fn = objective.segmentation_fn(episode.inner, record_inner=cfg.bank.include_inner)
        omega_star = inner_step(inner_fn, state.theta, omega, alpha, stats)

        outer1 = objective.outer_fn(episode.outer_mfl, regularize=True, record=True)
        hyper = mfl_hypergradient(inner_fn, outer1, state.theta, omega, omega_star, alpha,
                                  cfg.meta.fd_epsilon, stats)
        stats["reg_loss"] = objective.last_reg
        self._check_divergence(stats["theta_hypergrad_norm"], state.t)
        theta, theta_mom = self._apply(state.theta, hyper, beta, state.theta_momentum)

        if cfg.meta.mode == "mfl-only":
            # without MIL the adapted head is carried forward as the next starting head
            phi, phi_mom = {k: v.copy() for k, v in omega_star.items()}, state.phi_momentum
        else:
            outer2 = objective.outer_fn(episode.outer_mil, regularize=cfg.regularization.in_mil, record=False)
            g_phi = mil_hypergradient(inner_fn, outer2, state.theta, state.phi, omega_star, alpha,
                                      cfg.meta.second_order_mil, cfg.meta.fd_epsilon,
                                      cfg.meta.second_order_cap, stats)
            self._check_divergence(stats["phi_grad_norm"], state.t)
            phi, phi_mom = self._apply(state.phi, g_phi, beta, state.phi_momentum)

        stats["bank_pushes"] = objective.push_features(cfg.bank.include_inner)
        return MetaState(theta=theta, phi=phi, omega=omega_star, t=state.t + 1,
                         theta_momentum=theta_mom, phi_momentum=phi_mom, bank=state.bank)

    def _check_divergence(self, norm: float, t: int) -> None:
        if not np.isfinite(norm) or norm > self.config.meta.divergence_threshold:
            raise DivergenceError(f"gradient norm {norm:.3g} above threshold at iteration {t}", iteration=t)

    # ------------------------------------------------------------ checkpoints

    def save(self, state: MetaState, directory: Path) -> Path:
        groups = {"theta": state.theta, "phi": state.phi,
                  "theta_mom": state.theta_momentum, "phi_mom": state.phi_momentum,
                  "bank": state.bank.state_dict()}
        metadata = {"iteration": state.t, "seed": self.config.seed, "mode": self.config.meta.mode,
                    "bank_capacity": state.bank.capacity}
        return save_checkpoint(directory, groups, metadata)

    def load(self, directory: Path) -> MetaState:
        groups, metadata = load_checkpoint(directory)
        if "theta" not in groups or "phi" not in groups:
            raise CheckpointError(f"checkpoint {directory} lacks theta or phi")
        expected = set(self.network.param_shapes)
        if set(groups["theta"]) | set(groups["phi"]) != expected:
            raise CheckpointError(f"checkpoint {directory} does not match the configured network")
        bank = MemoryBank(int(metadata.get("bank_capacity", self.config.bank.capacity)))
        bank.load_state_dict(groups.get("bank", {}))
        phi = groups["phi"]
        return MetaState(theta=groups["theta"], phi=phi, omega={k: v.copy() for k, v in phi.items()},
                         t=int(metadata.get("iteration", 0)), theta_momentum=groups.get("theta_mom", {}),
                         phi_momentum=groups.get("phi_mom", {}), bank=bank)

    @staticmethod
    def latest_checkpoint(run_dir: Path) -> Optional[Path]:
        candidates = sorted((Path(run_dir) / "checkpoints").glob("iter_*"))
        return candidates[-1] if candidates else None

    # ------------------------------------------------------------ validation

    def validate(self, state: MetaState, pool: DomainPool, count: int = 4) -> Dict[str, float]:
        """Mean tissue Dice of the zero-shot head on the first samples of each training domain."""
        scores = {}
        params = {**state.theta, **state.phi}
        for name, ds in pool.train.items():
            images, labels = ds.images[:count][:, None], ds.labels[:count]
            pred = self.network.predict(params, images).argmax(axis=1)
            scores[f"dice_{name}"] = float(np.mean([dice(pred == c, labels == c) for c in tissue_knowledge.tissues]))
        return scores

    # ------------------------------------------------------------ training loop

    def run(self, pool: DomainPool, run_dir: Path, resume: bool = False) -> MetaState:
        cfg = self.config
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.ini").write_text(cfg.to_ini())
        metrics_path = run_dir / "metrics.csv"

        state = self.initialize()
        if resume:
            latest = self.latest_checkpoint(run_dir)
            if latest is not None:
                state = self.load(latest)
                self.logger.info(f"Resumed from {latest} at iteration {state.t}")
        elif metrics_path.exists():
            metrics_path.unlink()

        iterations = 0 if cfg.meta.mode == "random-init" else cfg.meta.iterations
        last_good = self.save(state, run_dir / "checkpoints" / f"iter_{state.t:06d}")
        columns = METRIC_COLUMNS + [f"dice_{d}" for d in pool.domains]

        def fetch(t):
            return draw_episode(pool, cfg.seed, t, cfg.meta.batch_size, cfg.meta.augment)

        executor = ThreadPoolExecutor(max_workers=1) if cfg.meta.prefetch else None
        try:
            pending = None
            if executor is not None and state.t < iterations:
                pending = executor.submit(fetch, state.t)
            while state.t < iterations:
                t = state.t
                episode = pending.result() if pending is not None else fetch(t)
                if executor is not None and t + 1 < iterations:
                    pending = executor.submit(fetch, t + 1)
                stats: Dict[str, float] = {"iteration": t}
                try:
                    state = self.iteration(state, episode, stats)
                except (DivergenceError, NonFiniteError) as e:
                    raise DivergenceError(str(e), iteration=t, last_good_checkpoint=str(last_good)) from e

                if state.t % cfg.meta.validate_every == 0 or state.t == iterations:
                    stats.update(self.validate(state, pool))
                self._append_metrics(metrics_path, stats, columns)
                if state.t % cfg.meta.log_every == 0:
                    self.logger.info(
                        f"iter {state.t}/{iterations} inner={stats['inner_loss']:.4f} "
                        f"outer1={stats['outer1_loss']:.4f} reg={stats['reg_loss']:.4f} "
                        f"|g_theta|={stats['theta_hypergrad_norm']:.3g} alpha={stats['alpha']:.4g}")
                if state.t % cfg.meta.checkpoint_every == 0 or state.t == iterations:
                    last_good = self.save(state, run_dir / "checkpoints" / f"iter_{state.t:06d}")
        finally:
            if executor is not None:
                executor.shutdown(wait=True)

        self.save(state, run_dir / "final")
        self.logger.info(f"Meta-training finished after {state.t} iterations")
        return state

    @staticmethod
    def _append_metrics(path: Path, stats: Dict[str, float], columns: List[str]) -> None:
        row = pd.DataFrame([{c: stats.get(c, np.nan) for c in columns}], columns=columns)
        row.to_csv(path, mode="a", header=not path.exists(), index=False, float_format="%.10g")
