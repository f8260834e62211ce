"""
Convergence lab: quadratic bilevel problems with closed-form hypergradients
and seeded stochastic-gradient experiments checking the O(1/sqrt(T)) decay of
the smallest squared hypergradient norm.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from models.config_model import LabConfig
from models.report_model import RateReport
from utils.autodiff import Params, Tape, Tensor, dot, matvec
from utils.exceptions import DivergenceError
from utils.optim import theorem_rate


@dataclass
class QuadraticBilevel:
    """
    L_inner(w, t) = 1/2 w^T A w + w^T B t + b^T w
    L_outer(w, t) = 1/2 |w - w_target|^2 + 1/2 mu |t - t_target|^2
    """

    A: np.ndarray
    B: np.ndarray
    b: np.ndarray
    w_target: np.ndarray
    t_target: np.ndarray
    mu: float = 1.0

    @classmethod
    def random(cls, seed: int, n_omega: int = 5, n_theta: int = 3, mu: float = 1.0,
               coupling: float = 0.5, eig_range=(1.0, 4.0)) -> "QuadraticBilevel":
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.normal(size=(n_omega, n_omega)))
        eigs = rng.uniform(eig_range[0], eig_range[1], size=n_omega)
        A = (q * eigs) @ q.T
        A = 0.5 * (A + A.T)
        B = coupling * rng.normal(size=(n_omega, n_theta)) / np.sqrt(n_omega)
        return cls(A=A, B=B, b=rng.normal(size=n_omega), w_target=rng.normal(size=n_omega),
                   t_target=rng.normal(size=n_theta), mu=mu)

    @classmethod
    def from_config(cls, cfg: LabConfig, seed: int) -> "QuadraticBilevel":
        return cls.random(seed, cfg.n_omega, cfg.n_theta, cfg.mu, cfg.coupling, cfg.eig_range)

    @property
    def lipschitz(self) -> float:
        return max(float(np.linalg.eigvalsh(self.A).max()), 1.0, self.mu) + float(np.linalg.norm(self.B, 2))

    # ------------------------------------------------------------ closed forms (batched over rows)

    def inner_grad(self, omega: np.ndarray, theta: np.ndarray) -> np.ndarray:
        return omega @ self.A + theta @ self.B.T + self.b

    def inner_solution(self, omega: np.ndarray, theta: np.ndarray, alpha: float) -> np.ndarray:
        return omega - alpha * self.inner_grad(omega, theta)

    def outer_value(self, omega_star: np.ndarray, theta: np.ndarray) -> np.ndarray:
        return (0.5 * np.sum((omega_star - self.w_target) ** 2, axis=-1)
                + 0.5 * self.mu * np.sum((theta - self.t_target) ** 2, axis=-1))

    def exact_hypergradient(self, theta: np.ndarray, omega: np.ndarray, alpha: float) -> np.ndarray:
        """d/dtheta L_outer(omega - alpha grad_omega L_inner(omega, theta), theta)."""
        residual = self.inner_solution(omega, theta, alpha) - self.w_target
        return self.mu * (theta - self.t_target) - alpha * residual @ self.B

    def exact_init_gradient(self, phi: np.ndarray, theta: np.ndarray, alpha: float) -> np.ndarray:
        """d/dphi L_outer(phi - alpha grad L_inner(phi, theta), theta) = (I - alpha A)(omega* - w_target)."""
        residual = self.inner_solution(phi, theta, alpha) - self.w_target
        return residual - alpha * residual @ self.A

    # ------------------------------------------------------------ tape forms

    def inner_loss(self, tape: Tape, v: Dict[str, Tensor]) -> Tensor:
        w, t = v["omega"], v["theta"]
        return 0.5 * dot(w, matvec(self.A, w)) + dot(w, matvec(self.B, t)) + dot(w, self.b)

    def outer_loss(self, tape: Tape, v: Dict[str, Tensor]) -> Tensor:
        dw = v["omega"] - self.w_target
        dt = v["theta"] - self.t_target
        return 0.5 * dot(dw, dw) + (0.5 * self.mu) * dot(dt, dt)


def unrolled_hypergradient(problem: QuadraticBilevel, theta: np.ndarray, omega: np.ndarray,
                           alpha: float) -> np.ndarray:
    """Reverse-mode derivative through the inner step, built on one tape."""
    tape = Tape()
    t = tape.leaf("theta", theta)
    w = tape.leaf("omega", omega)
    inner_grad = matvec(problem.A, w) + matvec(problem.B, t) + problem.b
    omega_star = w - alpha * inner_grad
    loss = problem.outer_loss(tape, {"omega": omega_star, "theta": t})
    return tape.backward(loss, ["theta"])["theta"]


# ---------------------------------------------------------------- rate experiments

@dataclass
class ConvergenceTrace:
    trace: str
    horizon: int
    grad_norm_sq: np.ndarray      # ensemble mean per step
    loss: np.ndarray              # ensemble mean per step
    alpha: float
    beta: float
    min_grad_sq: np.ndarray       # per repeat, min over t
    rho: float
    noise_sum: float
    noise_count: int
    noise_std: float

    @property
    def mean_min_grad_sq(self) -> float:
        return float(self.min_grad_sq.mean())

    def noise_mean_within(self, k: float = 4.0) -> bool:
        """Empirical mean of the injected perturbations within k standard errors of zero."""
        if self.noise_count == 0 or self.noise_std == 0:
            return True
        return abs(self.noise_sum / self.noise_count) <= k * self.noise_std / np.sqrt(self.noise_count)

    def to_frame(self) -> pd.DataFrame:
        steps = np.arange(1, self.horizon + 1)
        return pd.DataFrame({"t": steps, "grad_norm_sq": self.grad_norm_sq, "loss": self.loss,
                             "alpha_t": self.alpha, "beta_t": self.beta})


def run_rate_experiment(problem: QuadraticBilevel, horizon: int, trace: str = "mfl", sigma: float = 1.0,
                        repeats: int = 20, c1: float = 1.0, c2: float = 1.0, seed: int = 0,
                        divergence_threshold: float = 1e12) -> ConvergenceTrace:
    """
    Stochastic meta-updates on the quadratic problem with the theorem step sizes
    for horizon T; all repeats advance together as rows of one array.

    mfl: theta follows the noisy hypergradient, the working head is carried
         forward as the adapted head.
    mil: the head initialization follows the noisy exact (second-order) gradient,
         theta fixed.
    """
    if trace not in ("mfl", "mil"):
        raise ValueError(f"unknown trace '{trace}'")
    L = problem.lipschitz
    alpha = theorem_rate(L, c1, horizon)
    beta = theorem_rate(L, c2, horizon)
    rng = np.random.default_rng([seed, horizon, 0 if trace == "mfl" else 1])
    n_omega, n_theta = problem.B.shape

    theta = np.tile(problem.t_target + 1.0, (repeats, 1))
    omega = np.zeros((repeats, n_omega))
    dim = n_theta if trace == "mfl" else n_omega
    scale = sigma / np.sqrt(dim)

    grad_sq = np.empty(horizon)
    losses = np.empty(horizon)
    running_min = np.full(repeats, np.inf)
    rho = 0.0
    noise_sum, noise_count = 0.0, 0

    for t in range(horizon):
        if trace == "mfl":
            exact = problem.exact_hypergradient(theta, omega, alpha)
            value = problem.outer_value(problem.inner_solution(omega, theta, alpha), theta)
        else:
            exact = problem.exact_init_gradient(omega, theta, alpha)
            value = problem.outer_value(problem.inner_solution(omega, theta, alpha), theta)
        norm_sq = np.sum(exact * exact, axis=1)
        worst = float(norm_sq.max())
        if not np.isfinite(worst) or worst > divergence_threshold ** 2:
            raise DivergenceError(f"{trace} trace diverged at step {t} (|grad|^2={worst:.3g})", iteration=t)
        rho = max(rho, float(np.sqrt(worst)))
        np.minimum(running_min, norm_sq, out=running_min)
        grad_sq[t] = norm_sq.mean()
        losses[t] = value.mean()

        noise = rng.normal(0.0, scale, size=exact.shape) if sigma > 0 else 0.0
        if sigma > 0:
            noise_sum += float(noise.sum())
            noise_count += noise.size
        if trace == "mfl":
            omega_star = problem.inner_solution(omega, theta, alpha)
            theta = theta - beta * (exact + noise)
            omega = omega_star
        else:
            omega = omega - beta * (exact + noise)

    return ConvergenceTrace(trace=trace, horizon=horizon, grad_norm_sq=grad_sq, loss=losses, alpha=alpha,
                            beta=beta, min_grad_sq=running_min, rho=rho, noise_sum=noise_sum,
                            noise_count=noise_count, noise_std=scale)


def verify_bound(horizons: Sequence[int], values: Sequence[float], threshold: float = -0.45,
                 trace: str = "synthetic", rho: Optional[float] = None,
                 sigma: Optional[float] = None) -> RateReport:
    """Log-log slope fit of min-grad^2 against T and the constant C of value <= C / sqrt(T)."""
    horizons = np.asarray(horizons, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if horizons.size < 3:
        raise ValueError(f"need at least 3 horizons to fit a rate, got {horizons.size}")
    if np.any(values <= 0):
        raise ValueError("rate values must be positive for a log-log fit")
    x, y = np.log(horizons), np.log(values)
    slope, intercept = np.polyfit(x, y, 1)
    residuals = y - (slope * x + intercept)
    return RateReport(trace=trace, horizons=[int(h) for h in horizons], values=[float(v) for v in values],
                      slope=float(slope), intercept=float(intercept),
                      c_fit=float(np.max(values * np.sqrt(horizons))),
                      residuals=[float(r) for r in residuals], threshold=threshold,
                      passed=bool(slope <= threshold), rho=rho, sigma=sigma)


def _run_leg(args) -> ConvergenceTrace:
    problem, horizon, trace, cfg, seed = args
    return run_rate_experiment(problem, horizon, trace, cfg.sigma, cfg.repeats, cfg.c1, cfg.c2, seed)


class ConvergenceAgent:
    """
    Runs the rate study for each configured trace and writes traces and reports.
    """

    def __init__(self, config: Optional[LabConfig] = None, seed: int = 0):
        self.config = config or LabConfig()
        self.seed = seed
        self.problem = QuadraticBilevel.from_config(self.config, seed)
        self.logger = logging.getLogger(__name__)

    def study(self, trace: str) -> List[ConvergenceTrace]:
        cfg = self.config
        jobs = [(self.problem, T, trace, cfg, self.seed) for T in cfg.horizons]
        if cfg.workers > 1:
            with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
                return list(pool.map(_run_leg, jobs))
        return [_run_leg(job) for job in jobs]

    def run(self, out_dir: Optional[Path] = None) -> Dict[str, RateReport]:
        cfg = self.config
        reports = {}
        for trace in cfg.traces:
            legs = self.study(trace)
            for leg in legs:
                if not leg.noise_mean_within():
                    self.logger.warning(f"{trace} T={leg.horizon}: injected noise mean is off zero")
            report = verify_bound([leg.horizon for leg in legs], [leg.mean_min_grad_sq for leg in legs],
                                  cfg.slope_threshold, trace, rho=max(leg.rho for leg in legs), sigma=cfg.sigma)
            reports[trace] = report
            self.logger.info(f"{trace}: slope {report.slope:.3f} -> {'pass' if report.passed else 'fail'}")
            if out_dir is not None:
                out_dir = Path(out_dir)
                out_dir.mkdir(parents=True, exist_ok=True)
                legs[-1].to_frame().to_csv(out_dir / f"trace_{trace}.csv", index=False, float_format="%.10g")
        if out_dir is not None:
            text = "\n\n".join(r.to_text() for r in reports.values())
            (Path(out_dir) / "rate_report.txt").write_text(text + "\n")
        return reports
