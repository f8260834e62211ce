from pydantic import BaseModel, Field, field_validator, model_validator
from typing import ClassVar, List, Literal, Optional, Tuple
from pathlib import Path
import configparser

from config import Config
from utils.exceptions import ConfigValidationError, ShapeError


class NetworkConfig(BaseModel):
    """Desk-scale U-Net: encoder E_theta + segmentation head D_omega"""

    spatial_rank: Literal[2] = Field(2, description="Spatial rank of inputs (2 at desk scale)")
    depth: int = Field(Config.NETWORK_DEPTH, ge=1, description="Number of down/up blocks")
    channels: int = Field(Config.CHANNEL_MULTIPLIER, ge=1, description="Starting channel width multiplier c")
    num_classes: int = Field(Config.NUM_CLASSES, ge=2, description="Background + CSF + GM + WM")
    in_channels: int = Field(1, ge=1, description="Image channels")
    norm_eps: float = Field(Config.NORM_EPS, gt=0, description="Instance norm epsilon")

    @property
    def stride(self) -> int:
        return 2 ** self.depth

    def check_extents(self, extents: Tuple[int, ...]) -> None:
        if len(extents) != self.spatial_rank or any(e % self.stride for e in extents):
            raise ShapeError(f"input extents {extents} must be divisible by {self.stride}")


class RegConfig(BaseModel):
    """Class-aware triplet regularization (margin, weight, taps, variants)"""

    enabled: bool = Field(True, description="Include the regularizer in L_outer1")
    lambda1: float = Field(Config.LAMBDA1, ge=0, le=4, description="Triplet margin")
    lambda2: float = Field(Config.LAMBDA2, ge=0, le=10, description="Regularization weight in L_outer1")
    tap_scales: Optional[List[int]] = Field(None, description="Decoder scales carrying regularization (None = all)")
    reduction: Literal["triplet", "sum"] = Field("triplet", description="Hinge (triplet) or plain sum of distances")
    anchor: Literal["prototype", "sample"] = Field("prototype", description="Memory-bank prototype or cross-dataset sample anchor")
    in_mil: bool = Field(False, description="Also add the regularizer to L_outer2")

    @property
    def weight(self) -> float:
        return self.lambda2 if self.enabled else 0.0


class BankConfig(BaseModel):
    capacity: int = Field(Config.BANK_CAPACITY, ge=1, le=100000, description="FIFO capacity N per (class, scale)")
    include_inner: bool = Field(False, description="Also push features from the inner-loop domain")


class ScheduleConfig(BaseModel):
    """Step-size schedule for alpha_t and beta_t"""

    mode: Literal["poly", "theorem"] = Field("poly", description="Polynomial decay or theorem-constant schedule")
    alpha: float = Field(Config.INNER_LR, ge=0, description="Base inner step size")
    beta: float = Field(Config.OUTER_LR, ge=0, description="Base outer step size")
    horizon: int = Field(200, ge=1, description="Horizon T")
    power: float = Field(Config.POLY_POWER, gt=0, description="Poly decay exponent")
    lipschitz: Optional[float] = Field(None, description="Smoothness constant L (theorem mode)")
    c1: float = Field(1.0, gt=0, description="Theorem constant for alpha")
    c2: float = Field(1.0, gt=0, description="Theorem constant for beta")


class MetaConfig(BaseModel):
    """Meta-training loop settings"""

    iterations: int = Field(200, ge=0, description="Meta-training iterations")
    mode: Literal["full", "mfl-only", "joint", "random-init"] = Field("full", description="Ablation mode")
    second_order_mil: bool = Field(False, description="Second-order Hessian correction for the head initialization")
    fd_epsilon: float = Field(Config.FD_EPSILON, gt=0, description="FD-HVP probe size")
    outer_optimizer: Literal["nesterov", "sgd"] = Field("nesterov", description="Optimizer wrapping aggregate updates")
    momentum: float = Field(Config.MOMENTUM, ge=0, lt=1)
    weight_decay: float = Field(Config.WEIGHT_DECAY, ge=0)
    batch_size: int = Field(Config.BATCH_SIZE, ge=1)
    augment: bool = Field(True, description="Random flips and intensity jitter")
    prefetch: bool = Field(True, description="Draw next batches on a background worker")
    log_every: int = Field(10, ge=1)
    checkpoint_every: int = Field(50, ge=1)
    validate_every: int = Field(50, ge=1)
    second_order_cap: int = Field(Config.SECOND_ORDER_PARAM_CAP, ge=1)
    divergence_threshold: float = Field(Config.DIVERGENCE_THRESHOLD, gt=0)


class DataConfig(BaseModel):
    data_dir: Optional[Path] = Field(None, description="Dataset directory (gen-data output)")
    extents: Tuple[int, int] = Field(Config.EXTENTS, description="Image extents")
    train_domains: List[str] = Field(default_factory=lambda: ["adult", "infant_inverted", "toddler"])
    held_out: str = Field("isointense", description="Held-out domain preset")
    samples_per_domain: int = Field(Config.SAMPLES_PER_DOMAIN, ge=1)
    support_size: int = Field(5, ge=1, description="Held-out support pool size")
    test_count: int = Field(Config.HELD_OUT_TEST, ge=2)

    @model_validator(mode="after")
    def _check_domains(self):
        if len(self.train_domains) < 3:
            raise ValueError("meta-training needs at least 3 domains")
        if self.held_out in self.train_domains:
            raise ValueError("held-out domain must not be a training domain")
        return self


class FinetuneConfig(BaseModel):
    shots: List[int] = Field(default_factory=lambda: [1, 5], description="Shot counts to evaluate")
    steps: int = Field(Config.FINETUNE_STEPS, ge=0)
    mask: str = Field(Config.FINETUNE_MASK, description="none | all | last-N | up-N")
    lr: float = Field(Config.FINETUNE_LR, gt=0)
    momentum: float = Field(Config.MOMENTUM, ge=0, lt=1)
    weight_decay: float = Field(Config.WEIGHT_DECAY, ge=0)

    @field_validator("shots")
    @classmethod
    def _non_negative(cls, shots):
        if any(s < 0 for s in shots):
            raise ValueError("shots must be non-negative")
        return shots


class LabConfig(BaseModel):
    """Convergence-lab experiment settings"""

    n_omega: int = Field(5, ge=1)
    n_theta: int = Field(3, ge=1)
    mu: float = Field(1.0, gt=0, description="Outer strong-convexity weight on theta")
    coupling: float = Field(0.5, ge=0, description="Scale of the coupling matrix B")
    eig_range: Tuple[float, float] = Field((1.0, 4.0), description="Spectrum of A")
    sigma: float = Field(1.0, ge=0, description="Gradient noise standard deviation")
    c1: float = Field(1.0, gt=0)
    c2: float = Field(1.0, gt=0)
    horizons: List[int] = Field(default_factory=lambda: list(Config.RATE_HORIZONS))
    repeats: int = Field(Config.RATE_REPEATS, ge=1)
    slope_threshold: float = Field(Config.RATE_SLOPE_THRESHOLD)
    traces: List[Literal["mfl", "mil"]] = Field(default_factory=lambda: ["mfl", "mil"])
    workers: int = Field(Config.WORKERS, ge=1)


class RunConfig(BaseModel):
    """Complete, validated configuration of one experiment run"""

    seed: int = Field(Config.SEED)
    out_dir: Path = Field(Path("runs/default"), description="Output directory")
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    meta: MetaConfig = Field(default_factory=MetaConfig)
    regularization: RegConfig = Field(default_factory=RegConfig)
    bank: BankConfig = Field(default_factory=BankConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    finetune: FinetuneConfig = Field(default_factory=FinetuneConfig)
    lab: LabConfig = Field(default_factory=LabConfig)

    @model_validator(mode="after")
    def _check_geometry(self):
        stride = self.network.stride
        if any(e % stride for e in self.data.extents):
            raise ValueError(f"extents {self.data.extents} not divisible by 2^depth = {stride}")
        if any(s > self.data.support_size for s in self.finetune.shots):
            raise ValueError("shots exceed the held-out support size")
        if "horizon" not in self.schedule.model_fields_set:
            self.schedule.horizon = max(self.meta.iterations, 1)
        return self

    # ----------------------------------------------------------- sectioned text I/O

    SECTIONS: ClassVar[Tuple[str, ...]] = ("network", "schedule", "meta", "regularization", "bank", "data", "finetune", "lab")

    @classmethod
    def from_ini(cls, path: Optional[Path] = None, overrides: Optional[dict] = None) -> "RunConfig":
        """Load a sectioned key/value file, apply dotted overrides, validate."""
        raw: dict = {}
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise ConfigValidationError(f"config file {path} does not exist")
            parser = configparser.ConfigParser()
            parser.read(path)
            for section in parser.sections():
                values = {k: _parse_value(v) for k, v in parser[section].items()}
                if section == "run":
                    raw.update(values)
                elif section in cls.SECTIONS:
                    raw[section] = values
                else:
                    raise ConfigValidationError(f"unknown config section [{section}]")
        for dotted, value in (overrides or {}).items():
            if value is None:
                continue
            target = raw
            *parents, leaf = dotted.split(".")
            for part in parents:
                target = target.setdefault(part, {})
            target[leaf] = value
        try:
            return cls.model_validate(raw)
        except ValueError as e:
            raise ConfigValidationError(str(e)) from e

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        dumped = self.model_dump(mode="json")
        parser["run"] = {"seed": str(dumped["seed"]), "out_dir": str(dumped["out_dir"])}
        for section in self.SECTIONS:
            parser[section] = {k: _format_value(v) for k, v in dumped[section].items() if v is not None}
        lines = []
        for section in parser.sections():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in parser[section].items())
            lines.append("")
        return "\n".join(lines)


def _parse_value(text: str):
    text = text.strip()
    if "," in text:
        return [_parse_value(part) for part in text.split(",") if part.strip()]
    lowered = text.lower()
    if lowered in ("true", "yes", "on"):
        return True
    if lowered in ("false", "no", "off"):
        return False
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def _format_value(value) -> str:
    if isinstance(value, (list, tuple)):
        return ", ".join(_format_value(v) for v in value) + ("," if len(value) == 1 else "")
    return str(value)
