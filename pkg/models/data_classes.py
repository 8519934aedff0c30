import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
from numpy.typing import NDArray

from core.errors import ConfigError

Matrix = NDArray[np.float64]

TREATMENTS = ("sn", "ol", "ow", "nog", "olr")


class MetaMode(str, Enum):
    """Spectral transform computed by the meta-layer"""
    SQRT = "sqrt"
    INV_SQRT = "inv_sqrt"


class Solver(str, Enum):
    """Backend used by the meta-layer forward pass"""
    SVD = "svd"
    NEWTON_SCHULZ = "newton_schulz"


class Variant(str, Enum):
    """Network family the meta-layer is embedded in"""
    DECORR_BN = "decorr_bn"
    GCP = "gcp"


@dataclass(frozen=True)
class SpectralFactorization:
    """Eigenvectors (columns of U) and non-increasing eigenvalues of a symmetric matrix"""
    U: Matrix
    lambdas: NDArray[np.float64]


@dataclass(frozen=True)
class SvdFactorization:
    """Thin SVD: A = U diag(S) V^T with S non-increasing"""
    U: Matrix
    S: NDArray[np.float64]
    V: Matrix


@dataclass(frozen=True)
class NewtonSchulzRun:
    """Coupled Newton-Schulz iterates on P/norm; iterates[k] = (Y_k, Z_k), k = 0..iters"""
    norm: float
    iterates: tuple[tuple[Matrix, Matrix], ...]
    residuals: tuple[float, ...]

    @property
    def sqrt(self) -> Matrix:
        return np.sqrt(self.norm) * self.iterates[-1][0]

    @property
    def inv_sqrt(self) -> Matrix:
        return self.iterates[-1][1] / np.sqrt(self.norm)


@dataclass(frozen=True)
class KMatrix:
    """Off-diagonal reciprocal eigengaps, zero diagonal"""
    entries: Matrix


@dataclass(frozen=True)
class MetaLayerCache:
    """Forward-pass tensors the meta-layer backward needs"""
    X: Matrix
    J: Matrix
    P: Matrix
    factor: Optional[SpectralFactorization]
    mode: MetaMode
    eps: float
    solver: Solver = Solver.SVD
    # Newton-Schulz only: (Y_k, Z_k) for k = 0..iters and the Frobenius norm of P + eps*I
    ns_iterates: tuple[tuple[Matrix, Matrix], ...] = ()
    ns_norm: float = 0.0


@dataclass(frozen=True)
class OrthoPolicy:
    """Treatments applied to the Pre-SVD layer"""
    use_sn: bool = False
    use_ol: bool = False
    ol_weight: float = 0.01
    use_ow: bool = False
    use_nog: bool = False
    use_olr: bool = False
    fallback_lr: Optional[float] = None

    def __post_init__(self) -> None:
        if self.use_sn and self.use_ow:
            raise ConfigError("sn and ow both reparametrize the weight and cannot be combined")
        if self.use_olr and (self.fallback_lr is None or self.fallback_lr <= 0):
            raise ConfigError("olr requires a fallback learning rate > 0")
        if self.ol_weight < 0:
            raise ConfigError(f"ol_weight must be >= 0, got {self.ol_weight}")

    @classmethod
    def from_label(cls, label: str, ol_weight: float = 0.01,
                   fallback_lr: Optional[float] = None) -> "OrthoPolicy":
        """Build a policy from a label such as "none" or "nog+ow+olr"."""
        names = [part.strip().lower() for part in label.split("+") if part.strip()]
        if names == ["none"]:
            names = []
        unknown = [name for name in names if name not in TREATMENTS]
        if unknown or not label.strip():
            raise ConfigError(f"unknown treatment(s) in policy {label!r}: {unknown or label!r}")
        chosen = set(names)
        return cls(
            use_sn="sn" in chosen,
            use_ol="ol" in chosen,
            ol_weight=ol_weight,
            use_ow="ow" in chosen,
            use_nog="nog" in chosen,
            use_olr="olr" in chosen,
            fallback_lr=fallback_lr,
        )

    @property
    def label(self) -> str:
        flags = {
            "sn": self.use_sn,
            "ol": self.use_ol,
            "ow": self.use_ow,
            "nog": self.use_nog,
            "olr": self.use_olr,
        }
        active = [name for name in TREATMENTS if flags[name]]
        return "+".join(active) if active else "none"


@dataclass(frozen=True)
class OlrResult:
    """Optimal learning rate and the rate actually used after the switch rule"""
    eta_star: float
    eta_used: float
    switched: bool


@dataclass(frozen=True)
class PolicyTrace:
    """What apply_policy_update did to one Pre-SVD step"""
    eta_used: float
    olr: Optional[OlrResult]
    grad_ortho_residual: float
    weight_ortho_residual: float
    skipped: tuple[str, ...] = ()


@dataclass(frozen=True)
class PolicyUpdate:
    """New Pre-SVD parameter, its momentum buffer and the step trace"""
    new_param: Matrix
    velocity: Optional[Matrix]
    trace: PolicyTrace


@dataclass(frozen=True)
class DatasetSpec:
    """Gaussian-mixture classification problem"""
    classes: int = 3
    input_dim: int = 16
    samples_per_class: int = 200
    spread: float = 0.5
    points_per_sample: int = 1
    anisotropy: float = 1.0
    val_fraction: float = 0.2


@dataclass(frozen=True)
class Dataset:
    """Train/validation split; x is (n, d_in) or (n, d_in, points_per_sample)"""
    train_x: NDArray[np.float64]
    train_y: NDArray[np.int64]
    val_x: NDArray[np.float64]
    val_y: NDArray[np.int64]


@dataclass(frozen=True)
class TrainConfig:
    """One training run"""
    variant: Variant = Variant.DECORR_BN
    d: int = 16
    batch_size: int = 64
    epochs: int = 20
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    policy: OrthoPolicy = field(default_factory=OrthoPolicy)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    solver: Solver = Solver.SVD
    ns_iters: int = 20
    eps: Optional[float] = None
    reg: Optional[float] = None
    lr_milestones: tuple[int, ...] = ()
    lr_decay: float = 0.1
    bn_momentum: float = 0.1
    trace_interval: int = 10
    final_epochs: int = 5

    @property
    def classes(self) -> int:
        return self.dataset.classes


@dataclass
class TraceRecord:
    """Per-step conditioning record"""
    step: int
    epoch: int
    loss: float
    val_error: float
    log10_kappa: float
    eta_used: float
    grad_ortho_residual: float
    weight_ortho_residual: float
    svd_failures: int
    accuracy: float = math.nan
    skipped: bool = False


@dataclass(frozen=True)
class RunSummary:
    """Scalar outcome of one run"""
    seed: int
    policy: str
    final_val_error: float
    min_val_error: float
    mean_final_val_error: float
    mean_log10_kappa: float
    svd_failures: int
    steps: int


@dataclass(frozen=True)
class StepResult:
    """Outcome of one training step, before it is placed on the trace"""
    loss: float
    accuracy: float
    log10_kappa: float
    policy: Optional[PolicyTrace]
    failed: bool = False


@dataclass
class ConditioningTrace:
    """Logged step records of one run plus validation error (percent) after each epoch.

    val_errors[0] is the error before the first update; svd_failures counts
    every failed step, logged or not.
    """
    records: list[TraceRecord] = field(default_factory=list)
    val_errors: list[float] = field(default_factory=list)
    svd_failures: int = 0
    steps: int = 0
    interrupted: bool = False
    summary: Optional[RunSummary] = None


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated contents of an experiment config file"""
    schema_version: int
    train: TrainConfig
    policies: tuple[OrthoPolicy, ...]
    seeds: tuple[int, ...]
    output_dir: str
    log_level: str = "INFO"
    log_file: Optional[str] = None


@dataclass(frozen=True)
class ResourceSnapshot:
    """Process and host usage at one instant"""
    timestamp: str
    cpu_percent: float
    memory_percent: float
    rss_bytes: int
    load_average: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class GradCheckResult:
    """Outcome of one finite-difference comparison"""
    name: str
    dim: int
    seed: int
    max_rel_error: float
    passed: bool


@dataclass(frozen=True)
class ReportRow:
    """One group (policy) of traces in a report"""
    group: str
    runs: int
    mean_val_error: float
    std_val_error: float
    min_val_error: float
    mean_log10_kappa: float
    svd_failures: int


@dataclass(frozen=True)
class WhiteningCache:
    """Decorrelated BN forward state: batch mean, centered input and whitening matrix"""
    meta: MetaLayerCache
    mean: NDArray[np.float64]
    centered: Matrix
    whitening: Matrix


@dataclass(frozen=True)
class ForwardCache:
    """Activations of one network forward pass (columns are samples)"""
    inputs: NDArray[np.float64]
    hidden: NDArray[np.float64]
    pre_weight: Matrix
    features: Matrix
    log10_kappa: float
    whitening: Optional[WhiteningCache] = None
    pooled: tuple[MetaLayerCache, ...] = ()


@dataclass(frozen=True)
class Gradients:
    """Loss gradients; pre_weight is taken at the effective Pre-SVD weight"""
    input_weight: Matrix
    input_bias: NDArray[np.float64]
    pre_weight: Matrix
    pre_bias: NDArray[np.float64]
    head_weight: Matrix
    head_bias: NDArray[np.float64]
