"""Finite-difference checks of every analytic backward pass.

Checks register themselves with @register and are run over a grid of
dimensions and seeds by run_checks. Each check returns the relative error
between its analytic gradient and central differences.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np
from numpy.typing import NDArray

from core.errors import ConfigError
from core.linalg import mat_inv_sqrt, svd
from core.metalayer import covariance, meta_backward, meta_forward
from core.network import Network, softmax_cross_entropy
from core.ortho import (
    ortho_loss,
    ortho_weight,
    ortho_weight_backward,
    spectral_normalize,
    spectral_normalize_backward,
)
from models.data_classes import DatasetSpec, GradCheckResult, Matrix, MetaMode, Solver, TrainConfig

logger = logging.getLogger(__name__)

FD_STEP = 1e-5
MAX_DIM = 16
NS_CHECK_ITERS = 10

CheckFn = Callable[[int, np.random.Generator], float]


@dataclass(frozen=True)
class RegisteredCheck:
    name: str
    fn: CheckFn
    tol_scale: float = 1.0


CHECKS: dict[str, RegisteredCheck] = {}


def register(name: str, tol_scale: float = 1.0) -> Callable[[CheckFn], CheckFn]:
    """Add a check to the registry; tol_scale loosens it for longer chains."""
    def decorator(fn: CheckFn) -> CheckFn:
        if name in CHECKS:
            raise ValueError(f"gradient check {name!r} registered twice")
        CHECKS[name] = RegisteredCheck(name=name, fn=fn, tol_scale=tol_scale)
        return fn
    return decorator


def numerical_gradient(f: Callable[[NDArray[np.float64]], float], x: NDArray[np.float64],
                       step: float = FD_STEP) -> NDArray[np.float64]:
    """Central differences of a scalar function, one entry at a time."""
    point = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(point)
    for i in range(point.size):
        original = point.flat[i]
        point.flat[i] = original + step
        plus = f(point)
        point.flat[i] = original - step
        minus = f(point)
        point.flat[i] = original
        grad.flat[i] = (plus - minus) / (2.0 * step)
    return grad


def relative_error(analytic: NDArray[np.float64], numeric: NDArray[np.float64]) -> float:
    """||a - n|| / max(||n||, ||a||, 1e-12)."""
    scale = max(float(np.linalg.norm(numeric)), float(np.linalg.norm(analytic)), 1e-12)
    return float(np.linalg.norm(analytic - numeric)) / scale


def random_orthogonal(rng: np.random.Generator, d: int) -> Matrix:
    return svd(rng.standard_normal((d, d))).U


def separated_eigenvalues(rng: np.random.Generator, d: int) -> NDArray[np.float64]:
    """Descending eigenvalues around 1 with every gap at least 0.15."""
    return 1.0 + 0.2 * np.arange(d - 1, -1, -1) + rng.uniform(0.0, 0.05, size=d)


def features_with_spectrum(rng: np.random.Generator, lambdas: NDArray[np.float64], n: int) -> Matrix:
    """Features X (d x n) whose covariance is exactly U diag(lambdas) U^T."""
    d = lambdas.size
    raw = rng.standard_normal((d, n))
    P0, _ = covariance(raw)
    whitened = mat_inv_sqrt(P0) @ (raw - raw.mean(axis=1, keepdims=True))
    return random_orthogonal(rng, d) @ (np.sqrt(lambdas)[:, None] * whitened)


def _meta_check(dim: int, rng: np.random.Generator, mode: MetaMode, eps: float, solver: Solver) -> float:
    X = features_with_spectrum(rng, separated_eigenvalues(rng, dim), max(2 * dim, 8))
    G = rng.standard_normal((dim, dim))

    def loss(features: NDArray[np.float64]) -> float:
        Y, _ = meta_forward(features, mode, eps, solver, NS_CHECK_ITERS)
        return float(np.sum(G * Y))

    _, cache = meta_forward(X, mode, eps, solver, NS_CHECK_ITERS)
    return relative_error(meta_backward(cache, G), numerical_gradient(loss, X))


@register("meta_sqrt")
def check_meta_sqrt(dim: int, rng: np.random.Generator) -> float:
    return _meta_check(dim, rng, MetaMode.SQRT, 0.0, Solver.SVD)


@register("meta_inv_sqrt")
def check_meta_inv_sqrt(dim: int, rng: np.random.Generator) -> float:
    return _meta_check(dim, rng, MetaMode.INV_SQRT, 1e-6, Solver.SVD)


@register("newton_schulz_sqrt")
def check_newton_schulz_sqrt(dim: int, rng: np.random.Generator) -> float:
    return _meta_check(dim, rng, MetaMode.SQRT, 1e-6, Solver.NEWTON_SCHULZ)


@register("newton_schulz_inv_sqrt")
def check_newton_schulz_inv_sqrt(dim: int, rng: np.random.Generator) -> float:
    return _meta_check(dim, rng, MetaMode.INV_SQRT, 1e-6, Solver.NEWTON_SCHULZ)


@register("ortho_loss")
def check_ortho_loss(dim: int, rng: np.random.Generator) -> float:
    W = np.eye(dim) + rng.standard_normal((dim, dim)) / math.sqrt(dim)
    _, grad = ortho_loss(W)
    return relative_error(grad, numerical_gradient(lambda w: ortho_loss(w)[0], W))


@register("ortho_weight")
def check_ortho_weight(dim: int, rng: np.random.Generator) -> float:
    V = rng.standard_normal((dim, dim)) / math.sqrt(dim)
    G = rng.standard_normal((dim, dim))
    numeric = numerical_gradient(lambda v: float(np.sum(G * ortho_weight(v))), V)
    return relative_error(ortho_weight_backward(V, G), numeric)


@register("spectral_norm")
def check_spectral_norm(dim: int, rng: np.random.Generator) -> float:
    # distinct top singular value keeps sigma_max differentiable
    singular = np.concatenate([[2.0], rng.uniform(0.1, 1.0, size=dim - 1)])
    W = random_orthogonal(rng, dim) @ np.diag(singular) @ random_orthogonal(rng, dim).T
    G = rng.standard_normal((dim, dim))
    numeric = numerical_gradient(lambda w: float(np.sum(G * spectral_normalize(w))), W)
    return relative_error(spectral_normalize_backward(W, G), numeric)


@register("pre_svd_end_to_end", tol_scale=10.0)
def check_pre_svd_end_to_end(dim: int, rng: np.random.Generator) -> float:
    classes = 3
    cfg = TrainConfig(d=dim, eps=1e-4, dataset=DatasetSpec(classes=classes, input_dim=dim))
    net = Network(cfg, rng)
    x = rng.standard_normal((max(8, 2 * dim), dim))
    y = rng.integers(0, classes, size=x.shape[0])

    def loss(param: NDArray[np.float64]) -> float:
        net.pre_param = param
        logits, _ = net.forward(x, training=True)
        return softmax_cross_entropy(logits, y)[0]

    base = net.pre_param.copy()
    numeric = numerical_gradient(loss, base)
    net.pre_param = base
    logits, cache = net.forward(x, training=True)
    _, dlogits, _ = softmax_cross_entropy(logits, y)
    return relative_error(net.backward(cache, dlogits).pre_weight, numeric)


def run_checks(
    dims: Iterable[int] = (2, 4, 8),
    seeds: int = 3,
    tol: float = 1e-4,
    names: Optional[Iterable[str]] = None,
) -> list[GradCheckResult]:
    """Run registered checks over every (dimension, seed) pair.

    Raises:
        ConfigError: unknown check names, a dimension outside [2, 16] or seeds < 1.
    """
    dims = tuple(dims)
    bad = [d for d in dims if not 2 <= d <= MAX_DIM]
    if bad or not dims:
        raise ConfigError(f"gradient check dimensions must lie in [2, {MAX_DIM}], got {list(dims)}")
    if seeds < 1:
        raise ConfigError(f"seeds must be >= 1, got {seeds}")
    selected = list(CHECKS) if names is None else list(names)
    unknown = [name for name in selected if name not in CHECKS]
    if unknown:
        raise ConfigError(f"unknown gradient checks: {unknown}")

    results = []
    for name in selected:
        check = CHECKS[name]
        for dim in dims:
            for seed in range(seeds):
                error = check.fn(dim, np.random.default_rng([seed, dim]))
                passed = math.isfinite(error) and error <= tol * check.tol_scale
                results.append(GradCheckResult(name=name, dim=dim, seed=seed, max_rel_error=error, passed=passed))
                logger.debug("gradcheck %s d=%d seed=%d rel_error=%.3e", name, dim, seed, error)
    return results
