"""SVD meta-layer: covariance pooling, spectral square root / inverse square
root, and the analytic backward pass down to the input features.

Two forward solvers are supported. The eigendecomposition path differentiates
through the spectral factorization with the reciprocal-eigengap K matrix; the
Newton-Schulz path differentiates the unrolled coupled iteration exactly.
"""

import math
from typing import Optional

import numpy as np
from numpy.typing import ArrayLike, NDArray

from core.errors import DimensionError, DomainError, SingularGradientError
from core.linalg import as_matrix, newton_schulz_iterates, spectral_function, sym_eig
from models.data_classes import KMatrix, Matrix, MetaLayerCache, MetaMode, Solver

EPS_RELATIVE = 1e-5
EPS_ABSOLUTE_FLOOR = 1e-12
REG_RELATIVE = 1e-12
EXPANSION_TOL = 1e-10


def centering_matrix(n: int) -> Matrix:
    """J = (1/N)(I - (1/N) 1 1^T)."""
    return (np.eye(n) - np.full((n, n), 1.0 / n)) / n


def covariance(X: ArrayLike) -> tuple[Matrix, Matrix]:
    """Sample covariance P = X J X^T of the columns of X (d x N).

    Raises:
        DomainError: fewer than two columns.
    """
    M = as_matrix(X, "X")
    n = M.shape[1]
    if n < 2:
        raise DomainError(f"covariance needs at least 2 samples, got {n}")
    J = centering_matrix(n)
    P = M @ J @ M.T
    return 0.5 * (P + P.T), J


def default_eps(P: Matrix) -> float:
    """Relative eigenvalue floor 1e-5 * trace(P) / d, never below 1e-12."""
    return max(EPS_RELATIVE * float(np.trace(P)) / P.shape[0], EPS_ABSOLUTE_FLOOR)


def default_reg(lambdas: NDArray[np.float64]) -> float:
    return max(REG_RELATIVE * float(lambdas[0]) ** 2, float(np.finfo(np.float64).tiny))


def _transform(lambdas: NDArray[np.float64], eps: float, mode: MetaMode) -> NDArray[np.float64]:
    if mode is MetaMode.SQRT:
        return np.sqrt(np.maximum(lambdas, 0.0))
    shifted = lambdas + eps
    if np.any(shifted <= 0):
        raise DomainError(
            f"inverse square root needs lambda_min + eps > 0, got {shifted[-1]:.3e}; raise eps"
        )
    return shifted ** -0.5


def _ns_shift(mode: MetaMode, eps: float) -> float:
    return 0.0 if mode is MetaMode.SQRT else eps


def meta_forward(
    X: ArrayLike,
    mode: MetaMode,
    eps: Optional[float] = None,
    solver: Solver = Solver.SVD,
    ns_iters: int = 20,
) -> tuple[Matrix, MetaLayerCache]:
    """Forward pass of the meta-layer.

    Args:
        X: Features, d x N with N >= 2.
        mode: SQRT returns U Lambda^{1/2} U^T, INV_SQRT returns
            U (Lambda + eps)^{-1/2} U^T.
        eps: Eigenvalue floor. None selects the relative floor of default_eps.
            It is a constant for differentiation purposes. SQRT leaves the
            output unfloored and uses eps only for Lambda^{-1/2} in the
            backward pass.
        solver: Eigendecomposition or coupled Newton-Schulz, on P for SQRT
            and on P + eps I for INV_SQRT.
        ns_iters: Iteration count for the Newton-Schulz solver.

    Returns:
        The d x d output and the cache the backward pass consumes.
    """
    M = as_matrix(X, "X")
    P, J = covariance(M)
    floor = default_eps(P) if eps is None else float(eps)
    if floor < 0 or not math.isfinite(floor):
        raise DomainError(f"eps must be a finite value >= 0, got {floor}")

    if solver is Solver.NEWTON_SCHULZ:
        run = newton_schulz_iterates(P + _ns_shift(mode, floor) * np.eye(P.shape[0]), ns_iters)
        Y = run.sqrt if mode is MetaMode.SQRT else run.inv_sqrt
        cache = MetaLayerCache(
            X=M, J=J, P=P, factor=None, mode=mode, eps=floor,
            solver=solver, ns_iterates=run.iterates, ns_norm=run.norm,
        )
        return Y, cache

    factor = sym_eig(P)
    Y = spectral_function(factor, _transform(factor.lambdas, floor, mode))
    return Y, MetaLayerCache(X=M, J=J, P=P, factor=factor, mode=mode, eps=floor)


def build_k(lambdas: ArrayLike, reg: float) -> KMatrix:
    """K_ij = (l_i - l_j) / ((l_i - l_j)^2 + reg) off the diagonal, 0 on it.

    Raises:
        DomainError: reg < 0.
        SingularGradientError: reg == 0 with an exactly repeated eigenvalue.
    """
    lam = np.asarray(lambdas, dtype=np.float64)
    if reg < 0:
        raise DomainError(f"reg must be >= 0, got {reg}")
    diff = lam[:, None] - lam[None, :]
    off = ~np.eye(lam.size, dtype=bool)
    denom = diff ** 2 + reg
    if reg == 0 and np.any(denom[off] == 0):
        raise SingularGradientError("repeated eigenvalue with reg=0; the eigenvector gradient is undefined")
    K = np.zeros_like(diff)
    K[off] = diff[off] / denom[off]
    return KMatrix(entries=K)


def _svd_backward_p(cache: MetaLayerCache, dY: Matrix, reg: Optional[float]) -> Matrix:
    factor = cache.factor
    assert factor is not None
    U, lam = factor.U, factor.lambdas
    shifted = lam + cache.eps
    positive = shifted > 0
    safe = np.where(positive, shifted, 1.0)

    # d(output)/d(lambda) per mode, zero where the floored eigenvalue is not positive
    if cache.mode is MetaMode.SQRT:
        f = np.sqrt(np.maximum(lam, 0.0))
        df = np.where(positive, 0.5 * safe ** -0.5, 0.0)
    else:
        f = safe ** -0.5
        df = -0.5 * safe ** -1.5

    dU = (dY + dY.T) @ U * f
    dlam = df * np.diag(U.T @ dY @ U)
    K = build_k(lam, default_reg(lam) if reg is None else reg).entries
    inner = K.T * (U.T @ dU) + np.diag(dlam)
    return U @ inner @ U.T


def _newton_schulz_backward_p(cache: MetaLayerCache, dY: Matrix) -> Matrix:
    iterates = cache.ns_iterates
    norm = cache.ns_norm
    d = cache.P.shape[0]
    eye = np.eye(d)
    root = math.sqrt(norm)
    Y_last, Z_last = iterates[-1]

    if cache.mode is MetaMode.SQRT:
        bar_y = root * dY
        bar_z = np.zeros((d, d))
        bar_norm = float(np.sum(dY * Y_last)) / (2.0 * root)
    else:
        bar_y = np.zeros((d, d))
        bar_z = dY / root
        bar_norm = -0.5 * norm ** -1.5 * float(np.sum(dY * Z_last))

    for Y, Z in reversed(iterates[:-1]):
        T = 0.5 * (3.0 * eye - Z @ Y)
        bar_t = Y.T @ bar_y + bar_z @ Z.T
        next_bar_y = bar_y @ T.T
        next_bar_z = T.T @ bar_z
        bar_m = -0.5 * bar_t
        bar_y = next_bar_y + Z.T @ bar_m
        bar_z = next_bar_z + bar_m @ Y.T

    # A = B / ||B||_F with B = P (SQRT) or P + eps I (INV_SQRT)
    B = cache.P + _ns_shift(cache.mode, cache.eps) * eye
    bar_a = bar_y
    return bar_a / norm + (bar_norm - float(np.sum(bar_a * B)) / norm ** 2) * B / norm


def meta_backward_p(cache: MetaLayerCache, dY: ArrayLike, reg: Optional[float] = None) -> Matrix:
    """Gradient of the loss with respect to the covariance P (unsymmetrized).

    Only the symmetric part is meaningful; meta_backward symmetrizes it on
    the way to the features.
    """
    d = cache.P.shape[0]
    G = as_matrix(dY, "dY")
    if G.shape != (d, d):
        raise DimensionError(f"dY must have shape {(d, d)}, got {G.shape}")
    if cache.solver is Solver.NEWTON_SCHULZ:
        return _newton_schulz_backward_p(cache, G)
    return _svd_backward_p(cache, G, reg)


def meta_backward(cache: MetaLayerCache, dY: ArrayLike, reg: Optional[float] = None) -> Matrix:
    """Gradient of the loss with respect to the input features X (d x N).

    Args:
        cache: Cache returned by meta_forward.
        dY: Gradient with respect to the full d x d output.
        reg: Tikhonov regularizer of the K matrix. None selects
            1e-12 * lambda_max^2. Ignored by the Newton-Schulz solver.

    Raises:
        SingularGradientError: reg=0 with repeated eigenvalues.
    """
    dP = meta_backward_p(cache, dY, reg)
    return (dP + dP.T) @ cache.X @ cache.J


def two_step_covariance(W: ArrayLike, G: ArrayLike, eta: float, Y: ArrayLike) -> Matrix:
    """Covariance (W - eta G) Y Y^T (W - eta G)^T after one gradient step.

    The direct product is checked against the four-term expansion
    WYY^TW^T - eta GYY^TW^T - eta WYY^TG^T + eta^2 GYY^TG^T.

    Raises:
        DimensionError: non-conforming shapes.
        ArithmeticError: the two forms disagree beyond round-off.
    """
    Wm = as_matrix(W, "W", square=True)
    Gm = as_matrix(G, "G", square=True)
    Ym = as_matrix(Y, "Y")
    if Gm.shape != Wm.shape or Ym.shape[0] != Wm.shape[1]:
        raise DimensionError(f"shapes do not conform: W {Wm.shape}, G {Gm.shape}, Y {Ym.shape}")

    updated = Wm - eta * Gm
    gram = Ym @ Ym.T
    direct = updated @ gram @ updated.T
    terms = (
        Wm @ gram @ Wm.T,
        -eta * Gm @ gram @ Wm.T,
        -eta * Wm @ gram @ Gm.T,
        eta ** 2 * Gm @ gram @ Gm.T,
    )
    expanded = sum(terms, np.zeros_like(direct))
    scale = max(sum(float(np.linalg.norm(t)) for t in terms), 1e-300)
    if np.linalg.norm(direct - expanded) > EXPANSION_TOL * scale:
        raise ArithmeticError("two-step covariance does not match its four-term expansion")
    return direct
