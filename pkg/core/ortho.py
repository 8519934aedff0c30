"""Orthogonality treatments of the Pre-SVD layer.

Weight treatments reparametrize or regularize the layer (spectral
normalization, orthogonal loss, orthogonal weight); gradient treatments act
on the update (nearest orthogonal gradient, optimal learning rate). Every
function returns new arrays and leaves its inputs untouched.
"""

import logging
import math
from typing import Optional

import numpy as np
from numpy.typing import ArrayLike

from core.errors import DegenerateGradientError, DimensionError, DomainError
from core.linalg import as_matrix, complete_basis, exp_frechet_adjoint, mat_exp, svd
from models.data_classes import Matrix, OlrResult, OrthoPolicy, PolicyTrace, PolicyUpdate

logger = logging.getLogger(__name__)

OL_ZERO_TOL = 1e-12
COMPLETION_TOL = 1e-6


def orthogonality_residual(M: ArrayLike) -> float:
    """||M M^T - I||_F."""
    A = as_matrix(M, "M")
    return float(np.linalg.norm(A @ A.T - np.eye(A.shape[0])))


def spectral_normalize(W: ArrayLike) -> Matrix:
    """W / sigma_max(W).

    Raises:
        DomainError: W is the zero matrix.
    """
    M = as_matrix(W, "W")
    sigma = float(svd(M).S[0])
    if sigma == 0.0:
        raise DomainError("cannot spectrally normalize the zero matrix")
    return M / sigma


def spectral_normalize_backward(W: ArrayLike, dW_eff: ArrayLike) -> Matrix:
    """Gradient with respect to W given the gradient at W / sigma_max(W)."""
    M = as_matrix(W, "W")
    G = as_matrix(dW_eff, "dW_eff")
    if G.shape != M.shape:
        raise DimensionError(f"gradient shape {G.shape} does not match weight shape {M.shape}")
    factor = svd(M)
    sigma = float(factor.S[0])
    if sigma == 0.0:
        raise DomainError("cannot spectrally normalize the zero matrix")
    top = np.outer(factor.U[:, 0], factor.V[:, 0])
    return G / sigma - (float(np.sum(G * M)) / sigma ** 2) * top


def ortho_loss(W: ArrayLike) -> tuple[float, Matrix]:
    """Soft orthogonality penalty ||W W^T - I||_F and its gradient.

    The gradient is 2 (W W^T - I) W / ||W W^T - I||_F, and 0 on the
    orthogonal manifold where the norm is not differentiable.
    """
    M = as_matrix(W, "W", square=True)
    D = M @ M.T - np.eye(M.shape[0])
    loss = float(np.linalg.norm(D))
    if loss <= OL_ZERO_TOL:
        return loss, np.zeros_like(M)
    return loss, 2.0 * D @ M / loss


def ortho_weight(V: ArrayLike) -> Matrix:
    """Orthogonal effective weight exp(V - V^T)."""
    M = as_matrix(V, "V", square=True)
    return mat_exp(M - M.T)


def ortho_weight_backward(V: ArrayLike, dE: ArrayLike) -> Matrix:
    """Gradient with respect to V given the gradient at exp(V - V^T)."""
    M = as_matrix(V, "V", square=True)
    G = as_matrix(dE, "dE", square=True)
    if G.shape != M.shape:
        raise DimensionError(f"dE must have shape {M.shape}, got {G.shape}")
    D = exp_frechet_adjoint(M - M.T, G)
    return D - D.T


def _identity_completion(U_kept: Matrix, V_null: Matrix) -> Matrix:
    """Left vectors for the null right-singular directions.

    Each null direction v is mapped to the part of v orthogonal to the basis
    built so far, so R acts as the identity on the null complement wherever
    that is consistent with orthogonality.
    """
    basis = U_kept
    for v in V_null.T:
        w = v - basis @ (basis.T @ v)
        w = w - basis @ (basis.T @ w)
        norm = float(np.linalg.norm(w))
        if norm > COMPLETION_TOL:
            column = w / norm
        else:
            column = complete_basis(basis, basis.shape[1] + 1)[:, -1]
        basis = np.column_stack([basis, column])
    return basis


def nearest_orthogonal_gradient(G: ArrayLike) -> Matrix:
    """Closest matrix with orthonormal rows/columns to G: R = U V^T from svd(G).

    Singular values truncated to zero by svd leave part of the space
    undetermined; for square G those directions are completed so that R is
    orthogonal and acts as the identity on them where possible.

    Raises:
        DegenerateGradientError: G is zero.
    """
    M = as_matrix(G, "G")
    factor = svd(M)
    rank = int(np.count_nonzero(factor.S))
    if rank == 0:
        raise DegenerateGradientError("nearest orthogonal gradient of a zero gradient is undefined")
    U = factor.U
    if rank < factor.S.size and M.shape[0] == M.shape[1]:
        U = _identity_completion(U[:, :rank], factor.V[:, rank:])
    return U @ factor.V.T


def optimal_learning_rate(W: ArrayLike, G: ArrayLike, lr: float) -> OlrResult:
    """Step size making W - eta G closest to orthogonal, capped by lr.

    eta* = (w.w * l.w) / (w.w * l.l + 2 (l.w)^2) for the vectorizations w, l.
    eta* is used only when it is positive, finite and below lr.

    Raises:
        DegenerateGradientError: G is zero.
    """
    Wm = as_matrix(W, "W")
    Gm = as_matrix(G, "G")
    if Gm.shape != Wm.shape:
        raise DimensionError(f"gradient shape {Gm.shape} does not match weight shape {Wm.shape}")
    if lr <= 0 or not math.isfinite(lr):
        raise DomainError(f"lr must be a finite value > 0, got {lr}")
    if not np.any(Gm):
        raise DegenerateGradientError("optimal learning rate of a zero gradient is undefined")

    ww = float(np.sum(Wm * Wm))
    lw = float(np.sum(Gm * Wm))
    ll = float(np.sum(Gm * Gm))
    with np.errstate(divide="ignore", invalid="ignore"):
        eta_star = float(np.float64(ww * lw) / np.float64(ww * ll + 2.0 * lw * lw))
    if not math.isfinite(eta_star) or eta_star <= 0:
        return OlrResult(eta_star=eta_star, eta_used=lr, switched=True)
    if eta_star < lr:
        return OlrResult(eta_star=eta_star, eta_used=eta_star, switched=False)
    return OlrResult(eta_star=eta_star, eta_used=lr, switched=True)


def apply_policy_forward(policy: OrthoPolicy, param: ArrayLike) -> Matrix:
    """Effective Pre-SVD weight for the stored parameter."""
    if policy.use_sn:
        return spectral_normalize(param)
    if policy.use_ow:
        return ortho_weight(param)
    return as_matrix(param, "param")


def apply_policy_backward(policy: OrthoPolicy, param: ArrayLike, dW_eff: ArrayLike) -> Matrix:
    """Map a gradient at the effective weight back to the stored parameter."""
    if policy.use_sn:
        return spectral_normalize_backward(param, dW_eff)
    if policy.use_ow:
        return ortho_weight_backward(param, dW_eff)
    return as_matrix(dW_eff, "dW_eff")


def apply_policy_update(
    policy: OrthoPolicy,
    param: ArrayLike,
    G: ArrayLike,
    lr: float,
    momentum: float = 0.0,
    velocity: Optional[Matrix] = None,
    weight_decay: float = 0.0,
) -> PolicyUpdate:
    """One treated update of the Pre-SVD parameter.

    G is the gradient with respect to the effective weight. The order is:
    orthogonal loss gradient, nearest orthogonal gradient, optimal learning
    rate (on the effective weight), mapping back through the
    parametrization, weight decay (not under OW), momentum (not under OLR,
    nor under NOG combined with OW).
    A zero gradient skips the gradient treatments and is flagged in the trace.

    Args:
        policy: Treatments to apply.
        param: Stored parameter (V under OW, the raw weight otherwise).
        G: Loss gradient at the effective weight.
        lr: Scheduled learning rate, also the OLR fallback.
        momentum: Heavy-ball coefficient.
        velocity: Momentum buffer from the previous step.
        weight_decay: L2 coefficient on the stored parameter.

    Returns:
        The new parameter, the new momentum buffer and the step trace.
    """
    P = as_matrix(param, "param", square=True)
    grad = as_matrix(G, "G", square=True)
    if grad.shape != P.shape:
        raise DimensionError(f"gradient shape {grad.shape} does not match parameter shape {P.shape}")
    W_eff = apply_policy_forward(policy, P)
    skipped: list[str] = []

    if policy.use_ol:
        _, ol_grad = ortho_loss(W_eff)
        grad = grad + policy.ol_weight * ol_grad

    if policy.use_nog:
        try:
            grad = nearest_orthogonal_gradient(grad)
        except DegenerateGradientError:
            logger.debug("Zero Pre-SVD gradient, skipping nearest orthogonal gradient")
            skipped.append("nog")

    eta = lr
    olr: Optional[OlrResult] = None
    if policy.use_olr:
        try:
            olr = optimal_learning_rate(W_eff, grad, lr)
            eta = olr.eta_used
        except DegenerateGradientError:
            logger.debug("Zero Pre-SVD gradient, skipping optimal learning rate")
            skipped.append("olr")

    step = apply_policy_backward(policy, P, grad)
    if weight_decay and not policy.use_ow:
        step = step + weight_decay * P

    new_velocity = velocity
    if momentum and not policy.use_olr and not (policy.use_nog and policy.use_ow):
        new_velocity = step if velocity is None else momentum * velocity + step
        step = new_velocity

    trace = PolicyTrace(
        eta_used=eta,
        olr=olr,
        grad_ortho_residual=orthogonality_residual(grad),
        weight_ortho_residual=orthogonality_residual(W_eff),
        skipped=tuple(skipped),
    )
    return PolicyUpdate(new_param=P - eta * step, velocity=new_velocity, trace=trace)
