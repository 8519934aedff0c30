"""Dense real matrix kernels.

Everything here is a pure function of numpy float64 arrays. The symmetric
eigensolver is a cyclic Jacobi method; the SVD, matrix square roots and the
condition number are built on top of it so one solver governs round-off.
"""

import math

import numpy as np
from numpy.typing import ArrayLike, NDArray

from core.errors import DimensionError, DomainError, SolverError
from models.data_classes import Matrix, NewtonSchulzRun, SpectralFactorization, SvdFactorization

JACOBI_MAX_SWEEPS = 100
JACOBI_TOL = 1e-12
SYMMETRY_TOL = 1e-8
PSD_CLAMP_TOL = 1e-10
RANK_TOL = 1e-12
KAPPA_FLOOR = 1e-300
TAYLOR_DEGREE = 18
NS_RESIDUAL_FLOOR = 1e-10


def as_matrix(A: ArrayLike, name: str = "A", square: bool = False) -> Matrix:
    """Validate and convert an operand to a finite 2-D float64 array.

    Raises:
        DimensionError: if the operand is not 2-D, or not square when required.
        DomainError: if any entry is NaN or infinite.
    """
    M = np.asarray(A, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] == 0 or M.shape[1] == 0:
        raise DimensionError(f"{name} must be a non-empty 2-D matrix, got shape {M.shape}")
    if square and M.shape[0] != M.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise DomainError(f"{name} contains non-finite entries")
    return M


def _symmetrize(A: Matrix, name: str) -> Matrix:
    norm = np.linalg.norm(A)
    if np.linalg.norm(A - A.T) > SYMMETRY_TOL * norm:
        raise DomainError(f"{name} is not symmetric")
    return 0.5 * (A + A.T)


def _off_diagonal_norm(A: Matrix) -> float:
    return float(np.linalg.norm(A - np.diag(np.diag(A))))


def _rotate(A: Matrix, V: Matrix, p: int, q: int) -> None:
    """Annihilate A[p, q] in place with one symmetric Schur rotation."""
    apq = A[p, q]
    if apq == 0.0:
        return
    tau = (A[q, q] - A[p, p]) / (2.0 * apq)
    t = (1.0 if tau >= 0 else -1.0) / (abs(tau) + math.sqrt(1.0 + tau * tau))
    c = 1.0 / math.sqrt(1.0 + t * t)
    s = t * c

    col_p = A[:, p].copy()
    col_q = A[:, q]
    A[:, p] = c * col_p - s * col_q
    A[:, q] = s * col_p + c * col_q

    row_p = A[p, :].copy()
    row_q = A[q, :]
    A[p, :] = c * row_p - s * row_q
    A[q, :] = s * row_p + c * row_q
    A[p, q] = A[q, p] = 0.0

    vec_p = V[:, p].copy()
    vec_q = V[:, q]
    V[:, p] = c * vec_p - s * vec_q
    V[:, q] = s * vec_p + c * vec_q


def _fix_column_signs(U: Matrix) -> Matrix:
    """Flip columns so that each column's largest-magnitude entry is positive."""
    pivots = np.argmax(np.abs(U), axis=0)
    signs = np.where(U[pivots, np.arange(U.shape[1])] < 0, -1.0, 1.0)
    return U * signs


def sym_eig(A: ArrayLike) -> SpectralFactorization:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Eigenvalues come back non-increasing (stable order on ties), eigenvectors
    with the largest-magnitude entry of each column positive. Negative
    eigenvalues within round-off of zero are clamped to zero.

    Raises:
        DimensionError: non-square input.
        DomainError: asymmetric or non-finite input.
        SolverError: off-diagonal mass above tolerance after the sweep budget.
    """
    M = _symmetrize(as_matrix(A, square=True), "A")
    d = M.shape[0]
    work = M.copy()
    V = np.eye(d)
    tol = JACOBI_TOL * np.linalg.norm(M)

    off = _off_diagonal_norm(work)
    sweeps = 0
    while off > tol:
        if sweeps >= JACOBI_MAX_SWEEPS:
            raise SolverError("Jacobi eigensolver did not converge", off / max(np.linalg.norm(M), 1e-300), sweeps)
        for p in range(d - 1):
            for q in range(p + 1, d):
                _rotate(work, V, p, q)
        sweeps += 1
        off = _off_diagonal_norm(work)

    lambdas = np.diag(work).copy()
    order = np.argsort(-lambdas, kind="stable")
    lambdas = lambdas[order]
    U = _fix_column_signs(V[:, order])

    lam_max = max(lambdas[0], 0.0)
    clamp = (lambdas < 0) & (lambdas >= -PSD_CLAMP_TOL * lam_max)
    lambdas[clamp] = 0.0
    return SpectralFactorization(U=U, lambdas=lambdas)


def _orthonormalize(columns: Matrix) -> Matrix:
    """Modified Gram-Schmidt, twice, over the given columns (assumed independent)."""
    Q = columns.copy()
    for _ in range(2):
        for j in range(Q.shape[1]):
            for i in range(j):
                Q[:, j] -= (Q[:, i] @ Q[:, j]) * Q[:, i]
            Q[:, j] /= np.linalg.norm(Q[:, j])
    return Q


def complete_basis(Q: Matrix, total: int) -> Matrix:
    """Extend orthonormal columns Q (m x r) to `total` orthonormal columns.

    Candidates are projected off the current basis and the one with the
    largest remaining norm is added, so the result does not depend on the
    coordinate order of near-ties.
    """
    m = Q.shape[0]
    basis = Q.copy()
    while basis.shape[1] < total:
        residual = np.eye(m) - basis @ basis.T
        residual = residual - basis @ (basis.T @ residual)
        norms = np.linalg.norm(residual, axis=0)
        j = int(np.argmax(norms))
        v = residual[:, j] / norms[j]
        basis = np.column_stack([basis, v])
    return basis


def svd(A: ArrayLike) -> SvdFactorization:
    """Thin singular value decomposition A = U diag(S) V^T, r = min(m, n).

    Built from sym_eig of the Jordan-Wielandt matrix [[0, A], [A^T, 0]],
    whose eigenpairs for +S[i] are (U[:, i]; V[:, i]) / sqrt(2). Working on
    A itself rather than A^T A keeps the error proportional to kappa(A).
    Singular values below 1e-12 * S_max are set to zero; their U and V
    columns are completed to orthonormal sets.
    """
    M = as_matrix(A)
    m, n = M.shape
    if n > m:
        flipped = svd(M.T)
        return SvdFactorization(U=flipped.V, S=flipped.S, V=flipped.U)

    block = np.zeros((m + n, m + n))
    block[:m, m:] = M
    block[m:, :m] = M.T
    pairs = sym_eig(block)
    S = np.maximum(pairs.lambdas[:n], 0.0)

    s_max = S[0]
    rank = int(np.sum(S > RANK_TOL * s_max)) if s_max > 0 else 0
    S[rank:] = 0.0
    W = math.sqrt(2.0) * pairs.U[:, :rank]
    U_kept = _orthonormalize(W[:m]) if rank else np.zeros((m, 0))
    V_kept = _orthonormalize(W[m:]) if rank else np.zeros((n, 0))
    return SvdFactorization(U=complete_basis(U_kept, n), S=S, V=complete_basis(V_kept, n))


def spectral_function(factor: SpectralFactorization, values: NDArray[np.float64]) -> Matrix:
    """U diag(values) U^T, symmetrized."""
    out = (factor.U * values) @ factor.U.T
    return 0.5 * (out + out.T)


def _require_psd(factor: SpectralFactorization) -> None:
    lam = factor.lambdas
    if lam[-1] < -PSD_CLAMP_TOL * max(lam[0], 0.0):
        raise DomainError(f"matrix is not positive semi-definite (lambda_min={lam[-1]:.3e})")


def mat_sqrt(P: ArrayLike) -> Matrix:
    """Principal square root U diag(sqrt(lambda)) U^T of a symmetric PSD matrix.

    Raises:
        DomainError: if an eigenvalue is negative beyond round-off.
    """
    factor = sym_eig(P)
    _require_psd(factor)
    return spectral_function(factor, np.sqrt(np.maximum(factor.lambdas, 0.0)))


def mat_inv_sqrt(P: ArrayLike, eps: float = 0.0) -> Matrix:
    """Inverse square root U diag((lambda + eps)^-1/2) U^T.

    Raises:
        DomainError: if eps < 0 or any lambda + eps <= 0.
    """
    if eps < 0 or not math.isfinite(eps):
        raise DomainError(f"eps must be a finite value >= 0, got {eps}")
    factor = sym_eig(P)
    shifted = factor.lambdas + eps
    if np.any(shifted <= 0):
        raise DomainError(f"lambda_min + eps = {shifted[-1]:.3e} is not positive")
    return spectral_function(factor, shifted ** -0.5)


def newton_schulz_iterates(P: ArrayLike, iters: int) -> NewtonSchulzRun:
    """Coupled Newton-Schulz iteration on A = P / ||P||_F.

    Y_0 = A, Z_0 = I, T_k = (3I - Z_k Y_k) / 2, Y_{k+1} = Y_k T_k,
    Z_{k+1} = T_k Z_k. Y_k tends to A^{1/2} and Z_k to A^{-1/2}.

    Raises:
        DomainError: zero or asymmetric P, or iters < 1.
        SolverError: the residual ||I - Z_k Y_k||_F grew on two consecutive
            iterations above the round-off floor, or became non-finite.
    """
    if iters < 1:
        raise DomainError(f"iters must be >= 1, got {iters}")
    M = _symmetrize(as_matrix(P, "P", square=True), "P")
    norm = float(np.linalg.norm(M))
    if norm == 0.0:
        raise DomainError("Newton-Schulz iteration needs a nonzero matrix")
    d = M.shape[0]
    eye = np.eye(d)
    Y = M / norm
    Z = eye.copy()
    iterates = [(Y, Z)]
    residuals = [float(np.linalg.norm(eye - Z @ Y))]
    growths = 0
    for k in range(iters):
        T = 0.5 * (3.0 * eye - Z @ Y)
        Y, Z = Y @ T, T @ Z
        residual = float(np.linalg.norm(eye - Z @ Y))
        if not math.isfinite(residual):
            raise SolverError("Newton-Schulz iteration produced non-finite values", residual, k + 1)
        previous = residuals[-1]
        if residual > previous * (1.0 + 1e-9) and residual > NS_RESIDUAL_FLOOR:
            growths += 1
            if growths >= 2:
                raise SolverError("Newton-Schulz iteration diverged", residual, k + 1)
        else:
            growths = 0
        iterates.append((Y, Z))
        residuals.append(residual)
    return NewtonSchulzRun(norm=norm, iterates=tuple(iterates), residuals=tuple(residuals))


def newton_schulz(P: ArrayLike, iters: int) -> tuple[Matrix, Matrix]:
    """Approximate (P^{1/2}, P^{-1/2}) with `iters` coupled Newton-Schulz steps."""
    run = newton_schulz_iterates(P, iters)
    return run.sqrt, run.inv_sqrt


def _squarings(norm: float) -> int:
    if norm == 0.0:
        return 0
    return max(0, math.ceil(math.log2(norm)) + 1)


def mat_exp(A: ArrayLike) -> Matrix:
    """Matrix exponential by scaling and squaring of a degree-18 Taylor polynomial."""
    M = as_matrix(A, square=True)
    s = _squarings(float(np.linalg.norm(M)))
    B = M / (2.0 ** s)
    eye = np.eye(M.shape[0])
    E = eye.copy()
    for k in range(TAYLOR_DEGREE, 0, -1):
        E = eye + (B @ E) / k
    for _ in range(s):
        E = E @ E
    return E


def exp_frechet_adjoint(X: ArrayLike, C: ArrayLike) -> Matrix:
    """Adjoint of the Frechet derivative of exp at X, applied to C.

    Uses the block identity exp([[X^T, C], [0, X^T]]) = [[e^{X^T}, L(X^T, C)], [0, e^{X^T}]]
    together with L(X, .)^* = L(X^T, .). C is scaled to unit norm so it does
    not influence the number of squarings.
    """
    M = as_matrix(X, "X", square=True)
    G = as_matrix(C, "C", square=True)
    if G.shape != M.shape:
        raise DimensionError(f"C must have shape {M.shape}, got {G.shape}")
    scale = float(np.linalg.norm(G))
    if scale == 0.0:
        return np.zeros_like(M)
    d = M.shape[0]
    block = np.zeros((2 * d, 2 * d))
    block[:d, :d] = M.T
    block[d:, d:] = M.T
    block[:d, d:] = G / scale
    return scale * mat_exp(block)[:d, d:]


def kappa_from_eigenvalues(lambdas: NDArray[np.float64]) -> float:
    """lambda_max / lambda_min, +inf when lambda_min <= 1e-300 * lambda_max."""
    lam_max = float(lambdas[0])
    lam_min = float(lambdas[-1])
    if lam_max <= 0.0 or lam_min <= KAPPA_FLOOR * lam_max:
        return math.inf
    return lam_max / lam_min


def condition_number(P: ArrayLike) -> float:
    """Condition number of a symmetric PSD matrix from its sym_eig eigenvalues.

    Raises:
        DomainError: asymmetric input or a clearly negative eigenvalue.
    """
    factor = sym_eig(P)
    _require_psd(factor)
    return kappa_from_eigenvalues(factor.lambdas)


def log10_kappa(kappa: float) -> float:
    return math.inf if math.isinf(kappa) else math.log10(kappa)


