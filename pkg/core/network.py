"""Desk-scale network around the meta-layer.

input (d_in -> d, tanh) -> Pre-SVD (d x d, treated) -> meta-layer -> linear
classifier. The decorrelated-BN variant whitens the batch with the inverse
square root of its covariance; the GCP variant pools every sample's
descriptor set into the square root of its covariance.
"""

import logging
import math
from typing import Optional

import numpy as np
from numpy.typing import ArrayLike, NDArray

from core.errors import DimensionError
from core.linalg import as_matrix, kappa_from_eigenvalues, log10_kappa, sym_eig
from core.metalayer import meta_backward, meta_forward
from core.ortho import apply_policy_forward
from models.data_classes import (
    ForwardCache,
    Gradients,
    Matrix,
    MetaLayerCache,
    MetaMode,
    Solver,
    TrainConfig,
    Variant,
    WhiteningCache,
)

logger = logging.getLogger(__name__)


def pre_svd_forward(W: ArrayLike, b: ArrayLike, X: ArrayLike) -> Matrix:
    """W X + b 1^T."""
    Wm = as_matrix(W, "W")
    Xm = as_matrix(X, "X")
    bias = np.asarray(b, dtype=np.float64).reshape(-1)
    if Wm.shape[1] != Xm.shape[0] or bias.size != Wm.shape[0]:
        raise DimensionError(f"shapes do not conform: W {Wm.shape}, b {bias.shape}, X {Xm.shape}")
    return Wm @ Xm + bias[:, None]


def decorrelated_bn(
    X: ArrayLike,
    eps: Optional[float] = None,
    solver: Solver = Solver.SVD,
    ns_iters: int = 20,
) -> tuple[Matrix, WhiteningCache]:
    """Whiten a batch: X_w = S (X - mean) with S the covariance inverse square root."""
    S, meta = meta_forward(X, MetaMode.INV_SQRT, eps, solver, ns_iters)
    mean = meta.X.mean(axis=1)
    centered = meta.X - mean[:, None]
    return S @ centered, WhiteningCache(meta=meta, mean=mean, centered=centered, whitening=S)


def decorrelated_bn_backward(cache: WhiteningCache, dXw: ArrayLike, reg: Optional[float] = None) -> Matrix:
    """Gradient with respect to the un-whitened batch."""
    G = as_matrix(dXw, "dXw")
    dS = G @ cache.centered.T
    dcentered = cache.whitening.T @ G
    dX = dcentered - dcentered.mean(axis=1, keepdims=True)
    return dX + meta_backward(cache.meta, dS, reg)


def gcp_head(
    X: ArrayLike,
    eps: Optional[float] = 0.0,
    solver: Solver = Solver.SVD,
    ns_iters: int = 20,
) -> tuple[Matrix, MetaLayerCache]:
    """Covariance square root of one descriptor set, the pooled representation."""
    return meta_forward(X, MetaMode.SQRT, eps, solver, ns_iters)


def covariance_log10_kappa(cache: MetaLayerCache) -> float:
    """log10 condition number of the raw covariance entering the meta-layer."""
    lambdas = cache.factor.lambdas if cache.factor is not None else sym_eig(cache.P).lambdas
    return log10_kappa(kappa_from_eigenvalues(lambdas))


def softmax_cross_entropy(logits: NDArray[np.float64], labels: NDArray[np.int64]) -> tuple[float, Matrix, float]:
    """Mean cross-entropy over the columns of logits (classes x batch).

    Returns:
        The loss, its gradient with respect to logits and the batch accuracy.
    """
    shifted = logits - logits.max(axis=0, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=0, keepdims=True))
    batch = np.arange(labels.size)
    loss = -float(log_probs[labels, batch].mean())
    dlogits = np.exp(log_probs)
    dlogits[labels, batch] -= 1.0
    accuracy = float(np.mean(np.argmax(logits, axis=0) == labels))
    return loss, dlogits / labels.size, accuracy


class Network:
    """Parameters, running statistics and momentum buffers of one model"""

    def __init__(self, cfg: TrainConfig, rng: np.random.Generator):
        d, d_in, k = cfg.d, cfg.dataset.input_dim, cfg.classes
        self.variant = cfg.variant
        self.policy = cfg.policy
        self.solver = cfg.solver
        self.ns_iters = cfg.ns_iters
        self.eps = cfg.eps
        self.bn_momentum = cfg.bn_momentum

        # Same draws for every policy so seed-matched runs start from the same point
        self.input_weight = rng.standard_normal((d, d_in)) / math.sqrt(d_in)
        self.input_bias = np.zeros(d)
        self.pre_param = rng.standard_normal((d, d)) / math.sqrt(d)
        self.pre_bias = np.zeros(d)
        features = d if self.variant is Variant.DECORR_BN else d * d
        self.head_weight = rng.standard_normal((k, features)) / math.sqrt(features)
        self.head_bias = np.zeros(k)

        self.running_mean = np.zeros(d)
        self.running_whitening = np.eye(d)
        self.velocities: dict[str, NDArray[np.float64]] = {}
        self.pre_velocity: Optional[Matrix] = None

    def pre_weight(self) -> Matrix:
        return apply_policy_forward(self.policy, self.pre_param)

    def forward(self, x: NDArray[np.float64], training: bool = True) -> tuple[Matrix, ForwardCache]:
        """Logits (classes x batch) for a batch of samples.

        Args:
            x: (batch, d_in) vectors, or (batch, d_in, m) descriptor sets for GCP.
            training: Whiten with batch statistics (decorrelated BN) and
                record the covariance conditioning; otherwise use running
                statistics.
        """
        W = self.pre_weight()
        if self.variant is Variant.DECORR_BN:
            inputs = np.asarray(x, dtype=np.float64).T
            hidden = np.tanh(self.input_weight @ inputs + self.input_bias[:, None])
            Z = pre_svd_forward(W, self.pre_bias, hidden)
            if training:
                features, whitening = decorrelated_bn(Z, self.eps, self.solver, self.ns_iters)
                kappa = covariance_log10_kappa(whitening.meta)
            else:
                features = self.running_whitening @ (Z - self.running_mean[:, None])
                whitening, kappa = None, math.nan
            cache = ForwardCache(
                inputs=inputs, hidden=hidden, pre_weight=W, features=features,
                log10_kappa=kappa, whitening=whitening,
            )
        else:
            inputs = np.asarray(x, dtype=np.float64)
            hidden = np.tanh(self.input_weight @ inputs + self.input_bias[None, :, None])
            pooled = []
            columns = []
            for sample in hidden:
                Q, meta = gcp_head(pre_svd_forward(W, self.pre_bias, sample), 0.0, self.solver, self.ns_iters)
                pooled.append(meta)
                columns.append(Q.ravel())
            features = np.stack(columns, axis=1)
            kappa = math.nan
            if training:
                kappas = [covariance_log10_kappa(meta) for meta in pooled]
                kappa = math.inf if any(math.isinf(v) for v in kappas) else float(np.mean(kappas))
            cache = ForwardCache(
                inputs=inputs, hidden=hidden, pre_weight=W, features=features,
                log10_kappa=kappa, pooled=tuple(pooled),
            )
        logits = self.head_weight @ features + self.head_bias[:, None]
        return logits, cache

    def backward(self, cache: ForwardCache, dlogits: Matrix, reg: Optional[float] = None) -> Gradients:
        """Gradients of the loss for a training-mode forward cache."""
        head_weight = dlogits @ cache.features.T
        head_bias = dlogits.sum(axis=1)
        dfeatures = self.head_weight.T @ dlogits
        W = cache.pre_weight

        if self.variant is Variant.DECORR_BN:
            assert cache.whitening is not None
            dZ = decorrelated_bn_backward(cache.whitening, dfeatures, reg)
            pre_weight = dZ @ cache.hidden.T
            pre_bias = dZ.sum(axis=1)
            dA = (W.T @ dZ) * (1.0 - cache.hidden ** 2)
            input_weight = dA @ cache.inputs.T
            input_bias = dA.sum(axis=1)
        else:
            d = W.shape[0]
            dZ = np.stack([
                meta_backward(meta, dfeatures[:, i].reshape(d, d), reg)
                for i, meta in enumerate(cache.pooled)
            ])
            pre_weight = np.einsum("bij,bkj->ik", dZ, cache.hidden)
            pre_bias = dZ.sum(axis=(0, 2))
            dA = np.einsum("ji,bjk->bik", W, dZ) * (1.0 - cache.hidden ** 2)
            input_weight = np.einsum("bij,bkj->ik", dA, cache.inputs)
            input_bias = dA.sum(axis=(0, 2))

        return Gradients(
            input_weight=input_weight,
            input_bias=input_bias,
            pre_weight=pre_weight,
            pre_bias=pre_bias,
            head_weight=head_weight,
            head_bias=head_bias,
        )

    def update_running_stats(self, cache: ForwardCache) -> None:
        """Exponential running mean and whitening matrix for evaluation."""
        if cache.whitening is None:
            return
        m = self.bn_momentum
        self.running_mean = (1.0 - m) * self.running_mean + m * cache.whitening.mean
        self.running_whitening = (1.0 - m) * self.running_whitening + m * cache.whitening.whitening

    def predict(self, x: NDArray[np.float64]) -> NDArray[np.int64]:
        logits, _ = self.forward(x, training=False)
        return np.argmax(logits, axis=0)
