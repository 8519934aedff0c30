"""Training loop with per-step conditioning trace."""

import logging
import math
from typing import Callable, Optional

import numpy as np
from numpy.typing import NDArray

from core.data import synth_dataset
from core.errors import ConfigError, DomainError, OrthoCondError, SingularGradientError, SolverError
from core.network import Network, softmax_cross_entropy
from core.ortho import apply_policy_update
from models.data_classes import (
    ConditioningTrace,
    RunSummary,
    StepResult,
    TraceRecord,
    TrainConfig,
    Variant,
)

logger = logging.getLogger(__name__)

# Errors a step may raise from the spectral solvers; each one counts as a failure
RECOVERABLE = (SolverError, DomainError, SingularGradientError)


def validate_train_config(cfg: TrainConfig) -> None:
    problems = []
    if cfg.d < 2:
        problems.append(f"d must be >= 2, got {cfg.d}")
    if cfg.batch_size < 2:
        problems.append(f"batch_size must be >= 2, got {cfg.batch_size}")
    if cfg.epochs < 0:
        problems.append(f"epochs must be >= 0, got {cfg.epochs}")
    if not cfg.lr > 0:
        problems.append(f"lr must be > 0, got {cfg.lr}")
    if not 0 <= cfg.momentum < 1:
        problems.append(f"momentum must lie in [0, 1), got {cfg.momentum}")
    if not cfg.weight_decay >= 0:
        problems.append(f"weight_decay must be >= 0, got {cfg.weight_decay}")
    if not 0 < cfg.lr_decay <= 1:
        problems.append(f"lr_decay must lie in (0, 1], got {cfg.lr_decay}")
    if not 0 < cfg.bn_momentum <= 1:
        problems.append(f"bn_momentum must lie in (0, 1], got {cfg.bn_momentum}")
    if cfg.ns_iters < 1:
        problems.append(f"ns_iters must be >= 1, got {cfg.ns_iters}")
    if cfg.eps is not None and not cfg.eps >= 0:
        problems.append(f"eps must be >= 0, got {cfg.eps}")
    if cfg.reg is not None and not cfg.reg >= 0:
        problems.append(f"reg must be >= 0, got {cfg.reg}")
    if cfg.trace_interval < 1:
        problems.append(f"trace_interval must be >= 1, got {cfg.trace_interval}")
    if cfg.final_epochs < 1:
        problems.append(f"final_epochs must be >= 1, got {cfg.final_epochs}")
    if cfg.variant is Variant.GCP and cfg.dataset.points_per_sample < 2:
        problems.append("the gcp variant needs points_per_sample >= 2")
    if cfg.variant is Variant.DECORR_BN and cfg.dataset.points_per_sample != 1:
        problems.append("the decorr_bn variant needs points_per_sample = 1")
    if problems:
        raise ConfigError("invalid training config: " + "; ".join(problems))


def scheduled_lr(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate for a 0-based epoch after step decay at each milestone."""
    passed = sum(1 for milestone in cfg.lr_milestones if epoch >= milestone)
    return cfg.lr * cfg.lr_decay ** passed


def sgd_update(
    param: NDArray[np.float64],
    grad: NDArray[np.float64],
    velocity: Optional[NDArray[np.float64]],
    lr: float,
    momentum: float,
    weight_decay: float,
) -> tuple[NDArray[np.float64], Optional[NDArray[np.float64]]]:
    """Heavy-ball SGD: g = grad + wd p, v = mu v + g, p -= lr v."""
    step = grad + weight_decay * param if weight_decay else grad
    if momentum:
        velocity = step if velocity is None else momentum * velocity + step
        step = velocity
    return param - lr * step, velocity


def train_step(
    net: Network,
    batch: tuple[NDArray[np.float64], NDArray[np.int64]],
    cfg: TrainConfig,
    lr: Optional[float] = None,
) -> tuple[Network, StepResult]:
    """Forward, backward and one update of every parameter.

    The Pre-SVD parameter goes through apply_policy_update, the rest through
    plain momentum SGD. A spectral solver failure anywhere in the step leaves
    the network untouched and is reported as failed.
    """
    x, y = batch
    rate = cfg.lr if lr is None else lr
    try:
        logits, cache = net.forward(x, training=True)
        loss, dlogits, accuracy = softmax_cross_entropy(logits, y)
        grads = net.backward(cache, dlogits, cfg.reg)
        update = apply_policy_update(
            net.policy,
            net.pre_param,
            grads.pre_weight,
            rate,
            momentum=cfg.momentum,
            velocity=net.pre_velocity,
            weight_decay=cfg.weight_decay,
        )
    except RECOVERABLE as e:
        logger.warning("Skipping step after meta-layer failure: %s", e)
        return net, StepResult(loss=math.nan, accuracy=math.nan, log10_kappa=math.inf, policy=None, failed=True)

    net.pre_param = update.new_param
    net.pre_velocity = update.velocity
    for name in ("input_weight", "input_bias", "pre_bias", "head_weight", "head_bias"):
        value, velocity = sgd_update(
            getattr(net, name), getattr(grads, name), net.velocities.get(name),
            rate, cfg.momentum, cfg.weight_decay,
        )
        setattr(net, name, value)
        if velocity is not None:
            net.velocities[name] = velocity
    net.update_running_stats(cache)
    return net, StepResult(loss=loss, accuracy=accuracy, log10_kappa=cache.log10_kappa, policy=update.trace)


def evaluate(net: Network, x: NDArray[np.float64], y: NDArray[np.int64]) -> float:
    """Classification error in percent; a failed evaluation counts every sample as wrong."""
    try:
        predictions = net.predict(x)
    except OrthoCondError as e:
        logger.warning("Evaluation failed, counting the batch as misclassified: %s", e)
        return 100.0
    return 100.0 * float(np.mean(predictions != y))


def summarize(trace: ConditioningTrace, cfg: TrainConfig) -> RunSummary:
    """Final, minimum and late-epoch mean validation error plus mean finite log10 kappa."""
    errors = trace.val_errors
    late = errors[1:][-cfg.final_epochs:] or errors[:1]
    finite = [r.log10_kappa for r in trace.records if math.isfinite(r.log10_kappa)]
    return RunSummary(
        seed=cfg.seed,
        policy=cfg.policy.label,
        final_val_error=errors[-1],
        min_val_error=min(errors),
        mean_final_val_error=float(np.mean(late)),
        mean_log10_kappa=float(np.mean(finite)) if finite else math.inf,
        svd_failures=trace.svd_failures,
        steps=trace.steps,
    )


def run_training(cfg: TrainConfig, should_stop: Optional[Callable[[], bool]] = None) -> ConditioningTrace:
    """Train one network and trace the conditioning of its meta-layer input.

    A row is logged every trace_interval steps and at the last step of every
    epoch, after that epoch's validation. Training is deterministic in cfg.

    Args:
        cfg: Run configuration; cfg.seed drives data, initialization and
            batch order.
        should_stop: Polled before every step; returning True ends the run
            early with trace.interrupted set.

    Returns:
        The trace with its summary attached.
    """
    validate_train_config(cfg)
    data = synth_dataset(cfg.dataset, cfg.seed)
    if data.train_y.size < cfg.batch_size:
        raise ConfigError(f"batch_size {cfg.batch_size} exceeds the {data.train_y.size} training samples")
    init_seq, shuffle_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    net = Network(cfg, np.random.default_rng(init_seq))
    shuffle_rng = np.random.default_rng(shuffle_seq)

    trace = ConditioningTrace()
    trace.val_errors.append(evaluate(net, data.val_x, data.val_y))
    batches = data.train_y.size // cfg.batch_size
    logger.info(
        "Training policy=%s seed=%d: %d epochs x %d batches, initial val_error=%.2f%%",
        cfg.policy.label, cfg.seed, cfg.epochs, batches, trace.val_errors[0],
    )

    for epoch in range(cfg.epochs):
        lr = scheduled_lr(cfg, epoch)
        order = shuffle_rng.permutation(data.train_y.size)
        epoch_losses = []
        for b in range(batches):
            if should_stop is not None and should_stop():
                logger.warning("Stop requested, ending run after %d steps", trace.steps)
                trace.interrupted = True
                trace.summary = summarize(trace, cfg)
                return trace
            index = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            net, result = train_step(net, (data.train_x[index], data.train_y[index]), cfg, lr)
            trace.steps += 1
            if result.failed:
                trace.svd_failures += 1
            else:
                epoch_losses.append(result.loss)

            last_in_epoch = b == batches - 1
            if last_in_epoch:
                trace.val_errors.append(evaluate(net, data.val_x, data.val_y))
            if trace.steps % cfg.trace_interval == 0 or last_in_epoch:
                trace.records.append(_record(trace, epoch, result))
            logger.debug("step %d: loss=%.6f log10_kappa=%.3f", trace.steps, result.loss, result.log10_kappa)

        logger.info(
            "Epoch %d/%d: loss=%.4f val_error=%.2f%% log10_kappa=%.2f failures=%d",
            epoch + 1, cfg.epochs, float(np.mean(epoch_losses)) if epoch_losses else math.nan,
            trace.val_errors[-1], trace.records[-1].log10_kappa if trace.records else math.nan,
            trace.svd_failures,
        )

    trace.summary = summarize(trace, cfg)
    return trace


def _record(trace: ConditioningTrace, epoch: int, result: StepResult) -> TraceRecord:
    policy = result.policy
    return TraceRecord(
        step=trace.steps,
        epoch=epoch + 1,
        loss=result.loss,
        val_error=trace.val_errors[-1],
        log10_kappa=result.log10_kappa,
        eta_used=policy.eta_used if policy else math.nan,
        grad_ortho_residual=policy.grad_ortho_residual if policy else math.nan,
        weight_ortho_residual=policy.weight_ortho_residual if policy else math.nan,
        svd_failures=trace.svd_failures,
        accuracy=result.accuracy,
        skipped=result.failed,
    )
