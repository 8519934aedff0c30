import logging
import math
import signal
import threading
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from multiprocessing.managers import SyncManager
from pathlib import Path
from typing import Any, Optional, Protocol

import numpy as np

from core.parser import TraceWriter, write_json
from core.report import mean_std
from core.system import SystemMonitor
from core.train import run_training
from models.data_classes import ConditioningTrace, ExperimentConfig, OrthoPolicy, RunSummary, TrainConfig

logger = logging.getLogger(__name__)

SUMMARY_FILE = "summary.json"


class StopFlag(Protocol):
    def is_set(self) -> bool: ...

    def set(self) -> None: ...


def _ignore_interrupts() -> None:
    # the parent owns SIGINT/SIGTERM and forwards them through the stop flag
    signal.signal(signal.SIGINT, signal.SIG_IGN)
    signal.signal(signal.SIGTERM, signal.SIG_IGN)


def train_and_save(cfg: TrainConfig, path: Path, stop: StopFlag) -> ConditioningTrace:
    """Train one configured run and write its trace file"""
    logger.info("Starting run policy=%s seed=%d", cfg.policy.label, cfg.seed)
    trace = run_training(cfg, should_stop=stop.is_set)
    TraceWriter().write(path, trace.records)
    logger.info("Trace saved: %s (%d rows, %d failures)", path, len(trace.records), trace.svd_failures)
    return trace


class ExperimentRunner:
    """Runs every (policy, seed) pair of an experiment and saves traces plus a summary.

    With more than one worker the runs execute in separate processes; a
    stop request reaches them through a manager-backed event.
    """

    def __init__(self, config: ExperimentConfig, jobs: int = 1):
        self.config = config
        self.output_dir = Path(config.output_dir)
        self.system_monitor = SystemMonitor()
        self.jobs = self.system_monitor.worker_limit(jobs)
        self._stop = threading.Event()
        self._shared_stop: Optional[StopFlag] = None

    def request_stop(self) -> None:
        """Ask running trainings to stop after their current step"""
        self._stop.set()
        shared = self._shared_stop
        if shared is not None:
            shared.set()

    @property
    def stopped(self) -> bool:
        return self._stop.is_set()

    def trace_path(self, policy: OrthoPolicy, seed: int) -> Path:
        return self.output_dir / policy.label / f"seed_{seed}.csv"

    def run_one(self, policy: OrthoPolicy, seed: int) -> ConditioningTrace:
        """Train one seed under one policy in this process and save its trace file"""
        cfg = replace(self.config.train, policy=policy, seed=seed)
        return train_and_save(cfg, self.trace_path(policy, seed), self._stop)

    def _run_parallel(self, pairs: list[tuple[OrthoPolicy, int]]) -> list[ConditioningTrace]:
        manager = SyncManager()
        manager.start(_ignore_interrupts)
        shared = manager.Event()
        if self._stop.is_set():
            shared.set()
        self._shared_stop = shared
        try:
            with ProcessPoolExecutor(max_workers=self.jobs, initializer=_ignore_interrupts) as pool:
                futures = [
                    pool.submit(
                        train_and_save,
                        replace(self.config.train, policy=policy, seed=seed),
                        self.trace_path(policy, seed),
                        shared,
                    )
                    for policy, seed in pairs
                ]
                return [future.result() for future in futures]
        finally:
            self._shared_stop = None
            manager.shutdown()

    def run(self) -> dict[str, Any]:
        """Run the sweep, write summary.json and return its content.

        Raises:
            OSError: traces or summary cannot be written.
        """
        start = self.system_monitor.snapshot()
        logger.info(
            "Experiment start: %d policies x %d seeds, %d workers (cpu=%.1f%%, mem=%.1f%%, rss=%d bytes)",
            len(self.config.policies), len(self.config.seeds), self.jobs,
            start.cpu_percent, start.memory_percent, start.rss_bytes,
        )
        pairs = [(policy, seed) for policy in self.config.policies for seed in self.config.seeds]
        if self.jobs == 1:
            traces = [self.run_one(policy, seed) for policy, seed in pairs]
        else:
            traces = self._run_parallel(pairs)

        summaries = [trace.summary for trace in traces if trace.summary is not None]
        summary = self.aggregate(summaries)
        summary["interrupted"] = any(trace.interrupted for trace in traces)
        write_json(self.output_dir / SUMMARY_FILE, summary)

        end = self.system_monitor.snapshot()
        logger.info(
            "Experiment finished: summary at %s (cpu=%.1f%%, mem=%.1f%%, rss=%d bytes, load=%s)",
            self.output_dir / SUMMARY_FILE, end.cpu_percent, end.memory_percent, end.rss_bytes,
            end.load_average,
        )
        return summary

    def aggregate(self, summaries: list[RunSummary]) -> dict[str, Any]:
        """Per-policy mean, sample std and min of final validation error across seeds"""
        policies: dict[str, Any] = {}
        for policy in self.config.policies:
            runs = sorted((s for s in summaries if s.policy == policy.label), key=lambda s: s.seed)
            if not runs:
                continue
            finals = [run.final_val_error for run in runs]
            mean, std = mean_std(finals)
            kappas = [run.mean_log10_kappa for run in runs]
            policies[policy.label] = {
                "seeds": [run.seed for run in runs],
                "final_val_error": {"mean": mean, "std": std, "min": min(finals)},
                "mean_log10_kappa": math.inf if any(math.isinf(k) for k in kappas) else float(np.mean(kappas)),
                "svd_failures": sum(run.svd_failures for run in runs),
                "runs": [asdict(run) for run in runs],
            }
        return {"schema_version": self.config.schema_version, "policies": policies}
