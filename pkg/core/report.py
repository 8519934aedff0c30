"""Summary table, ordering verdict and conditioning chart for a trace directory."""

import logging
import math
from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from models.data_classes import ReportRow, TraceRecord  # noqa: E402

logger = logging.getLogger(__name__)

ORDERING = ("ow", "nog", "none")
CHART_NAME = "conditioning.svg"


def mean_std(values: list[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0


def summarize_group(group: str, traces: dict[str, list[TraceRecord]]) -> ReportRow:
    """One table row: final validation error over runs, mean finite log10 kappa, total failures."""
    runs = [records for records in traces.values() if records]
    finals = [records[-1].val_error for records in runs]
    kappas = [r.log10_kappa for records in runs for r in records if math.isfinite(r.log10_kappa)]
    mean, std = mean_std(finals) if finals else (math.nan, math.nan)
    return ReportRow(
        group=group,
        runs=len(runs),
        mean_val_error=mean,
        std_val_error=std,
        min_val_error=min(finals) if finals else math.nan,
        mean_log10_kappa=float(np.mean(kappas)) if kappas else math.inf,
        svd_failures=sum(records[-1].svd_failures for records in runs),
    )


def build_report(groups: dict[str, dict[str, list[TraceRecord]]]) -> list[ReportRow]:
    return [summarize_group(group, groups[group]) for group in sorted(groups)]


def format_table(rows: list[ReportRow]) -> str:
    width = max([len("policy")] + [len(row.group) for row in rows])
    lines = [
        f"{'policy':<{width}}  runs  val_error (mean±std)     min  log10_kappa  failures",
    ]
    for row in rows:
        lines.append(
            f"{row.group:<{width}}  {row.runs:>4}  {row.mean_val_error:>10.2f}±{row.std_val_error:<6.2f}"
            f"  {row.min_val_error:>10.2f}  {row.mean_log10_kappa:>11.3f}  {row.svd_failures:>8d}"
        )
    return "\n".join(lines)


def ordering_verdict(rows: list[ReportRow]) -> Optional[str]:
    """"OW < NOG < none: PASS|FAIL" on mean log10 kappa, None unless all three groups exist."""
    by_group = {row.group: row.mean_log10_kappa for row in rows}
    if not all(name in by_group for name in ORDERING):
        return None
    ow, nog, none = (by_group[name] for name in ORDERING)
    passed = ow < nog < none
    return f"OW < NOG < none: {'PASS' if passed else 'FAIL'}"


def write_chart(groups: dict[str, dict[str, list[TraceRecord]]], path: str | Path) -> Path:
    """Line chart of log10 kappa against step, one line per trace, one colour per group."""
    target = Path(path)
    fig, ax = plt.subplots(figsize=(8, 4.5))
    cmap = plt.get_cmap("tab10")
    for index, group in enumerate(sorted(groups)):
        colour = cmap(index % 10)
        for run, (name, records) in enumerate(sorted(groups[group].items())):
            steps = [r.step for r in records]
            kappas = [r.log10_kappa if math.isfinite(r.log10_kappa) else math.nan for r in records]
            ax.plot(steps, kappas, color=colour, alpha=0.8, linewidth=1.2, label=group if run == 0 else None)
    ax.set_xlabel("step")
    ax.set_ylabel("log10 condition number")
    ax.set_title("Covariance conditioning during training")
    if groups:
        ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    target.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(target, format="svg")
    plt.close(fig)
    logger.info("Chart written to %s", target)
    return target
