#!/usr/bin/env python3
"""orthocond command-line front end.

run        train every (policy, seed) pair of a config and write traces + summary.json
gradcheck  compare every analytic backward pass with finite differences
report     tabulate a trace directory and optionally chart its conditioning
"""

import argparse
import logging
import signal
import sys
from collections import defaultdict
from pathlib import Path
from typing import TYPE_CHECKING, Optional, Sequence

from core.config import load_config
from core.errors import ConfigError, TraceFormatError
from core.gradcheck import CHECKS, run_checks
from core.parser import TraceParser
from core.report import CHART_NAME, build_report, format_table, ordering_verdict, write_chart
from core.runner import ExperimentRunner

if TYPE_CHECKING:
    from types import FrameType

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_INPUT_ERROR = 2
EXIT_IO_ERROR = 3

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(name)s - %(message)s"

logger = logging.getLogger(__name__)


def configure_logging(level: str = "INFO", log_file: Optional[str] = None) -> None:
    """Configure root logging; may be called again to apply config-file settings."""
    handlers: list[logging.Handler] = [logging.StreamHandler()]
    if log_file:
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(level=level.upper(), format=LOG_FORMAT, handlers=handlers, force=True)


def _dims(value: str) -> list[int]:
    try:
        return [int(part) for part in value.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {value!r}") from None


def _positive_int(value: str) -> int:
    number = int(value)
    if number < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {value}")
    return number


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="orthocond", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--log-level", default=None, help="logging level (default: config log_level for run, else INFO)")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="run an experiment config")
    run.add_argument("--config", default=None, help="config path (default ./config.yaml, then /etc/orthocond)")
    run.add_argument("--jobs", type=_positive_int, default=1, help="parallel runs, capped at the CPU count")

    gradcheck = commands.add_parser("gradcheck", help="finite-difference gradient checks")
    gradcheck.add_argument("--dims", type=_dims, default=[2, 4, 8], help="comma-separated dimensions, each <= 16")
    gradcheck.add_argument("--seeds", type=_positive_int, default=3, help="random cases per dimension")
    gradcheck.add_argument("--tol", type=float, default=1e-4, help="relative error tolerance")
    gradcheck.add_argument("--check", action="append", choices=sorted(CHECKS), help="run only this check")

    report = commands.add_parser("report", help="summarize a trace directory")
    report.add_argument("--dir", required=True, help="directory written by `run`")
    report.add_argument("--chart", action="store_true", help=f"also write {CHART_NAME} into the directory")
    return parser


class OrthoCondCli:
    """Dispatches subcommands and maps failures to exit codes."""

    def __init__(self) -> None:
        self.runner: Optional[ExperimentRunner] = None

    def cmd_run(self, args: argparse.Namespace) -> int:
        """Run every (policy, seed) pair of the config.

        Returns:
            0 on success, 2 for a bad config, 3 on I/O failure or interruption.
        """
        try:
            config = load_config(args.config)
        except ConfigError as e:
            logger.error("Invalid configuration: %s", e)
            return EXIT_INPUT_ERROR
        configure_logging(args.log_level or config.log_level, config.log_file)

        self.runner = ExperimentRunner(config, jobs=args.jobs)
        previous_int = signal.signal(signal.SIGINT, self._signal_handler)
        previous_term = signal.signal(signal.SIGTERM, self._signal_handler)
        try:
            summary = self.runner.run()
        except ConfigError as e:
            logger.error("Invalid configuration: %s", e)
            return EXIT_INPUT_ERROR
        except OSError:
            logger.exception("Cannot write results to %s", config.output_dir)
            return EXIT_IO_ERROR
        finally:
            signal.signal(signal.SIGINT, previous_int)
            signal.signal(signal.SIGTERM, previous_term)

        for label, stats in summary["policies"].items():
            final = stats["final_val_error"]
            logger.info(
                "%s: val_error %.2f ± %.2f (min %.2f), mean log10 kappa %s, failures %d",
                label, final["mean"], final["std"], final["min"], stats["mean_log10_kappa"],
                stats["svd_failures"],
            )
        if summary["interrupted"] or self.runner.stopped:
            logger.warning("Run interrupted; outputs in %s are incomplete", config.output_dir)
            return EXIT_IO_ERROR
        return EXIT_OK

    def cmd_gradcheck(self, args: argparse.Namespace) -> int:
        """Run the registered gradient checks.

        Returns:
            0 if every check is within tolerance, 1 otherwise, 2 for bad arguments.
        """
        try:
            results = run_checks(dims=args.dims, seeds=args.seeds, tol=args.tol, names=args.check)
        except ConfigError as e:
            logger.error("%s", e)
            return EXIT_INPUT_ERROR

        worst: dict[str, float] = defaultdict(float)
        failed: dict[str, bool] = defaultdict(bool)
        for result in results:
            worst[result.name] = max(worst[result.name], result.max_rel_error)
            failed[result.name] |= not result.passed
        for name, error in worst.items():
            print(f"{name:<24} max_rel_error={error:.3e}  {'FAIL' if failed[name] else 'ok'}")
        offenders = [name for name in worst if failed[name]]
        print(f"{len(worst)} of {len(CHECKS)} registered checks executed, {len(results)} cases")
        if offenders:
            print("FAILED: " + ", ".join(offenders))
            return EXIT_CHECK_FAILED
        return EXIT_OK

    def cmd_report(self, args: argparse.Namespace) -> int:
        """Print the summary table of a trace directory.

        Returns:
            0 on success, 2 for a missing directory or malformed trace, 3 on I/O failure.
        """
        try:
            groups = TraceParser().parse_directory(args.dir)
        except (FileNotFoundError, NotADirectoryError) as e:
            logger.error("%s", e)
            return EXIT_INPUT_ERROR
        except TraceFormatError as e:
            logger.error("Malformed trace %s", e)
            return EXIT_INPUT_ERROR
        except OSError:
            logger.exception("Cannot read traces from %s", args.dir)
            return EXIT_IO_ERROR
        if not groups:
            logger.error("No trace files found under %s", args.dir)
            return EXIT_INPUT_ERROR

        rows = build_report(groups)
        print(format_table(rows))
        verdict = ordering_verdict(rows)
        if verdict:
            print(verdict)
        if args.chart:
            try:
                write_chart(groups, Path(args.dir) / CHART_NAME)
            except OSError:
                logger.exception("Cannot write chart")
                return EXIT_IO_ERROR
        return EXIT_OK

    def dispatch(self, args: argparse.Namespace) -> int:
        handlers = {"run": self.cmd_run, "gradcheck": self.cmd_gradcheck, "report": self.cmd_report}
        return handlers[args.command](args)

    def _signal_handler(self, signum: int, frame: "FrameType | None") -> None:
        """Stop training after the current step.

        Args:
            signum: Signal number
            frame: Current stack frame
        """
        logger.info("Received signal %d, stopping after the current step...", signum)
        if self.runner:
            self.runner.request_stop()


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, configure logging and run one subcommand."""
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level or "INFO")
    try:
        return OrthoCondCli().dispatch(args)
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        return EXIT_IO_ERROR
    except Exception:
        logger.exception("orthocond crashed")
        return EXIT_IO_ERROR


if __name__ == "__main__":
    sys.exit(main())
