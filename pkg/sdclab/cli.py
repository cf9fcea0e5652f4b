#!/usr/bin/env python3
"""
sdclab experiment runner

Parses the run configuration, dispatches the selected protocol and writes
the run directory (manifest, metric CSVs, event log, snapshots, run.log).

Usage:
    python -m sdclab rq3 --config my_run.json --seed 7 --steps 200
    python -m sdclab rq1 --profile node11-like --out runs/node11
    python -m sdclab export runs/node11 --plot

Exit codes: 0 completed, 1 configuration or artifact problem,
2 invariant or contract violation, 3 numerical failure.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

from .components.abft import run_abft
from .components.artifacts import (
    ABFT_COLUMNS,
    PLOT_FILE,
    RQ1_COLUMNS,
    RQ1_LAYER_COLUMNS,
    RQ2_COLUMNS,
    RQ3_BASELINE_COLUMNS,
    RQ3_COLUMNS,
    SHADOW_COLUMNS,
    CsvWriter,
    RunManifest,
    export_plotdata,
    read_plotdata,
    render_plot,
    rq1_layer_rows,
    rq1_row,
    write_calibration,
    write_events,
    write_json,
)
from .components.error_handler import ErrorInfo, InvariantViolation, error_handler, with_error_boundary
from .components.inject import calibrate
from .components.lockstep import TrainingSettings, rq1_summary, run_rq1, run_rq2, run_rq3, run_shadow_detect
from .components.model import Params, gradient_check
from .components.run_config import PROTOCOLS, RunConfig, parse_config
from .components.snapshot import load_snapshot, save_snapshot

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
RUN_LOG = "run.log"


class ExperimentRunner:
    """Coordinates configuration, logging, protocol dispatch and the run manifest"""

    def __init__(self):
        self.logger = logging.getLogger("sdclab")
        self.config: Optional[RunConfig] = None
        self.run_dir: Optional[Path] = None
        self.manifest: Optional[RunManifest] = None
        self._file_handler: Optional[logging.Handler] = None

    # ------------------------------------------------------------------
    # Setup
    # ------------------------------------------------------------------

    def setup_logging(self, level: str = "INFO", quiet: bool = False) -> None:
        """Console logging; the run.log file handler is attached once the run directory exists"""
        stream = logging.StreamHandler(sys.stdout)
        if quiet:
            stream.setLevel(logging.WARNING)
        logging.basicConfig(level=getattr(logging, level.upper()), format=LOG_FORMAT,
                            handlers=[stream], force=True)

    def attach_run_log(self, run_dir: Path) -> None:
        run_dir.mkdir(parents=True, exist_ok=True)
        self._file_handler = logging.FileHandler(run_dir / RUN_LOG, mode="w", encoding="utf-8")
        self._file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logging.getLogger().addHandler(self._file_handler)

    def close_logging(self) -> None:
        if self._file_handler is not None:
            logging.getLogger().removeHandler(self._file_handler)
            self._file_handler.close()
            self._file_handler = None

    def parse_arguments(self, argv: Optional[List[str]] = None) -> argparse.Namespace:
        parser = argparse.ArgumentParser(
            prog="sdclab",
            description="Deterministic simulator of silent data corruption in tensor-parallel training"
        )
        sub = parser.add_subparsers(dest="command", required=True)

        for protocol in PROTOCOLS:
            p = sub.add_parser(protocol, help=f"run the {protocol} protocol")
            p.add_argument('--config', type=str, help='Path to a JSON run configuration')
            p.add_argument('--seed', type=int, help='Override the run seed')
            p.add_argument('--steps', type=int, help='Override the number of optimizer steps')
            p.add_argument('--out', type=str, help='Run directory (default: <SDCLAB_OUT or runs>/<protocol>-<hash>)')
            p.add_argument('--profile', type=str, help='Preset profile name from profiles.json')
            p.add_argument('--workers', type=int, help='Rank worker threads (results are identical for any value)')
            p.add_argument('--debug', action='store_true', help='Enable debug logging')
            p.add_argument('--quiet', action='store_true', help='Only warnings on the console, no progress bar')

        export = sub.add_parser("export", help="merge a run's metric files into plotdata.csv")
        export.add_argument('run_dir', type=str, help='Completed run directory')
        export.add_argument('--plot', action='store_true', help='Also render plotdata.png')
        export.add_argument('--smoothing', type=float, default=0.1,
                            help='Exponential smoothing factor for mismatch frequency series')
        export.add_argument('--debug', action='store_true', help='Enable debug logging')
        export.add_argument('--quiet', action='store_true', help='Only warnings on the console')
        return parser.parse_args(argv)

    # ------------------------------------------------------------------
    # Protocols
    # ------------------------------------------------------------------

    def _snapshotter(self) -> Callable[[int, Dict[str, Params]], None]:
        config, run_dir = self.config, self.run_dir

        def on_step(step: int, nodes: Dict[str, Params]):
            if not config.should_snapshot(step):
                return
            for name, params in nodes.items():
                save_snapshot(params, run_dir / "snapshots" / f"{name}_step{step:06d}", step=step)
            self.logger.info(f"Snapshot written for step {step}")
        return on_step

    def _rq1(self, settings: TrainingSettings) -> Dict[str, Any]:
        run = run_rq1(settings, self.config.profile, on_step=self._snapshotter())
        reports = []
        with CsvWriter(self.run_dir / "rq1.csv", RQ1_COLUMNS) as rows, \
                CsvWriter(self.run_dir / "rq1_layers.csv", RQ1_LAYER_COLUMNS) as layer_rows:
            for report in run:
                rows.write(rq1_row(report))
                for layer_row in rq1_layer_rows(report):
                    layer_rows.write(layer_row)
                reports.append(report)
        summary = rq1_summary(reports)
        write_json(self.run_dir / "rq1_summary.json", summary)
        write_events(self.run_dir / "events.csv", run.events.events())
        for site, entry in summary.items():
            self.logger.info(f"  {site}: mean freq {entry['mean_freq']:.3e}, max sev {entry['max_sev']:.3e}")
        return dict(run.outcome, summary=summary)

    def _rq2(self, settings: TrainingSettings) -> Dict[str, Any]:
        run = run_rq2(settings, self.config.profile, on_step=self._snapshotter())
        with CsvWriter(self.run_dir / "rq2.csv", RQ2_COLUMNS) as rows:
            for row in run:
                rows.write((row.step, row.diff_l2, row.truth_l2, row.ratio, row.wcnts, row.degenerate))
        write_events(self.run_dir / "events.csv", run.events.events())
        self.logger.info(f"  WCNTS: {run.outcome['wcnts']!r}")
        return run.outcome

    def _rq3(self, settings: TrainingSettings) -> Dict[str, Any]:
        options = self.config.rq3
        run = run_rq3(settings, self.config.profile, on_step=self._snapshotter(),
                      seed_baseline=options.seed_baseline, baseline_seed_offset=options.baseline_seed_offset,
                      loss_spike_ratio=options.loss_spike_ratio)
        with CsvWriter(self.run_dir / "rq3.csv", RQ3_COLUMNS) as rows:
            for row in run:
                rows.write((row.step, row.param_diff_l2, row.loss_healthy, row.loss_unhealthy,
                            row.gnorm_healthy, row.gnorm_unhealthy))
        if options.seed_baseline:
            with CsvWriter(self.run_dir / "rq3_baseline.csv", RQ3_BASELINE_COLUMNS) as rows:
                for row in run.baseline:
                    rows.write((row.step, row.param_diff_l2))
        write_events(self.run_dir / "events.csv", run.events.events())
        return run.outcome

    def _shadow(self, settings: TrainingSettings) -> Dict[str, Any]:
        run = run_shadow_detect(settings, self.config.profile, on_step=self._snapshotter())
        with CsvWriter(self.run_dir / "shadow.csv", SHADOW_COLUMNS) as rows:
            for row in run:
                rows.write((row.step, row.alarm, row.first_diff_tensor))
        write_events(self.run_dir / "events.csv", run.events.events())
        self.logger.info(f"  Alarms: {run.outcome['alarms']}")
        return run.outcome

    def _abft(self, settings: TrainingSettings) -> Dict[str, Any]:
        run = run_abft(settings, self.config.profile, self.config.roundoff, on_step=self._snapshotter())
        with CsvWriter(self.run_dir / "abft.csv", ABFT_COLUMNS) as rows:
            for row in run:
                rows.write((row.step, row.layer, row.site, row.checks, row.flags, row.max_lhs, row.max_rhs))
        write_events(self.run_dir / "events.csv", run.events.events())
        return run.outcome

    def _gradcheck(self, settings: TrainingSettings) -> Dict[str, Any]:
        options = self.config.gradcheck
        report = gradient_check(self.config.model, self.config.seed, step_size=options.step_size,
                                tolerance=options.tolerance,
                                max_elements_per_tensor=options.max_elements_per_tensor,
                                workers=self.config.workers)
        write_json(self.run_dir / "gradcheck.json", report.to_dict())
        if not report.passed:
            raise InvariantViolation("analytic gradients disagree with finite differences",
                                     max_rel_error=report.max_rel_error, tensor=report.worst_tensor,
                                     index=report.worst_index, tolerance=report.tolerance)
        return {"status": "completed", "max_rel_error": report.max_rel_error, "checked": report.checked}

    def _calibrate(self, settings: TrainingSettings) -> Dict[str, Any]:
        options = self.config.calibrate
        report = calibrate(self.config.profile, self.config.model, microsteps=options.microsteps,
                           start_step=options.start_step)
        write_calibration(self.run_dir / "calibrate.csv", report)
        if not report.within:
            raise InvariantViolation(f"observed corruption count outside the {report.confidence:.0%} interval",
                                     corrupted=report.corrupted, ci_low=report.ci_low, ci_high=report.ci_high)
        return {"status": "completed", "observed_rate": report.observed_rate,
                "expected_rate": report.expected_rate, "within": report.within}

    # ------------------------------------------------------------------
    # Entry points
    # ------------------------------------------------------------------

    def _record_failure(self, error_info: ErrorInfo) -> None:
        if self.manifest is not None:
            self.manifest.finish("failed", exit_code=error_info.exit_code, error={
                "category": error_info.category.value,
                "message": error_info.message,
                "context": {k: str(v) for k, v in error_info.context.items()},
                "statistics": error_handler.get_error_statistics(),
            })

    def run_protocol(self, args: argparse.Namespace) -> int:
        overrides = {
            "protocol": args.command,
            "seed": args.seed,
            "steps": args.steps,
            "out_dir": args.out,
            "profile": args.profile,
            "workers": args.workers,
            "log_level": "DEBUG" if args.debug else None,
        }
        self.config = parse_config(args.config, overrides)
        self.setup_logging(self.config.log_level, args.quiet)
        self.run_dir = self.config.run_dir()
        self.attach_run_log(self.run_dir)

        self.logger.info("=" * 60)
        self.logger.info(f"SDCLAB {self.config.protocol.upper()} RUN")
        self.logger.info("=" * 60)
        self.logger.info(f"Run directory: {self.run_dir}")
        self.logger.info(f"Profile: {self.config.profile.name}, seed {self.config.seed}, "
                         f"{self.config.steps} steps, global batch {self.config.global_batch}")

        self.manifest = RunManifest(self.run_dir, self.config.to_dict(), self.config.config_hash(),
                                    self.config.seed, self.config.protocol)
        self.manifest.start()

        initial = None
        if self.config.init_snapshot:
            initial = load_snapshot(self.config.init_snapshot)
            self.logger.info(f"Resuming from snapshot {self.config.init_snapshot}")
        progress = not args.quiet and sys.stderr.isatty()
        settings = self.config.training_settings(initial=initial, progress=progress)

        dispatch = {
            "rq1": self._rq1,
            "rq2": self._rq2,
            "rq3": self._rq3,
            "shadow": self._shadow,
            "abft": self._abft,
            "gradcheck": self._gradcheck,
            "calibrate": self._calibrate,
        }
        outcome = dispatch[self.config.protocol](settings)
        status = outcome.get("status", "completed")
        self.manifest.finish(status, outcome=outcome, exit_code=0)
        self.logger.info(f"[OK] {self.config.protocol} finished with status '{status}'")
        return 0

    def run_export(self, args: argparse.Namespace) -> int:
        self.setup_logging("DEBUG" if args.debug else "INFO", args.quiet)
        run_dir = Path(args.run_dir)
        path = export_plotdata(run_dir, smoothing=args.smoothing)
        if args.plot:
            render_plot(read_plotdata(path), run_dir / PLOT_FILE)
        self.logger.info(f"[OK] Plot data ready: {path}")
        return 0

    def run(self, argv: Optional[List[str]] = None) -> int:
        args = self.parse_arguments(argv)
        if args.command != "export":
            self.setup_logging("DEBUG" if args.debug else "INFO", args.quiet)

        @with_error_boundary("cli", fallback_function=self._record_failure)
        def guarded() -> int:
            if args.command == "export":
                return self.run_export(args)
            return self.run_protocol(args)

        try:
            return guarded()
        finally:
            self.close_logging()


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point"""
    return ExperimentRunner().run(argv)


if __name__ == "__main__":
    sys.exit(main())
