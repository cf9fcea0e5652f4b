#!/usr/bin/env python3
"""
Artifacts Component

Everything a run leaves on disk: metric CSVs, the injector event log, the
run manifest, parameter snapshots and the long-format plot table.

Reals are written as Python's shortest round-trip repr, so a CSV value
parses back to the identical double and files written by equal runs are
byte-identical.
"""

import csv
import json
import logging
from collections import OrderedDict
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

from .error_handler import ArtifactError
from .inject import CalibrationReport, FaultEvent
from .metrics import MismatchReport

logger = logging.getLogger(__name__)

ARTIFACT_VERSION = "1.0.0"
MANIFEST_FILE = "manifest.json"
PLOTDATA_FILE = "plotdata.csv"
PLOT_FILE = "plotdata.png"

RQ1_COLUMNS = ("step", "microstep", "site", "freq", "sev", "zero_ref_count", "nonfinite_count")
RQ1_LAYER_COLUMNS = ("step", "microstep", "site", "layer", "mismatches", "freq", "sev",
                     "zero_ref_count", "nonfinite_count")
RQ2_COLUMNS = ("step", "diff_l2", "truth_l2", "ratio", "wcnts", "degenerate")
RQ3_COLUMNS = ("step", "param_diff_l2", "loss_healthy", "loss_unhealthy", "gnorm_healthy", "gnorm_unhealthy")
RQ3_BASELINE_COLUMNS = ("step", "param_diff_l2")
SHADOW_COLUMNS = ("step", "alarm", "first_diff_tensor")
ABFT_COLUMNS = ("step", "layer", "site", "checks", "flags", "max_lhs", "max_rhs")
EVENT_COLUMNS = ("step", "microstep", "site", "layer", "rank", "index", "factor", "bit", "target")
CALIBRATE_COLUMNS = ("profile", "microsteps", "elements", "corrupted", "observed_rate", "expected_rate",
                     "ci_low_rate", "ci_high_rate", "within")


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if hasattr(value, "value"):
        return str(value.value)
    return str(value)


class CsvWriter:
    """Header on open, one complete line per row, flushed row by row."""

    def __init__(self, path: Path, columns: Sequence[str]):
        self.path = Path(path)
        self.columns = tuple(columns)
        self._handle = None
        self._writer = None
        self.rows = 0

    def __enter__(self) -> "CsvWriter":
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._handle = open(self.path, "w", encoding="utf-8", newline="")
        self._writer = csv.writer(self._handle, lineterminator="\n")
        self._writer.writerow(self.columns)
        return self

    def write(self, values: Sequence[Any]):
        if len(values) != len(self.columns):
            raise ArtifactError("row does not match CSV header", path=str(self.path),
                                expected=len(self.columns), got=len(values))
        self._writer.writerow([format_value(v) for v in values])
        self._handle.flush()
        self.rows += 1

    def __exit__(self, exc_type, exc, tb):
        if self._handle is not None:
            self._handle.close()
            self._handle = None


def rq1_row(report: MismatchReport) -> Tuple:
    return (report.step, report.microstep, report.site, report.freq, report.sev,
            report.zero_reference_count, report.nonfinite_count)


def rq1_layer_rows(report: MismatchReport) -> List[Tuple]:
    return [(report.step, report.microstep, report.site, layer.layer, layer.mismatches, layer.freq, layer.sev,
             layer.zero_reference_count, layer.nonfinite_count) for layer in report.layers]


def event_row(event: FaultEvent) -> Tuple:
    return (event.step, event.microstep, event.site, event.layer, event.rank, event.index, event.factor,
            event.bit, event.target)


def write_events(path: Path, events: Iterable[FaultEvent]) -> int:
    with CsvWriter(path, EVENT_COLUMNS) as writer:
        for event in events:
            writer.write(event_row(event))
    return writer.rows


def write_calibration(path: Path, report: CalibrationReport):
    row = report.to_row()
    with CsvWriter(path, CALIBRATE_COLUMNS) as writer:
        writer.write([row[column] for column in CALIBRATE_COLUMNS])


def write_json(path: Path, payload: Dict[str, Any]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")


def read_csv(path: Path) -> List[Dict[str, str]]:
    try:
        with open(path, "r", encoding="utf-8", newline="") as handle:
            return list(csv.DictReader(handle))
    except OSError as e:
        raise ArtifactError(f"cannot read {path.name}: {e}", path=str(path)) from e


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


class RunManifest:
    """
    manifest.json of a run directory.

    Written once at start (status "running") and rewritten at the end with
    the terminal status, protocol outcome and error statistics.
    """

    def __init__(self, run_dir: Path, config: Dict[str, Any], config_hash: str, seed: int, protocol: str,
                 version: str = ARTIFACT_VERSION):
        self.path = Path(run_dir) / MANIFEST_FILE
        self.data: Dict[str, Any] = OrderedDict(
            protocol=protocol,
            seed=seed,
            config_hash=config_hash,
            artifact_version=version,
            config=config,
            started=None,
            finished=None,
            status="created",
            outcome={},
            files=[],
        )

    def start(self):
        self.data["started"] = _utc_now()
        self.data["status"] = "running"
        self.write()

    def finish(self, status: str, outcome: Optional[Dict[str, Any]] = None, exit_code: int = 0,
               error: Optional[Dict[str, Any]] = None):
        self.data["finished"] = _utc_now()
        self.data["status"] = status
        self.data["exit_code"] = exit_code
        self.data["outcome"] = outcome or {}
        if error is not None:
            self.data["error"] = error
        run_dir = self.path.parent
        self.data["files"] = sorted(p.relative_to(run_dir).as_posix() for p in run_dir.rglob("*")
                                    if p.is_file() and p.name != MANIFEST_FILE)
        self.write()

    def write(self):
        write_json(self.path, dict(self.data))


def load_manifest(run_dir: Path) -> Dict[str, Any]:
    path = Path(run_dir) / MANIFEST_FILE
    try:
        with open(path, "r", encoding="utf-8") as handle:
            return json.load(handle)
    except (OSError, json.JSONDecodeError) as e:
        raise ArtifactError(f"cannot read manifest: {e}", path=str(path)) from e


# ---------------------------------------------------------------------------
# Plot export
# ---------------------------------------------------------------------------

PlotTable = Dict[str, List[Tuple[int, float]]]


def smooth(values: Sequence[float], alpha: float) -> List[float]:
    """Exponential moving average s_t = alpha * x_t + (1 - alpha) * s_{t-1}, s_0 = x_0."""
    out: List[float] = []
    for value in values:
        out.append(value if not out else alpha * value + (1.0 - alpha) * out[-1])
    return out


def _columns(table: PlotTable, rows: List[Dict[str, str]],
             columns: Sequence[str], prefix: str = "", step_key: str = "step"):
    for column in columns:
        table[prefix + column] = [(int(row[step_key]), float(row[column])) for row in rows]


def _rq1_series(table, rows: List[Dict[str, str]], smoothing: float):
    sites = list(OrderedDict.fromkeys(row["site"] for row in rows))
    for site in sites:
        picked = [row for row in rows if row["site"] == site]
        steps = [int(row["microstep"]) for row in picked]
        freq = [float(row["freq"]) for row in picked]
        table[f"freq/{site}"] = list(zip(steps, freq))
        table[f"sev/{site}"] = [(s, float(row["sev"])) for s, row in zip(steps, picked)]
        table[f"freq_smoothed/{site}"] = list(zip(steps, smooth(freq, smoothing)))


def _abft_series(table, rows: List[Dict[str, str]]):
    sites = sorted({row["site"] for row in rows})
    for site in sites:
        per_step: "OrderedDict[int, float]" = OrderedDict()
        for row in rows:
            if row["site"] == site:
                step = int(row["step"])
                per_step[step] = per_step.get(step, 0.0) + float(row["flags"])
        table[f"abft_flags/{site}"] = sorted(per_step.items())


def collect_plotdata(run_dir: Path, smoothing: float = 0.1) -> PlotTable:
    """series -> [(step, value)] for every metric file present in the run directory."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ArtifactError("run directory does not exist", path=str(run_dir))
    table: PlotTable = OrderedDict()
    found = []
    sources = (
        ("rq1.csv", lambda rows: _rq1_series(table, rows, smoothing)),
        ("rq2.csv", lambda rows: _columns(table, rows, RQ2_COLUMNS[1:])),
        ("rq3.csv", lambda rows: _columns(table, rows, RQ3_COLUMNS[1:])),
        ("rq3_baseline.csv", lambda rows: _columns(table, rows, ("param_diff_l2",), prefix="baseline_")),
        ("shadow.csv", lambda rows: _columns(table, rows, ("alarm",))),
        ("abft.csv", lambda rows: _abft_series(table, rows)),
    )
    for name, collect in sources:
        path = run_dir / name
        if path.is_file():
            found.append(name)
            try:
                collect(read_csv(path))
            except (KeyError, ValueError) as e:
                raise ArtifactError(f"malformed metric file {name}: {e}", path=str(path)) from e
    if not found:
        raise ArtifactError("no metric files in run directory", path=str(run_dir))
    logger.debug(f"Collected {len(table)} series from {found}")
    return table


def export_plotdata(run_dir: Path, smoothing: float = 0.1, out: Optional[Path] = None) -> Path:
    """Write the long-format table (step, series, value) and return its path."""
    table = collect_plotdata(run_dir, smoothing)
    path = Path(out) if out else Path(run_dir) / PLOTDATA_FILE
    with CsvWriter(path, ("step", "series", "value")) as writer:
        for series, points in table.items():
            for step, value in points:
                writer.write((step, series, value))
    logger.info(f"Exported {len(table)} series ({writer.rows} rows) to {path}")
    return path


def read_plotdata(path: Path) -> PlotTable:
    table: PlotTable = OrderedDict()
    for row in read_csv(Path(path)):
        table.setdefault(row["series"], []).append((int(row["step"]), float(row["value"])))
    return table


def render_plot(table: PlotTable, path: Path) -> Path:
    """One panel per series family (name before '/'), Agg backend."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    families: "OrderedDict[str, List[str]]" = OrderedDict()
    for series in table:
        families.setdefault(series.split("/")[0], []).append(series)
    fig, axes = plt.subplots(len(families), 1, figsize=(8, 2.6 * len(families)), squeeze=False)
    for ax, (family, members) in zip(axes[:, 0], families.items()):
        for series in members:
            steps = [s for s, _ in table[series]]
            values = [v for _, v in table[series]]
            ax.plot(steps, values, label=series, linewidth=1.0)
        ax.set_title(family)
        ax.set_xlabel("step")
        if len(members) > 1:
            ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    logger.info(f"Plot written to {path}")
    return Path(path)
