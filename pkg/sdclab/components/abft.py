#!/usr/bin/env python3
"""
ABFT Component

Checksummed matrix multiplication. For C = AB and the all-ones vector w the
check compares ||Cw - A(Bw)||_inf against tau * ||A||_inf * ||B||_inf with
tau = k * u, where k is the contraction length and u the unit roundoff of
the compute datatype. Verdicts are only issued when k * u <= 0.01; above
that the rounding bound no longer holds and the check refuses to run.
"""

import logging
import math
import threading
from dataclasses import dataclass
from decimal import ROUND_HALF_EVEN, Decimal
from enum import Enum
from typing import Callable, Dict, Iterator, List, NamedTuple, Optional, Tuple

import numpy as np
from tqdm import tqdm

from .collectives import Mesh
from .error_handler import ContractViolation, PrecisionUnsupported
from .inject import EventLog
from .lockstep import Node
from .model import MatmulSite, Microstep
from .optimizer import accumulate_gradients
from .tensor import DType, matmul, matmul_accumulator, norms

logger = logging.getLogger(__name__)

GATE_LIMIT = 0.01

_FRAMEWORK_EPS = {
    DType.F32: 2.0 ** -23,
    DType.BF16EMU: 2.0 ** -7,
    DType.F16: 2.0 ** -10,
}


class RoundoffConvention(str, Enum):
    FRAMEWORK_EPS = "framework_eps"
    CLASSICAL = "classical"


def unit_roundoff(dtype, convention: RoundoffConvention = RoundoffConvention.FRAMEWORK_EPS) -> float:
    """Machine epsilon of the datatype (framework convention) or half of it (classical)."""
    try:
        eps = _FRAMEWORK_EPS[DType(dtype)]
    except (ValueError, KeyError):
        raise ContractViolation("unknown datatype for unit roundoff", dtype=str(dtype)) from None
    if RoundoffConvention(convention) == RoundoffConvention.CLASSICAL:
        return eps / 2.0
    return eps


def precision_gate(n: int, u: float) -> bool:
    """n * u <= 0.01"""
    if n < 1:
        raise ContractViolation("contraction length must be >= 1", n=n)
    return n * u <= GATE_LIMIT


@dataclass(frozen=True)
class AbftCheck:
    m: int
    k: int
    n: int
    u: float
    tau: float
    lhs: float
    rhs: float
    flagged: bool
    gate_ok: bool


def checked_matmul(a: np.ndarray, b: np.ndarray,
                   compute: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None,
                   dtype: DType = DType.F32,
                   convention: RoundoffConvention = RoundoffConvention.FRAMEWORK_EPS
                   ) -> Tuple[np.ndarray, AbftCheck]:
    """C = AB (through `compute` when given) together with its checksum verdict."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractViolation("checked matmul shape mismatch", a_shape=a.shape, b_shape=b.shape)
    if a.dtype != np.float32 or b.dtype != np.float32:
        raise ContractViolation("checked matmul expects f32 operands",
                                a_dtype=str(a.dtype), b_dtype=str(b.dtype))
    m, k = a.shape
    n = b.shape[1]
    u = unit_roundoff(dtype, convention)
    if not precision_gate(k, u):
        raise PrecisionUnsupported(f"k*u = {k * u:.4g} exceeds {GATE_LIMIT}", k=k, dtype=DType(dtype).value)

    c = compute(a, b) if compute is not None else matmul(a, b, DType.F32)
    w = np.ones((n, 1), dtype=np.float32)
    with np.errstate(over="ignore", invalid="ignore"):
        cw = matmul_accumulator(c, w)
        abw = matmul_accumulator(a, matmul_accumulator(b, w))
        residual = cw.astype(np.float64) - abw.astype(np.float64)
    lhs = float(np.max(np.abs(residual))) if residual.size else 0.0
    tau = k * u
    rhs = tau * norms(a).inf * norms(b).inf
    flagged = bool(lhs > rhs) or math.isnan(lhs)
    return c, AbftCheck(m=m, k=k, n=n, u=u, tau=tau, lhs=lhs, rhs=rhs, flagged=flagged, gate_ok=True)


# ---------------------------------------------------------------------------
# Monitoring a training run
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AbftRecord:
    step: int
    microstep: int
    layer: int
    rank: int
    site: str
    check: AbftCheck


def site_label(site: MatmulSite) -> str:
    return f"{site.name}/{site.direction.value}"


class AbftMonitor:
    """
    Matmul wrapper that checksums every linear-layer product.

    Attention score/context products are not linear layers and pass through
    unchecked. An inner matmul function (e.g. an injector's) computes C, so
    faults inside the product are visible to the check while faults applied
    to outputs afterwards are not.
    """

    def __init__(self, inner: Optional[Callable[[np.ndarray, np.ndarray, MatmulSite], np.ndarray]] = None,
                 dtype: DType = DType.F32,
                 convention: RoundoffConvention = RoundoffConvention.FRAMEWORK_EPS):
        self.inner = inner
        self.dtype = DType(dtype)
        self.convention = RoundoffConvention(convention)
        self._records: List[AbftRecord] = []
        self._lock = threading.Lock()
        self._microstep: Optional[Microstep] = None

    def begin(self, microstep: Microstep):
        self._microstep = microstep

    def _compute(self, a: np.ndarray, b: np.ndarray, site: MatmulSite) -> np.ndarray:
        if self.inner is None:
            return matmul(a, b, DType.F32)
        return self.inner(a, b, site)

    def matmul(self, a: np.ndarray, b: np.ndarray, site: MatmulSite) -> np.ndarray:
        if not site.linear:
            return self._compute(a, b, site)
        if self._microstep is None:
            raise ContractViolation("ABFT monitor used before begin()")
        c, check = checked_matmul(a, b, compute=lambda x, y: self._compute(x, y, site),
                                  dtype=self.dtype, convention=self.convention)
        record = AbftRecord(step=self._microstep.step, microstep=self._microstep.index,
                            layer=site.layer, rank=site.rank, site=site_label(site), check=check)
        with self._lock:
            self._records.append(record)
        if check.flagged:
            logger.debug(f"ABFT flag at step {record.step} layer {record.layer} rank {record.rank} "
                         f"{record.site}: lhs={check.lhs:.3e} rhs={check.rhs:.3e}")
        return c

    def drain(self) -> List[AbftRecord]:
        """Return and forget the records so far, in deterministic order."""
        with self._lock:
            records, self._records = self._records, []
        return sorted(records, key=lambda r: (r.microstep, r.layer, r.rank, r.site))


@dataclass(frozen=True)
class AbftRow:
    step: int
    layer: int
    site: str
    checks: int
    flags: int
    max_lhs: float
    max_rhs: float


def flag_rate_report(records: List[AbftRecord]) -> List[AbftRow]:
    """Aggregate checks into per-(step, layer, site) rows; ranks and microsteps are pooled."""
    table: Dict[Tuple[int, int, str], List[AbftRecord]] = {}
    for record in records:
        table.setdefault((record.step, record.layer, record.site), []).append(record)
    rows = []
    for (step, layer, site) in sorted(table):
        group = table[(step, layer, site)]
        rows.append(AbftRow(
            step=step,
            layer=layer,
            site=site,
            checks=len(group),
            flags=sum(1 for r in group if r.check.flagged),
            max_lhs=max(r.check.lhs for r in group),
            max_rhs=max(r.check.rhs for r in group),
        ))
    return rows


class RowSumShift(NamedTuple):
    exact: Decimal
    rounded: Decimal


def estimate_row_sum_shift(rate: float, factor: float, places: int = 2) -> RowSumShift:
    """Worst-case row-sum change when every hit of a row lands in one row: rate * factor.

    Decimal arithmetic on the printed values, e.g. 4.78e-3 * 1120 = 5.3536 -> 5.35.
    """
    exact = Decimal(repr(rate)) * Decimal(repr(factor))
    rounded = exact.quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_EVEN)
    return RowSumShift(exact=exact, rounded=rounded)


# ---------------------------------------------------------------------------
# Training run with every linear layer checked
# ---------------------------------------------------------------------------

class AbftRun:
    """
    Single-node training of the profiled node with an AbftMonitor installed.

    Yields the aggregated flag rows of each optimizer step. Matmul-internal
    faults happen inside the checked product; hook-site faults are applied
    to outputs afterwards and are therefore invisible to the checksums.
    """

    protocol = "abft"

    def __init__(self, settings, profile, convention: RoundoffConvention = RoundoffConvention.FRAMEWORK_EPS,
                 on_step=None):
        self.settings = settings
        self.profile = profile
        self.convention = RoundoffConvention(convention)
        self.on_step = on_step
        self.events = EventLog()
        self.outcome: Dict[str, object] = {}
        self.checks = 0

    def __iter__(self) -> Iterator[AbftRow]:
        config = self.settings.model
        logger.info(f"Starting abft with profile '{self.profile.name}' at {config.dtype.value}")
        flagged_steps = []
        with Mesh(config.tp_degree, self.settings.workers) as mesh:
            node = Node("monitored", self.settings, self.settings.initial_params(), mesh,
                        profile=self.profile, log=self.events)
            monitor = AbftMonitor(inner=node.matmul, dtype=config.dtype, convention=self.convention)
            node.matmul = monitor.matmul
            steps = tqdm(range(self.settings.steps), desc=self.protocol, unit="step",
                         disable=not self.settings.progress, leave=False)
            for step in steps:
                grads = []
                for a in range(config.grad_accum):
                    microstep = Microstep.of(step, a, config.grad_accum)
                    monitor.begin(microstep)
                    grads.append(node.train_microstep(microstep)[1])
                node.apply(accumulate_gradients(grads), step)
                rows = flag_rate_report(monitor.drain())
                self.checks += sum(row.checks for row in rows)
                if any(row.flags for row in rows):
                    flagged_steps.append(step)
                if self.on_step is not None:
                    self.on_step(step, {"monitored": node.params})
                yield from rows
        self.outcome = {"status": "completed", "checks": self.checks, "flagged_steps": flagged_steps,
                        "events": len(self.events)}
        logger.info(f"Finished abft: {self.checks} checks, flags at {len(flagged_steps)} steps")


def run_abft(settings, profile, convention: RoundoffConvention = RoundoffConvention.FRAMEWORK_EPS,
             on_step=None) -> AbftRun:
    return AbftRun(settings, profile, convention, on_step)
