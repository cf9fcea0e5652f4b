#!/usr/bin/env python3
"""
Lock-step Component

Paired healthy/unhealthy training. Both nodes start from bit-identical
parameters and consume identical microbatches; the unhealthy node carries an
injector. Four protocols are built on the pair:

- rq1: compare and overwrite every hook tensor before its reduce-scatter,
  reporting mismatch frequency/severity per (site, microstep)
- rq2: free forward/backward on both nodes, compare accumulated gradients,
  then broadcast the healthy parameters over the unhealthy ones
- rq3: free-running training, tracking parameter drift and both losses
- shadow: a duplicate data-parallel replica recomputes the target's
  microbatches and alarms on any gradient bit difference

Runs are iterables: iterating executes the training loop and yields one row
per report. `events` holds the injector ground truth and `outcome` a summary
once iteration is finished.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from .collectives import Mesh
from .data import SyntheticTokenStream
from .error_handler import ContractViolation, InvariantViolation, NumericalFailure
from .inject import HOOK_SITES, EventLog, Injector, SdcProfile
from .metrics import MismatchReport, Referee, SeverityAverage, SubmoduleCapture, gradient_ratio
from .model import (
    HOOK_KINDS,
    ExecutionContext,
    ForwardResult,
    HookFn,
    HookKind,
    HookSite,
    MatmulFn,
    Microstep,
    ModelConfig,
    Params,
    backward,
    copy_params,
    forward,
    init_params,
)
from .optimizer import (
    AdamHyper,
    AdamState,
    LrSchedule,
    StepStats,
    accumulate_gradients,
    adam_step,
    global_grad_norm,
    lr_at,
    param_diff_l2,
)
from .tensor import DType, round_bf16

logger = logging.getLogger(__name__)

StepCallback = Callable[[int, Dict[str, Params]], None]


@dataclass(frozen=True)
class TrainingSettings:
    """Everything a protocol needs besides the SDC profile."""
    model: ModelConfig = field(default_factory=ModelConfig)
    hyper: AdamHyper = field(default_factory=AdamHyper)
    schedule: LrSchedule = field(default_factory=lambda: LrSchedule(total_steps=200))
    seed: int = 0
    workers: int = 1
    severity_average: SeverityAverage = SeverityAverage.MISMATCHING
    initial: Optional[Params] = field(default=None, compare=False, repr=False)
    progress: bool = False

    @property
    def steps(self) -> int:
        return self.schedule.total_steps

    def initial_params(self) -> Params:
        """Fresh copy of the starting parameters (snapshot if given, else seeded init)."""
        if self.initial is None:
            return init_params(self.model, self.seed)
        params = copy_params(self.initial)
        if self.model.dtype == DType.BF16EMU:
            params = {name: round_bf16(value) for name, value in params.items()}
        return params


def params_bit_equal(a: Params, b: Params) -> bool:
    return first_difference(a, b) is None


def first_difference(a: Params, b: Params) -> Optional[str]:
    """Name of the first tensor (ascending names) whose stored bits differ."""
    for name in sorted(set(a) | set(b)):
        if name not in a or name not in b:
            return name
        if a[name].shape != b[name].shape or a[name].tobytes() != b[name].tobytes():
            return name
    return None


def mean_loss(losses: List[float]) -> float:
    total = 0.0
    for loss in losses:
        total += loss
    return total / len(losses)


# ---------------------------------------------------------------------------
# Nodes and the hook exchange
# ---------------------------------------------------------------------------

class Exchange:
    """
    Hook-site rendezvous between the two nodes.

    The healthy node publishes each hook tensor list; the unhealthy node
    receives it at the same (kind, layer). Receiving something that was never
    published means the nodes are no longer in lock step.
    """

    def __init__(self):
        self._slots: Dict[Tuple[HookKind, int], List[np.ndarray]] = {}

    def publish(self, kind: HookKind, layer: int, tensors: List[np.ndarray]) -> List[np.ndarray]:
        key = (kind, layer)
        if key in self._slots:
            raise ContractViolation("hook site published twice", kind=kind.value, layer=layer)
        self._slots[key] = [np.array(t, copy=True) for t in tensors]
        return tensors

    def receive(self, kind: HookKind, layer: int) -> List[np.ndarray]:
        try:
            return self._slots.pop((kind, layer))
        except KeyError:
            raise ContractViolation("hook site was never published by the healthy node",
                                    kind=kind.value, layer=layer) from None

    @property
    def pending(self) -> int:
        return len(self._slots)

    def clear(self):
        self._slots.clear()


class Node:
    """
    One simulated machine: parameters, optimizer state, data stream and
    optional injector. `role_hook` runs after the injector at every hook.
    """

    def __init__(self, name: str, settings: TrainingSettings, params: Params, mesh: Mesh,
                 profile: Optional[SdcProfile] = None, log: Optional[EventLog] = None,
                 data_rank: int = 0, data_seed: Optional[int] = None):
        self.name = name
        self.settings = settings
        self.config = settings.model
        self.params = params
        self.state = AdamState.zeros(params)
        self.mesh = mesh
        self.stream = SyntheticTokenStream.for_model(
            self.config, settings.seed if data_seed is None else data_seed, data_rank)
        self.injector: Optional[Injector] = None
        if profile is not None and not profile.is_null():
            self.injector = Injector(profile, self.config.dtype, log)
        self.matmul: Optional[MatmulFn] = (
            self.injector.matmul if self.injector is not None and self.injector.corrupts_matmuls else None
        )
        self.role_hook: Optional[HookFn] = None
        self.microstep: Optional[Microstep] = None

    def _hook(self, kind: HookKind, layer: int, tensors: List[np.ndarray]) -> List[np.ndarray]:
        if self.injector is not None:
            tensors = self.injector.corrupt_hook(kind, layer, tensors)
        if self.role_hook is not None:
            tensors = self.role_hook(kind, layer, tensors)
        return tensors

    def context(self) -> ExecutionContext:
        hooked = self.injector is not None or self.role_hook is not None
        return ExecutionContext(mesh=self.mesh, dtype=self.config.dtype,
                                hook=self._hook if hooked else None, matmul=self.matmul)

    def begin(self, microstep: Microstep):
        self.microstep = microstep
        if self.injector is not None:
            self.injector.begin(microstep)

    def _located(self, exc: NumericalFailure) -> NumericalFailure:
        return exc.at(node=self.name, step=self.microstep.step, microstep=self.microstep.index)

    def forward(self) -> ForwardResult:
        inputs, labels = self.stream.batch(self.microstep.step, self.microstep.accum)
        try:
            return forward(self.params, inputs, labels, self.config, self.context())
        except NumericalFailure as exc:
            raise self._located(exc) from exc

    def backward(self, result: ForwardResult) -> Params:
        try:
            return backward(self.params, result.cache, self.config, self.context())
        except NumericalFailure as exc:
            raise self._located(exc) from exc

    def train_microstep(self, microstep: Microstep) -> Tuple[float, Params]:
        self.begin(microstep)
        result = self.forward()
        return result.loss, self.backward(result)

    def train_step(self, step: int) -> Tuple[float, Params]:
        """Mean loss and accumulated (pre-clip) gradients of one optimizer step."""
        accum = self.config.grad_accum
        losses, grads = [], []
        for a in range(accum):
            loss, g = self.train_microstep(Microstep.of(step, a, accum))
            losses.append(loss)
            grads.append(g)
        return mean_loss(losses), accumulate_gradients(grads)

    def apply(self, grads: Params, step: int) -> StepStats:
        lr = lr_at(step, self.settings.hyper.lr, self.settings.schedule)
        try:
            self.params, self.state, stats = adam_step(self.params, grads, self.state,
                                                       self.settings.hyper, lr, self.config.dtype)
        except NumericalFailure as exc:
            raise exc.at(node=self.name, step=step) from exc
        return stats


class ProtocolRun:
    """Base of the paired protocols: owns the mesh, the event log and the step loop."""

    protocol = ""

    def __init__(self, settings: TrainingSettings, profile: SdcProfile,
                 on_step: Optional[StepCallback] = None):
        self.settings = settings
        self.profile = profile
        self.on_step = on_step
        self.events = EventLog()
        self.outcome: Dict[str, Any] = {}

    def _steps(self):
        return tqdm(range(self.settings.steps), desc=self.protocol, unit="step",
                    disable=not self.settings.progress, leave=False)

    def _pair(self, mesh: Mesh) -> Tuple[Node, Node]:
        start = self.settings.initial_params()
        healthy = Node("healthy", self.settings, start, mesh)
        unhealthy = Node("unhealthy", self.settings, copy_params(start), mesh,
                         profile=self.profile, log=self.events)
        return healthy, unhealthy

    def _notify(self, step: int, nodes: Dict[str, Params]):
        if self.on_step is not None:
            self.on_step(step, nodes)

    def __iter__(self) -> Iterator[Any]:
        logger.info(f"Starting {self.protocol} with profile '{self.profile.name}' "
                    f"for {self.settings.steps} steps")
        with Mesh(self.settings.model.tp_degree, self.settings.workers) as mesh:
            yield from self._run(mesh)
        logger.info(f"Finished {self.protocol}: {len(self.events)} fault events")

    def _run(self, mesh: Mesh) -> Iterator[Any]:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# rq1: computation synchronization
# ---------------------------------------------------------------------------

class _Comparator:
    """Unhealthy-side hook: capture against the healthy tensors, then overwrite."""

    def __init__(self, exchange: Exchange):
        self.exchange = exchange
        self.microstep: Optional[Microstep] = None
        self.captures: Dict[HookKind, List[SubmoduleCapture]] = {}

    def begin(self, microstep: Microstep):
        self.microstep = microstep
        self.captures = {kind: [] for kind in HOOK_KINDS}

    def __call__(self, kind: HookKind, layer: int, tensors: List[np.ndarray]) -> List[np.ndarray]:
        healthy = self.exchange.receive(kind, layer)
        for rank, (h, u) in enumerate(zip(healthy, tensors)):
            self.captures[kind].append(SubmoduleCapture(HookSite(kind, layer, rank), self.microstep, h, u))
        return [np.array(h, copy=True) for h in healthy]


class Rq1Run(ProtocolRun):
    """Yields one MismatchReport per (site kind, microstep)."""

    protocol = "rq1"

    def __init__(self, settings: TrainingSettings, profile: SdcProfile,
                 on_step: Optional[StepCallback] = None):
        super().__init__(settings, profile, on_step)
        self.referee = Referee(settings.model, settings.severity_average)
        self.check_containment = set(profile.sites) <= set(HOOK_SITES)

    def _run(self, mesh: Mesh) -> Iterator[MismatchReport]:
        healthy, unhealthy = self._pair(mesh)
        exchange = Exchange()
        comparator = _Comparator(exchange)
        healthy.role_hook = exchange.publish
        unhealthy.role_hook = comparator
        accum = self.settings.model.grad_accum

        for step in self._steps():
            h_grads, u_grads = [], []
            for a in range(accum):
                microstep = Microstep.of(step, a, accum)
                exchange.clear()
                comparator.begin(microstep)
                healthy.begin(microstep)
                unhealthy.begin(microstep)
                h_fwd = healthy.forward()
                u_fwd = unhealthy.forward()
                h_grads.append(healthy.backward(h_fwd))
                u_grads.append(unhealthy.backward(u_fwd))
                if exchange.pending:
                    raise InvariantViolation("healthy hook tensors left uncompared",
                                             pending=exchange.pending, microstep=microstep.index)
                for kind in HOOK_KINDS:
                    yield self.referee.report(kind, microstep, comparator.captures[kind])

            healthy.apply(accumulate_gradients(h_grads), step)
            unhealthy.apply(accumulate_gradients(u_grads), step)
            if self.check_containment and not params_bit_equal(healthy.params, unhealthy.params):
                raise InvariantViolation("containment broken: parameters diverged under hook overwrite",
                                         step=step, tensor=first_difference(healthy.params, unhealthy.params))
            self._notify(step, {"healthy": healthy.params, "unhealthy": unhealthy.params})

        self.outcome = {"status": "completed", "containment_checked": self.check_containment,
                        "events": len(self.events)}


def rq1_summary(reports: List[MismatchReport]) -> Dict[str, Dict[str, float]]:
    """Per site kind: mean frequency over microsteps and max severity over microsteps."""
    summary = {}
    for kind in HOOK_KINDS:
        rows = [r for r in reports if r.site == kind]
        total = 0.0
        for row in rows:
            total += row.freq
        summary[kind.value] = {
            "microsteps": len(rows),
            "mean_freq": total / len(rows) if rows else 0.0,
            "max_sev": max((r.sev for r in rows), default=0.0),
            "mismatching_microsteps": sum(1 for r in rows if r.freq > 0),
            "zero_reference_count": sum(r.zero_reference_count for r in rows),
        }
    return summary


def run_rq1(settings: TrainingSettings, profile: SdcProfile,
            on_step: Optional[StepCallback] = None) -> Rq1Run:
    return Rq1Run(settings, profile, on_step)


# ---------------------------------------------------------------------------
# rq2: gradient noise under parameter synchronization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GradientRow:
    step: int
    diff_l2: float
    truth_l2: float
    ratio: float
    wcnts: float
    degenerate: bool = False


class Rq2Run(ProtocolRun):
    """Yields one GradientRow per optimizer step."""

    protocol = "rq2"

    def _run(self, mesh: Mesh) -> Iterator[GradientRow]:
        healthy, unhealthy = self._pair(mesh)
        worst = 0.0
        degenerate_steps = []
        for step in self._steps():
            _, truth = healthy.train_step(step)
            truth_l2 = global_grad_norm(truth)
            try:
                _, noisy = unhealthy.train_step(step)
                diff_l2 = param_diff_l2(noisy, truth)
            except NumericalFailure as exc:
                logger.warning(f"Unhealthy gradients non-finite at step {step}: {exc}")
                diff_l2 = math.inf
            if math.isnan(diff_l2):
                diff_l2 = math.inf
            ratio, degenerate = gradient_ratio(diff_l2, truth_l2)
            degenerate = degenerate or not math.isfinite(ratio)
            if degenerate:
                degenerate_steps.append(step)
                logger.warning(f"Degenerate gradient ratio at step {step}: diff={diff_l2} truth={truth_l2}")
            else:
                worst = max(worst, ratio)

            healthy.apply(truth, step)
            unhealthy.params = {name: mesh.broadcast(value, ("unhealthy",))["unhealthy"]
                                for name, value in healthy.params.items()}
            if not params_bit_equal(healthy.params, unhealthy.params):
                raise InvariantViolation("parameters differ right after broadcast", step=step)
            self._notify(step, {"healthy": healthy.params, "unhealthy": unhealthy.params})
            yield GradientRow(step=step, diff_l2=diff_l2, truth_l2=truth_l2, ratio=ratio,
                              wcnts=worst, degenerate=degenerate)

        self.outcome = {"status": "completed", "wcnts": worst, "degenerate_steps": degenerate_steps,
                        "events": len(self.events)}


def run_rq2(settings: TrainingSettings, profile: SdcProfile,
            on_step: Optional[StepCallback] = None) -> Rq2Run:
    return Rq2Run(settings, profile, on_step)


# ---------------------------------------------------------------------------
# rq3: free-running drift
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DriftRow:
    step: int
    param_diff_l2: float
    loss_healthy: float
    loss_unhealthy: float
    gnorm_healthy: float
    gnorm_unhealthy: float


@dataclass(frozen=True)
class BaselineRow:
    step: int
    param_diff_l2: float


class Rq3Run(ProtocolRun):
    """
    Yields one DriftRow per optimizer step.

    A numerical failure on the unhealthy node ends the run with outcome
    `unhealthy_diverged`; one on the healthy node propagates. With
    seed_baseline a third healthy node trains on a different data seed and
    its drift from the healthy node is collected in `baseline`.
    """

    protocol = "rq3"

    def __init__(self, settings: TrainingSettings, profile: SdcProfile,
                 on_step: Optional[StepCallback] = None, seed_baseline: bool = False,
                 baseline_seed_offset: int = 1, loss_spike_ratio: float = 2.0):
        super().__init__(settings, profile, on_step)
        if not loss_spike_ratio > 1.0:
            raise ContractViolation("loss_spike_ratio must be > 1", loss_spike_ratio=loss_spike_ratio)
        self.seed_baseline = seed_baseline
        self.baseline_seed_offset = baseline_seed_offset
        self.loss_spike_ratio = loss_spike_ratio
        self.baseline: List[BaselineRow] = []

    def _run(self, mesh: Mesh) -> Iterator[DriftRow]:
        healthy, unhealthy = self._pair(mesh)
        baseline = None
        if self.seed_baseline:
            baseline = Node("baseline", self.settings, copy_params(healthy.params), mesh,
                            data_seed=self.settings.seed + self.baseline_seed_offset)
        spikes = []
        self.outcome = {"status": "completed"}

        for step in self._steps():
            loss_h, grads_h = healthy.train_step(step)
            stats_h = healthy.apply(grads_h, step)
            try:
                loss_u, grads_u = unhealthy.train_step(step)
                stats_u = unhealthy.apply(grads_u, step)
            except NumericalFailure as exc:
                logger.warning(f"Unhealthy trajectory diverged at step {step}: {exc}")
                self.outcome = {"status": "unhealthy_diverged", "diverged_step": step,
                                "location": {k: str(v) for k, v in exc.location.items()}}
                break

            if loss_u > self.loss_spike_ratio * loss_h:
                spikes.append(step)
                logger.warning(f"Loss spike at step {step}: unhealthy {loss_u:.4f} vs healthy {loss_h:.4f}")
            if baseline is not None:
                _, grads_b = baseline.train_step(step)
                baseline.apply(grads_b, step)
                self.baseline.append(BaselineRow(step, param_diff_l2(baseline.params, healthy.params)))

            self._notify(step, {"healthy": healthy.params, "unhealthy": unhealthy.params})
            yield DriftRow(step=step, param_diff_l2=param_diff_l2(unhealthy.params, healthy.params),
                           loss_healthy=loss_h, loss_unhealthy=loss_u,
                           gnorm_healthy=stats_h.grad_norm, gnorm_unhealthy=stats_u.grad_norm)

        self.outcome["loss_spikes"] = spikes
        self.outcome["events"] = len(self.events)


def run_rq3(settings: TrainingSettings, profile: SdcProfile, on_step: Optional[StepCallback] = None,
            **kwargs: Any) -> Rq3Run:
    return Rq3Run(settings, profile, on_step, **kwargs)


# ---------------------------------------------------------------------------
# Shadow data-parallel replica
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ShadowRow:
    step: int
    alarm: bool
    first_diff_tensor: str = ""


class ShadowRun(ProtocolRun):
    """
    Two data-parallel replicas (replica 0 healthy, replica 1 the unhealthy
    target) plus a healthy shadow that recomputes replica 1's microbatches.
    Target and shadow gradients are compared bitwise per microstep before
    the data-parallel average; the average itself uses the target's
    gradients, as production training would.
    """

    protocol = "shadow"

    def _run(self, mesh: Mesh) -> Iterator[ShadowRow]:
        start = self.settings.initial_params()
        replica = Node("replica0", self.settings, start, mesh, data_rank=0)
        target = Node("target", self.settings, copy_params(start), mesh,
                      profile=self.profile, log=self.events, data_rank=1)
        shadow = Node("shadow", self.settings, copy_params(start), mesh, data_rank=1)
        accum = self.settings.model.grad_accum
        alarm_steps = []

        for step in self._steps():
            first_diff = None
            replica_grads, target_grads = [], []
            for a in range(accum):
                microstep = Microstep.of(step, a, accum)
                replica_grads.append(replica.train_microstep(microstep)[1])
                g_target = target.train_microstep(microstep)[1]
                g_shadow = shadow.train_microstep(microstep)[1]
                target_grads.append(g_target)
                if first_diff is None:
                    first_diff = first_difference(g_target, g_shadow)

            averaged = {}
            g0, g1 = accumulate_gradients(replica_grads), accumulate_gradients(target_grads)
            for name in g0:
                total = mesh.all_reduce([g0[name], g1[name]])[0]
                averaged[name] = total / total.dtype.type(2)
            replica.apply(averaged, step)
            for node in (target, shadow):
                node.params = copy_params(replica.params)
                node.state = replica.state.copy()

            alarm = first_diff is not None
            if alarm:
                alarm_steps.append(step)
                logger.info(f"Shadow alarm at step {step}: first differing gradient {first_diff}")
            self._notify(step, {"healthy": replica.params})
            yield ShadowRow(step=step, alarm=alarm, first_diff_tensor=first_diff or "")

        self.outcome = {"status": "completed", "alarms": len(alarm_steps), "alarm_steps": alarm_steps,
                        "event_steps": self.events.steps_with_events(), "events": len(self.events)}


def run_shadow_detect(settings: TrainingSettings, profile: SdcProfile,
                      on_step: Optional[StepCallback] = None) -> ShadowRun:
    return ShadowRun(settings, profile, on_step)
