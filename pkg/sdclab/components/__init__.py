"""
Components of the sdclab simulator.

Available components:
- tensor: deterministic kernels, bf16 emulation and seeded random streams
- collectives: simulated intra-node ranks and their collectives
- model: tensor-parallel decoder, backward pass and gradient check
- optimizer: Adam, clipping and the learning-rate schedule
- inject: SDC profiles, injection, event log and calibration
- metrics: mismatch frequency/severity and gradient noise ratios
- lockstep: paired healthy/unhealthy training protocols
- abft: checksummed matmul, precision gate and flag reports
- run_config / artifacts / snapshot: configuration and run files
"""

from .abft import AbftCheck, AbftMonitor, RoundoffConvention, checked_matmul, estimate_row_sum_shift, flag_rate_report, precision_gate, run_abft, unit_roundoff
from .collectives import Mesh
from .error_handler import ArtifactError, ConfigError, ContractViolation, ErrorCategory, ErrorHandler, ErrorInfo, ErrorSeverity, InvariantViolation, NumericalFailure, PrecisionUnsupported, SdcLabError, error_handler, with_error_boundary
from .inject import EventLog, FaultEvent, Injector, SdcProfile, burst_steps, calibrate, corrupt, corrupt_matmul_accumulator, load_preset, load_presets, replay
from .lockstep import TrainingSettings, run_rq1, run_rq2, run_rq3, run_shadow_detect
from .metrics import MismatchReport, Referee, SeverityAverage, SubmoduleCapture, gradient_ratio, mismatch_frequency, mismatch_severity, wcnts
from .model import ModelConfig, backward, forward, gradient_check, init_params
from .optimizer import AdamHyper, AdamState, LrSchedule, adam_step, lr_at
from .run_config import RunConfig, parse_config
from .tensor import DType, Rng, matmul, round_bf16

__all__ = [
    'AbftCheck', 'AbftMonitor', 'RoundoffConvention', 'checked_matmul', 'estimate_row_sum_shift',
    'flag_rate_report', 'precision_gate', 'run_abft', 'unit_roundoff',
    'Mesh',
    'ArtifactError', 'ConfigError', 'ContractViolation', 'ErrorCategory', 'ErrorHandler', 'ErrorInfo',
    'ErrorSeverity', 'InvariantViolation', 'NumericalFailure', 'PrecisionUnsupported', 'SdcLabError',
    'error_handler', 'with_error_boundary',
    'EventLog', 'FaultEvent', 'Injector', 'SdcProfile', 'burst_steps', 'calibrate', 'corrupt',
    'corrupt_matmul_accumulator', 'load_preset', 'load_presets', 'replay',
    'TrainingSettings', 'run_rq1', 'run_rq2', 'run_rq3', 'run_shadow_detect',
    'MismatchReport', 'Referee', 'SeverityAverage', 'SubmoduleCapture', 'gradient_ratio',
    'mismatch_frequency', 'mismatch_severity', 'wcnts',
    'ModelConfig', 'backward', 'forward', 'gradient_check', 'init_params',
    'AdamHyper', 'AdamState', 'LrSchedule', 'adam_step', 'lr_at',
    'RunConfig', 'parse_config',
    'DType', 'Rng', 'matmul', 'round_bf16',
]
