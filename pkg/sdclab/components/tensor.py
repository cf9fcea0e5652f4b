#!/usr/bin/env python3
"""
Tensor Kernels Component

Deterministic dense numeric kernels for the simulator. Tensors are plain
numpy arrays of 32-bit reals; the dtype tag (f32 or emulated bf16) travels
as a separate argument and only decides whether a kernel rounds its final
output to the bf16 grid.

Key responsibilities:
- Matmul with a fixed accumulation order (ascending contraction index)
- Sequential reductions used by every kernel that sums
- Software bf16 rounding (round to nearest, ties to even)
- Seeded, platform-stable random streams and weight initialization
- Elementwise kernels (softmax, layer norm, swish, SwiGLU, cross entropy)
  together with their backward counterparts
- Non-finite output detection (raised as NumericalFailure)
"""

import hashlib
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple, Tuple, Union

import numpy as np

from .error_handler import ContractViolation, NumericalFailure

logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-5
_MASK64 = (1 << 64) - 1


class DType(str, Enum):
    """Datatype tags; f16 only exists for the ABFT unit-roundoff table"""
    F32 = "f32"
    BF16EMU = "bf16emu"
    F16 = "f16"


class InitScheme(str, Enum):
    KAIMING_UNIFORM = "kaiming_uniform"
    XAVIER_UNIFORM = "xavier_uniform"


class Norms(NamedTuple):
    l2: float
    inf: float


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------

def stream_id(purpose: str, *coords: Union[int, str]) -> int:
    """Hash a purpose string and integer/string coordinates into a 64-bit stream id."""
    payload = repr((purpose,) + tuple(coords)).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


@dataclass(frozen=True)
class Rng:
    """A (seed, stream) pair; identical pairs give identical draws everywhere."""
    seed: int
    stream_id: int

    @classmethod
    def for_stream(cls, seed: int, purpose: str, *coords: Union[int, str]) -> "Rng":
        return cls(seed=seed, stream_id=stream_id(purpose, *coords))

    def generator(self, *keys: int) -> np.random.Generator:
        """Random-access child generator for the given integer keys."""
        entropy = [self.seed & _MASK64, self.stream_id & _MASK64]
        entropy.extend(int(key) & _MASK64 for key in keys)
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


# ---------------------------------------------------------------------------
# bf16 emulation and output finishing
# ---------------------------------------------------------------------------

def round_bf16(x):
    """Round 32-bit values to the bf16 grid, ties to even mantissa.

    Accepts a Python float (returns a float) or an array (returns a float32 array).
    """
    scalar = np.ndim(x) == 0 and not isinstance(x, np.ndarray)
    arr = np.atleast_1d(np.asarray(x, dtype=np.float32))
    bits = arr.view(np.uint32)
    lsb = (bits >> np.uint32(16)) & np.uint32(1)
    rounded = (bits + np.uint32(0x7FFF) + lsb) & np.uint32(0xFFFF0000)
    out = rounded.astype(np.uint32).view(np.float32).reshape(np.shape(x))
    if scalar:
        return float(out)
    return out


def on_bf16_grid(x: np.ndarray) -> bool:
    arr = np.asarray(x, dtype=np.float32)
    return bool(np.all(arr.view(np.uint32) & np.uint32(0xFFFF) == 0))


def finish(out: np.ndarray, dtype: DType, op: str) -> np.ndarray:
    """Final step of every kernel: reject non-finite values, then apply storage rounding."""
    if not np.all(np.isfinite(out)):
        raise NumericalFailure(f"non-finite output in {op}", op=op)
    if dtype == DType.BF16EMU and out.dtype == np.float32:
        return round_bf16(out)
    return out


# ---------------------------------------------------------------------------
# Reductions and matmul
# ---------------------------------------------------------------------------

def sequential_sum(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Sum along one axis by strictly ascending-index accumulation."""
    x = np.asarray(x)
    if x.shape[axis] == 0:
        shape = list(x.shape)
        del shape[axis]
        return np.zeros(shape, dtype=x.dtype)
    return np.take(np.add.accumulate(x, axis=axis), -1, axis=axis)


def _accumulate_products(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    n = b.shape[1]
    # The accumulator starts at +0 so an all-negative-zero sum comes out as +0.
    out = np.zeros((m, n), dtype=a.dtype)
    term = np.empty((m, n), dtype=a.dtype)
    for i in range(k):
        np.multiply(a[:, i:i + 1], b[i], out=term)
        out += term
    return out


def matmul_accumulator(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """C = AB before storage: ascending-k accumulation, no rounding, no finiteness check."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ContractViolation("matmul expects 2-D operands", a_shape=a.shape, b_shape=b.shape)
    if a.shape[1] != b.shape[0]:
        raise ContractViolation("matmul inner dimensions differ", a_shape=a.shape, b_shape=b.shape)
    if a.dtype != b.dtype:
        raise ContractViolation("matmul operands differ in dtype", a_dtype=str(a.dtype), b_dtype=str(b.dtype))
    return _accumulate_products(a, b)


def matmul(a: np.ndarray, b: np.ndarray, dtype: DType = DType.F32) -> np.ndarray:
    """C[i][j] = sum over k in ascending order of A[i][k]*B[k][j], in the operands' precision."""
    return finish(matmul_accumulator(a, b), dtype, "matmul")


def norms(a: np.ndarray) -> Norms:
    """L2 norm over all elements and the infinity norm.

    The infinity norm is the max absolute row sum for arrays with two or more
    dimensions (leading dimensions are folded into rows) and the max absolute
    entry for vectors.
    """
    x = np.asarray(a, dtype=np.float64)
    if x.size == 0:
        return Norms(0.0, 0.0)
    flat = x.ravel()
    l2 = math.sqrt(float(sequential_sum(flat * flat, axis=0)))
    if x.ndim <= 1:
        inf = float(np.max(np.abs(flat)))
    else:
        rows = np.abs(x.reshape(-1, x.shape[-1]))
        inf = float(np.max(sequential_sum(rows, axis=-1)))
    return Norms(l2=l2, inf=inf)


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def init_bound(fan_in: int, fan_out: int, scheme: InitScheme) -> float:
    if fan_in <= 0 or fan_out <= 0:
        raise ContractViolation("fans must be positive", fan_in=fan_in, fan_out=fan_out)
    if InitScheme(scheme) == InitScheme.XAVIER_UNIFORM:
        return math.sqrt(6.0 / (fan_in + fan_out))
    return math.sqrt(6.0 / fan_in)


def init_weight(fan_in: int, fan_out: int, scheme: InitScheme, rng: Rng,
                dtype: DType = DType.F32) -> np.ndarray:
    """Uniform [fan_in x fan_out] weight within the scheme's bound, reproducible from rng."""
    bound = init_bound(fan_in, fan_out, scheme)
    values = rng.generator().uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)
    return finish(values, dtype, "init_weight")


# ---------------------------------------------------------------------------
# Elementwise kernels
# ---------------------------------------------------------------------------

def add(a: np.ndarray, b: np.ndarray, dtype: DType = DType.F32) -> np.ndarray:
    return finish(np.add(a, b), dtype, "add")


def scale(a: np.ndarray, factor: float, dtype: DType = DType.F32) -> np.ndarray:
    return finish(a * a.dtype.type(factor), dtype, "scale")


def hadamard(a: np.ndarray, b: np.ndarray, dtype: DType = DType.F32) -> np.ndarray:
    return finish(np.multiply(a, b), dtype, "hadamard")


def _causal_mask(rows: int, cols: int) -> np.ndarray:
    return np.tril(np.ones((rows, cols), dtype=bool))


def causal_softmax(scores: np.ndarray, dtype: DType = DType.F32) -> np.ndarray:
    """Row softmax over the last axis where row i only sees columns j <= i."""
    mask = _causal_mask(*scores.shape[-2:])
    masked = np.where(mask, scores, scores.dtype.type(-np.inf))
    row_max = np.max(masked, axis=-1, keepdims=True)
    e = np.exp(masked - row_max)
    denom = sequential_sum(e, axis=-1)[..., None]
    return finish(e / denom, dtype, "causal_softmax")


def causal_softmax_backward(probs: np.ndarray, dprobs: np.ndarray,
                            dtype: DType = DType.F32) -> np.ndarray:
    inner = sequential_sum(probs * dprobs, axis=-1)[..., None]
    return finish(probs * (dprobs - inner), dtype, "causal_softmax_backward")


class LayerNormCache(NamedTuple):
    xhat: np.ndarray
    rstd: np.ndarray
    gain: np.ndarray


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray,
               dtype: DType = DType.F32, eps: float = LAYER_NORM_EPS) -> Tuple[np.ndarray, LayerNormCache]:
    """Normalize over the last axis, then apply gain and bias."""
    t = x.dtype.type
    width = t(x.shape[-1])
    mean = (sequential_sum(x, axis=-1) / width)[..., None]
    centered = x - mean
    var = (sequential_sum(centered * centered, axis=-1) / width)[..., None]
    rstd = t(1) / np.sqrt(var + t(eps))
    xhat = centered * rstd
    y = xhat * gain + bias
    return finish(y, dtype, "layer_norm"), LayerNormCache(xhat=xhat, rstd=rstd, gain=gain)


def layer_norm_backward(dy: np.ndarray, cache: LayerNormCache,
                        dtype: DType = DType.F32) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (dx, dgain, dbias); parameter grads are summed over all leading rows."""
    t = dy.dtype.type
    width = dy.shape[-1]
    dxhat = dy * cache.gain
    s1 = sequential_sum(dxhat, axis=-1)[..., None]
    s2 = sequential_sum(dxhat * cache.xhat, axis=-1)[..., None]
    dx = (cache.rstd / t(width)) * (t(width) * dxhat - s1 - cache.xhat * s2)
    rows_dy = dy.reshape(-1, width)
    rows_xhat = cache.xhat.reshape(-1, width)
    dgain = sequential_sum(rows_dy * rows_xhat, axis=0)
    dbias = sequential_sum(rows_dy, axis=0)
    return (finish(dx, dtype, "layer_norm_backward"),
            finish(dgain, dtype, "layer_norm_backward"),
            finish(dbias, dtype, "layer_norm_backward"))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    t = x.dtype.type
    return t(0.5) * (t(1) + np.tanh(t(0.5) * x))


def swish(x: np.ndarray, dtype: DType = DType.F32) -> np.ndarray:
    return finish(x * _sigmoid(x), dtype, "swish")


def swish_backward(x: np.ndarray, dy: np.ndarray, dtype: DType = DType.F32) -> np.ndarray:
    t = x.dtype.type
    s = _sigmoid(x)
    return finish(dy * (s + x * s * (t(1) - s)), dtype, "swish_backward")


def swiglu(gate: np.ndarray, up: np.ndarray, dtype: DType = DType.F32) -> np.ndarray:
    """swish(gate) * up"""
    return finish(gate * _sigmoid(gate) * up, dtype, "swiglu")


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray,
                          dtype: DType = DType.F32) -> Tuple[float, np.ndarray]:
    """Summed next-token cross entropy over rows and d(sum)/d(logits) = softmax - onehot."""
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ContractViolation("cross entropy expects [N x V] logits and N labels",
                                logits_shape=logits.shape, labels_shape=labels.shape)
    rows = np.arange(logits.shape[0])
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(shifted)
    denom = sequential_sum(e, axis=-1)
    row_loss = np.log(denom) - shifted[rows, labels]
    loss_sum = float(sequential_sum(row_loss.astype(np.float64), axis=0))
    if not math.isfinite(loss_sum):
        raise NumericalFailure("non-finite loss", op="softmax_cross_entropy")
    grad = e / denom[:, None]
    grad[rows, labels] -= grad.dtype.type(1)
    return loss_sum, finish(grad, dtype, "softmax_cross_entropy")
