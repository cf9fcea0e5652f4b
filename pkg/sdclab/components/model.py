#!/usr/bin/env python3
"""
Model Component

Tensor-parallel decoder-only transformer over R logical ranks. Activations
between submodules are sharded along the sequence axis ([MBS x L/R x H] per
rank); attention and FFN run on all-gathered inputs and produce partial sums
that are reduce-scattered back to sequence shards.

Per layer (post layer norm):
    all-gather -> GQA attention with causal mask -> row-parallel wo
    -> hook(fwd_attn) -> reduce-scatter -> residual + LN1
    -> all-gather -> SwiGLU FFN -> hook(fwd_ffn) -> reduce-scatter
    -> residual + LN2

The backward pass mirrors the collectives (a forward reduce-scatter becomes an
all-gather of gradients and vice versa) and fires bwd_ffn and bwd_attn on the
input-gradient partials right before their reduce-scatter.

Parameters are a flat name -> array mapping:
    embed, head
    layers.{l}.attn.wq.rank{r}, layers.{l}.attn.wo.rank{r}
    layers.{l}.attn.wk.kv{g}, layers.{l}.attn.wv.kv{g}
    layers.{l}.ffn.{w_gate,w_up,w_down}.rank{r}
    layers.{l}.{ln1,ln2}.{gain,bias}
Key/value projections are stored once per kv group; a rank computes every
group its query heads use and gradients are summed over ranks.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .collectives import Mesh
from .data import SyntheticTokenStream
from .error_handler import ConfigError, ContractViolation, NumericalFailure
from .tensor import (
    DType,
    InitScheme,
    LayerNormCache,
    Rng,
    add,
    causal_softmax,
    causal_softmax_backward,
    finish,
    hadamard,
    init_weight,
    layer_norm,
    layer_norm_backward,
    matmul,
    scale,
    softmax_cross_entropy,
    swiglu,
    swish,
    swish_backward,
)

logger = logging.getLogger(__name__)

Params = Dict[str, np.ndarray]


class HookKind(str, Enum):
    """The four protected submodule boundaries"""
    FWD_ATTN = "fwd_attn"
    FWD_FFN = "fwd_ffn"
    BWD_ATTN = "bwd_attn"
    BWD_FFN = "bwd_ffn"

    @property
    def is_forward(self) -> bool:
        return self.value.startswith("fwd")


HOOK_KINDS: Tuple[HookKind, ...] = tuple(HookKind)


@dataclass(frozen=True)
class HookSite:
    kind: HookKind
    layer: int
    rank: int


class MatmulDirection(str, Enum):
    FWD = "fwd"
    BWD_INPUT = "bwd_input"
    BWD_WEIGHT = "bwd_weight"


@dataclass(frozen=True)
class MatmulSite:
    """Where a matmul happens; layer -1 is the output head."""
    layer: int
    rank: int
    name: str
    direction: MatmulDirection
    linear: bool = True


@dataclass(frozen=True)
class Microstep:
    """One gradient-accumulation pass; index is the flattened execution order."""
    step: int
    accum: int
    index: int

    @classmethod
    def of(cls, step: int, accum: int, grad_accum: int) -> "Microstep":
        return cls(step=step, accum=accum, index=step * grad_accum + accum)


HookFn = Callable[[HookKind, int, List[np.ndarray]], List[np.ndarray]]
MatmulFn = Callable[[np.ndarray, np.ndarray, MatmulSite], np.ndarray]


@dataclass(frozen=True)
class ModelConfig:
    """Decoder shape and partitioning; validated on construction."""
    layers: int = 2
    hidden: int = 64
    heads: int = 4
    kv_heads: int = 2
    seq_len: int = 128
    vocab: int = 256
    tp_degree: int = 4
    micro_batch: int = 1
    grad_accum: int = 4
    dtype: DType = DType.F32
    ffn_multiplier: int = 4
    init_scheme: InitScheme = InitScheme.XAVIER_UNIFORM

    def __post_init__(self):
        try:
            object.__setattr__(self, "dtype", DType(self.dtype))
        except ValueError:
            raise ConfigError("model.dtype", f"unknown dtype {self.dtype!r}") from None
        if self.dtype == DType.F16:
            raise ConfigError("model.dtype", "f16 is only known to the ABFT roundoff table")
        try:
            object.__setattr__(self, "init_scheme", InitScheme(self.init_scheme))
        except ValueError:
            raise ConfigError("model.init_scheme", f"unknown scheme {self.init_scheme!r}") from None

        for key in ("layers", "hidden", "heads", "kv_heads", "seq_len", "vocab",
                    "tp_degree", "micro_batch", "grad_accum", "ffn_multiplier"):
            value = getattr(self, key)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ConfigError(f"model.{key}", f"must be a positive integer, got {value!r}")
        if self.heads % self.kv_heads:
            raise ConfigError("model.kv_heads", f"heads={self.heads} not divisible by kv_heads={self.kv_heads}")
        if self.heads % self.tp_degree:
            raise ConfigError("model.tp_degree", f"heads={self.heads} not divisible by tp_degree={self.tp_degree}")
        if self.hidden % self.heads:
            raise ConfigError("model.heads", f"hidden={self.hidden} not divisible by heads={self.heads}")
        if self.seq_len % self.tp_degree:
            raise ConfigError("model.seq_len", f"seq_len={self.seq_len} not divisible by tp_degree={self.tp_degree}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def heads_per_rank(self) -> int:
        return self.heads // self.tp_degree

    @property
    def kv_group_size(self) -> int:
        return self.heads // self.kv_heads

    @property
    def ffn_hidden(self) -> int:
        return self.ffn_multiplier * self.hidden

    @property
    def ffn_per_rank(self) -> int:
        return self.ffn_hidden // self.tp_degree

    @property
    def seq_per_rank(self) -> int:
        return self.seq_len // self.tp_degree

    @property
    def hook_elements(self) -> int:
        """Elements compared per (site kind, layer, microstep): TP * MBS * L * H."""
        return self.tp_degree * self.micro_batch * self.seq_len * self.hidden

    def kv_group(self, head: int) -> int:
        return head // self.kv_group_size

    def kv_groups_for_rank(self, rank: int) -> List[int]:
        first = rank * self.heads_per_rank
        return sorted({self.kv_group(h) for h in range(first, first + self.heads_per_rank)})


def layer_param(layer: int, suffix: str) -> str:
    return f"layers.{layer}.{suffix}"


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def init_params(config: ModelConfig, seed: int) -> Params:
    """Draw full logical weights per (purpose, layer) stream, then shard them.

    Different TP degrees therefore start from the same logical model.
    """
    H, hd, R = config.hidden, config.head_dim, config.tp_degree
    dtype = config.dtype

    def draw(purpose: str, layer: int, fan_in: int, fan_out: int) -> np.ndarray:
        rng = Rng.for_stream(seed, f"init.{purpose}", layer)
        return init_weight(fan_in, fan_out, config.init_scheme, rng, dtype)

    def columns(full: np.ndarray, index: int, width: int) -> np.ndarray:
        return np.ascontiguousarray(full[:, index * width:(index + 1) * width])

    def rows(full: np.ndarray, index: int, height: int) -> np.ndarray:
        return np.ascontiguousarray(full[index * height:(index + 1) * height, :])

    params: Params = {"embed": draw("embed", -1, config.vocab, H)}
    q_width = config.heads_per_rank * hd
    for layer in range(config.layers):
        wq = draw("attn.wq", layer, H, config.heads * hd)
        wk = draw("attn.wk", layer, H, config.kv_heads * hd)
        wv = draw("attn.wv", layer, H, config.kv_heads * hd)
        wo = draw("attn.wo", layer, config.heads * hd, H)
        for r in range(R):
            params[layer_param(layer, f"attn.wq.rank{r}")] = columns(wq, r, q_width)
        for g in range(config.kv_heads):
            params[layer_param(layer, f"attn.wk.kv{g}")] = columns(wk, g, hd)
        for g in range(config.kv_heads):
            params[layer_param(layer, f"attn.wv.kv{g}")] = columns(wv, g, hd)
        for r in range(R):
            params[layer_param(layer, f"attn.wo.rank{r}")] = rows(wo, r, q_width)
        params[layer_param(layer, "ln1.gain")] = np.ones(H, dtype=np.float32)
        params[layer_param(layer, "ln1.bias")] = np.zeros(H, dtype=np.float32)

        w_gate = draw("ffn.w_gate", layer, H, config.ffn_hidden)
        w_up = draw("ffn.w_up", layer, H, config.ffn_hidden)
        w_down = draw("ffn.w_down", layer, config.ffn_hidden, H)
        for r in range(R):
            params[layer_param(layer, f"ffn.w_gate.rank{r}")] = columns(w_gate, r, config.ffn_per_rank)
        for r in range(R):
            params[layer_param(layer, f"ffn.w_up.rank{r}")] = columns(w_up, r, config.ffn_per_rank)
        for r in range(R):
            params[layer_param(layer, f"ffn.w_down.rank{r}")] = rows(w_down, r, config.ffn_per_rank)
        params[layer_param(layer, "ln2.gain")] = np.ones(H, dtype=np.float32)
        params[layer_param(layer, "ln2.bias")] = np.zeros(H, dtype=np.float32)
    params["head"] = draw("head", -1, H, config.vocab)
    return params


def copy_params(params: Params) -> Params:
    return {name: value.copy() for name, value in params.items()}


# ---------------------------------------------------------------------------
# Execution context
# ---------------------------------------------------------------------------

@dataclass
class ExecutionContext:
    """What a node brings to a forward/backward pass: ranks, precision, hook and matmul wrappers."""
    mesh: Mesh
    dtype: DType = DType.F32
    hook: Optional[HookFn] = None
    matmul: Optional[MatmulFn] = None

    def mm(self, a: np.ndarray, b: np.ndarray, site: MatmulSite) -> np.ndarray:
        if self.matmul is None:
            return matmul(a, b, self.dtype)
        return self.matmul(a, b, site)

    def fire(self, kind: HookKind, layer: int, tensors: List[np.ndarray]) -> List[np.ndarray]:
        """Hand the per-rank tensors to the hook; the returned tensors replace them."""
        if self.hook is None:
            return tensors
        replaced = self.hook(kind, layer, list(tensors))
        if len(replaced) != len(tensors) or any(
            new.shape != old.shape for new, old in zip(replaced, tensors)
        ):
            raise ContractViolation("hook changed tensor layout", kind=kind.value, layer=layer)
        return replaced


# ---------------------------------------------------------------------------
# Caches
# ---------------------------------------------------------------------------

@dataclass
class AttentionCache:
    x2: np.ndarray                  # gathered input [B*L x H]
    q: np.ndarray                   # [B x heads_per_rank x L x hd]
    k: Dict[int, np.ndarray]        # kv group -> [B x L x hd]
    v: Dict[int, np.ndarray]
    probs: np.ndarray               # [B x heads_per_rank x L x L]
    context: np.ndarray             # [B*L x heads_per_rank*hd]


@dataclass
class FfnCache:
    y2: np.ndarray
    gate: np.ndarray
    up: np.ndarray
    act: np.ndarray


@dataclass
class LayerCache:
    attn: List[AttentionCache]
    ln1: List[LayerNormCache]
    ffn: List[FfnCache]
    ln2: List[LayerNormCache]


@dataclass
class ForwardCache:
    inputs: np.ndarray
    labels: np.ndarray
    layers: List[LayerCache] = field(default_factory=list)
    hidden: List[np.ndarray] = field(default_factory=list)    # final per-rank shards
    dlogits: List[np.ndarray] = field(default_factory=list)   # softmax - onehot per rank

    def hidden_full(self) -> np.ndarray:
        """Pre-head activations [MBS x L x H], shards concatenated in rank order."""
        return np.concatenate(self.hidden, axis=1)


@dataclass
class ForwardResult:
    loss: float
    cache: ForwardCache


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

def _attention_forward(params: Params, config: ModelConfig, ctx: ExecutionContext,
                       layer: int, rank: int, x: np.ndarray) -> Tuple[np.ndarray, AttentionCache]:
    B, L, H = x.shape
    hd, hpr = config.head_dim, config.heads_per_rank
    dtype = ctx.dtype
    inv_sqrt = 1.0 / math.sqrt(hd)

    x2 = x.reshape(B * L, H)
    q = ctx.mm(x2, params[layer_param(layer, f"attn.wq.rank{rank}")],
               MatmulSite(layer, rank, "attn.wq", MatmulDirection.FWD))
    q = q.reshape(B, L, hpr, hd).transpose(0, 2, 1, 3)
    k: Dict[int, np.ndarray] = {}
    v: Dict[int, np.ndarray] = {}
    for g in config.kv_groups_for_rank(rank):
        k[g] = ctx.mm(x2, params[layer_param(layer, f"attn.wk.kv{g}")],
                      MatmulSite(layer, rank, f"attn.wk.kv{g}", MatmulDirection.FWD)).reshape(B, L, hd)
        v[g] = ctx.mm(x2, params[layer_param(layer, f"attn.wv.kv{g}")],
                      MatmulSite(layer, rank, f"attn.wv.kv{g}", MatmulDirection.FWD)).reshape(B, L, hd)

    probs = np.empty((B, hpr, L, L), dtype=x.dtype)
    heads_out = np.empty((B, hpr, L, hd), dtype=x.dtype)
    score_site = MatmulSite(layer, rank, "attn.scores", MatmulDirection.FWD, linear=False)
    context_site = MatmulSite(layer, rank, "attn.context", MatmulDirection.FWD, linear=False)
    for b in range(B):
        for i in range(hpr):
            g = config.kv_group(rank * hpr + i)
            scores = scale(ctx.mm(q[b, i], k[g][b].T, score_site), inv_sqrt, dtype)
            probs[b, i] = causal_softmax(scores, dtype)
            heads_out[b, i] = ctx.mm(probs[b, i], v[g][b], context_site)

    context = np.ascontiguousarray(heads_out.transpose(0, 2, 1, 3).reshape(B * L, hpr * hd))
    out = ctx.mm(context, params[layer_param(layer, f"attn.wo.rank{rank}")],
                 MatmulSite(layer, rank, "attn.wo", MatmulDirection.FWD))
    return out.reshape(B, L, H), AttentionCache(x2=x2, q=q, k=k, v=v, probs=probs, context=context)


def _ffn_forward(params: Params, ctx: ExecutionContext, layer: int, rank: int,
                 y: np.ndarray) -> Tuple[np.ndarray, FfnCache]:
    B, L, H = y.shape
    y2 = y.reshape(B * L, H)
    gate = ctx.mm(y2, params[layer_param(layer, f"ffn.w_gate.rank{rank}")],
                  MatmulSite(layer, rank, "ffn.w_gate", MatmulDirection.FWD))
    up = ctx.mm(y2, params[layer_param(layer, f"ffn.w_up.rank{rank}")],
                MatmulSite(layer, rank, "ffn.w_up", MatmulDirection.FWD))
    act = swiglu(gate, up, ctx.dtype)
    out = ctx.mm(act, params[layer_param(layer, f"ffn.w_down.rank{rank}")],
                 MatmulSite(layer, rank, "ffn.w_down", MatmulDirection.FWD))
    return out.reshape(B, L, H), FfnCache(y2=y2, gate=gate, up=up, act=act)


def _layer_forward(params: Params, config: ModelConfig, ctx: ExecutionContext,
                   layer: int, x: List[np.ndarray]) -> Tuple[List[np.ndarray], LayerCache]:
    mesh, dtype = ctx.mesh, ctx.dtype

    gathered = mesh.all_gather(x, axis=1)
    attn = mesh.map_ranks(lambda r: _attention_forward(params, config, ctx, layer, r, gathered[r]))
    partials = ctx.fire(HookKind.FWD_ATTN, layer, [out for out, _ in attn])
    attn_shards = mesh.reduce_scatter(partials, axis=1)
    gain1, bias1 = params[layer_param(layer, "ln1.gain")], params[layer_param(layer, "ln1.bias")]
    ln1 = mesh.map_ranks(lambda r: layer_norm(add(x[r], attn_shards[r], dtype), gain1, bias1, dtype))
    y = [out for out, _ in ln1]

    gathered = mesh.all_gather(y, axis=1)
    ffn = mesh.map_ranks(lambda r: _ffn_forward(params, ctx, layer, r, gathered[r]))
    partials = ctx.fire(HookKind.FWD_FFN, layer, [out for out, _ in ffn])
    ffn_shards = mesh.reduce_scatter(partials, axis=1)
    gain2, bias2 = params[layer_param(layer, "ln2.gain")], params[layer_param(layer, "ln2.bias")]
    ln2 = mesh.map_ranks(lambda r: layer_norm(add(y[r], ffn_shards[r], dtype), gain2, bias2, dtype))

    cache = LayerCache(
        attn=[c for _, c in attn],
        ln1=[c for _, c in ln1],
        ffn=[c for _, c in ffn],
        ln2=[c for _, c in ln2],
    )
    return [out for out, _ in ln2], cache


def _check_tokens(inputs: np.ndarray, labels: np.ndarray, config: ModelConfig):
    expected = (config.micro_batch, config.seq_len)
    if inputs.shape != expected or labels.shape != expected:
        raise ContractViolation("token batch has wrong shape", inputs=inputs.shape,
                                labels=labels.shape, expected=expected)
    for tokens in (inputs, labels):
        if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab):
            raise ContractViolation("token id out of vocabulary range", vocab=config.vocab)


def forward(params: Params, inputs: np.ndarray, labels: np.ndarray,
            config: ModelConfig, ctx: ExecutionContext) -> ForwardResult:
    """Mean next-token cross entropy over MBS*L positions plus the cache for backward."""
    _check_tokens(inputs, labels, config)
    B, L, H = config.micro_batch, config.seq_len, config.hidden
    Ls = config.seq_per_rank
    mesh = ctx.mesh

    embedded = params["embed"][inputs]
    x = [np.ascontiguousarray(embedded[:, r * Ls:(r + 1) * Ls]) for r in mesh.ranks]
    cache = ForwardCache(inputs=inputs, labels=labels)
    for layer in range(config.layers):
        try:
            x, layer_cache = _layer_forward(params, config, ctx, layer, x)
        except NumericalFailure as exc:
            raise exc.at(layer=layer, direction="fwd") from exc
        cache.layers.append(layer_cache)
    cache.hidden = x

    def head_rank(r: int) -> Tuple[float, np.ndarray]:
        logits = ctx.mm(x[r].reshape(B * Ls, H), params["head"],
                        MatmulSite(-1, r, "head", MatmulDirection.FWD))
        return softmax_cross_entropy(logits, labels[:, r * Ls:(r + 1) * Ls].reshape(-1), ctx.dtype)

    try:
        results = mesh.map_ranks(head_rank)
    except NumericalFailure as exc:
        raise exc.at(layer="head", direction="fwd") from exc
    loss_sum = 0.0
    for rank_loss, _ in results:
        loss_sum += rank_loss
    cache.dlogits = [dlogits for _, dlogits in results]
    loss = loss_sum / (B * L)
    if not math.isfinite(loss):
        raise NumericalFailure("non-finite loss", op="forward")
    return ForwardResult(loss=loss, cache=cache)


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------

def _ffn_backward(params: Params, ctx: ExecutionContext, layer: int, rank: int,
                  fc: FfnCache, dpartial: np.ndarray) -> Tuple[np.ndarray, Params]:
    B, L, H = dpartial.shape
    dtype = ctx.dtype
    names = {part: layer_param(layer, f"ffn.{part}.rank{rank}") for part in ("w_gate", "w_up", "w_down")}

    def site(part: str, direction: MatmulDirection) -> MatmulSite:
        return MatmulSite(layer, rank, f"ffn.{part}", direction)

    d2 = dpartial.reshape(B * L, H)
    d_down = ctx.mm(fc.act.T, d2, site("w_down", MatmulDirection.BWD_WEIGHT))
    d_act = ctx.mm(d2, params[names["w_down"]].T, site("w_down", MatmulDirection.BWD_INPUT))
    d_up = hadamard(d_act, swish(fc.gate, dtype), dtype)
    d_gate = swish_backward(fc.gate, hadamard(d_act, fc.up, dtype), dtype)
    grads = {
        names["w_gate"]: ctx.mm(fc.y2.T, d_gate, site("w_gate", MatmulDirection.BWD_WEIGHT)),
        names["w_up"]: ctx.mm(fc.y2.T, d_up, site("w_up", MatmulDirection.BWD_WEIGHT)),
        names["w_down"]: d_down,
    }
    dy2 = add(ctx.mm(d_gate, params[names["w_gate"]].T, site("w_gate", MatmulDirection.BWD_INPUT)),
              ctx.mm(d_up, params[names["w_up"]].T, site("w_up", MatmulDirection.BWD_INPUT)),
              dtype)
    return dy2.reshape(B, L, H), grads


def _attention_backward(params: Params, config: ModelConfig, ctx: ExecutionContext, layer: int,
                        rank: int, ac: AttentionCache, dpartial: np.ndarray
                        ) -> Tuple[np.ndarray, Params, Dict[int, Tuple[np.ndarray, np.ndarray]]]:
    B, L, H = dpartial.shape
    hd, hpr = config.head_dim, config.heads_per_rank
    dtype = ctx.dtype
    inv_sqrt = 1.0 / math.sqrt(hd)
    wq_name = layer_param(layer, f"attn.wq.rank{rank}")
    wo_name = layer_param(layer, f"attn.wo.rank{rank}")

    d2 = dpartial.reshape(B * L, H)
    d_wo = ctx.mm(ac.context.T, d2, MatmulSite(layer, rank, "attn.wo", MatmulDirection.BWD_WEIGHT))
    d_context = ctx.mm(d2, params[wo_name].T, MatmulSite(layer, rank, "attn.wo", MatmulDirection.BWD_INPUT))
    d_heads = d_context.reshape(B, L, hpr, hd).transpose(0, 2, 1, 3)

    dq = np.empty((B, hpr, L, hd), dtype=dpartial.dtype)
    dk = {g: np.zeros_like(ac.k[g]) for g in ac.k}
    dv = {g: np.zeros_like(ac.v[g]) for g in ac.v}
    for b in range(B):
        for i in range(hpr):
            g = config.kv_group(rank * hpr + i)
            do = d_heads[b, i]
            probs = ac.probs[b, i]
            dprobs = ctx.mm(do, ac.v[g][b].T, MatmulSite(layer, rank, "attn.context",
                                                         MatmulDirection.BWD_INPUT, linear=False))
            dv[g][b] = add(dv[g][b], ctx.mm(probs.T, do, MatmulSite(
                layer, rank, "attn.context", MatmulDirection.BWD_WEIGHT, linear=False)), dtype)
            dscores = scale(causal_softmax_backward(probs, dprobs, dtype), inv_sqrt, dtype)
            dq[b, i] = ctx.mm(dscores, ac.k[g][b], MatmulSite(layer, rank, "attn.scores",
                                                               MatmulDirection.BWD_INPUT, linear=False))
            dk[g][b] = add(dk[g][b], ctx.mm(dscores.T, ac.q[b, i], MatmulSite(
                layer, rank, "attn.scores", MatmulDirection.BWD_WEIGHT, linear=False)), dtype)

    dq2 = np.ascontiguousarray(dq.transpose(0, 2, 1, 3).reshape(B * L, hpr * hd))
    grads = {
        wq_name: ctx.mm(ac.x2.T, dq2, MatmulSite(layer, rank, "attn.wq", MatmulDirection.BWD_WEIGHT)),
        wo_name: d_wo,
    }
    dx2 = ctx.mm(dq2, params[wq_name].T, MatmulSite(layer, rank, "attn.wq", MatmulDirection.BWD_INPUT))
    kv_grads: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}
    for g in sorted(dk):
        dk2 = dk[g].reshape(B * L, hd)
        dv2 = dv[g].reshape(B * L, hd)
        kv_grads[g] = (
            ctx.mm(ac.x2.T, dk2, MatmulSite(layer, rank, f"attn.wk.kv{g}", MatmulDirection.BWD_WEIGHT)),
            ctx.mm(ac.x2.T, dv2, MatmulSite(layer, rank, f"attn.wv.kv{g}", MatmulDirection.BWD_WEIGHT)),
        )
        wk = params[layer_param(layer, f"attn.wk.kv{g}")]
        wv = params[layer_param(layer, f"attn.wv.kv{g}")]
        dx2 = add(dx2, ctx.mm(dk2, wk.T, MatmulSite(layer, rank, f"attn.wk.kv{g}", MatmulDirection.BWD_INPUT)), dtype)
        dx2 = add(dx2, ctx.mm(dv2, wv.T, MatmulSite(layer, rank, f"attn.wv.kv{g}", MatmulDirection.BWD_INPUT)), dtype)
    return dx2.reshape(B, L, H), grads, kv_grads


def _reduce(mesh: Mesh, tensors: List[np.ndarray], dtype: DType) -> np.ndarray:
    """Rank-ordered all-reduce of a parameter gradient, stored in the run's precision."""
    return finish(mesh.all_reduce(tensors)[0], dtype, "all_reduce")


def _layer_backward(params: Params, config: ModelConfig, ctx: ExecutionContext, layer: int,
                    lc: LayerCache, dout: List[np.ndarray], grads: Params) -> List[np.ndarray]:
    mesh, dtype = ctx.mesh, ctx.dtype

    ln2 = mesh.map_ranks(lambda r: layer_norm_backward(dout[r], lc.ln2[r], dtype))
    dz = [dx for dx, _, _ in ln2]
    grads[layer_param(layer, "ln2.gain")] = _reduce(mesh, [dg for _, dg, _ in ln2], dtype)
    grads[layer_param(layer, "ln2.bias")] = _reduce(mesh, [db for _, _, db in ln2], dtype)

    gathered = mesh.all_gather(dz, axis=1)
    ffn = mesh.map_ranks(lambda r: _ffn_backward(params, ctx, layer, r, lc.ffn[r], gathered[r]))
    for _, rank_grads in ffn:
        grads.update(rank_grads)
    partials = ctx.fire(HookKind.BWD_FFN, layer, [dy for dy, _ in ffn])
    dy_ffn = mesh.reduce_scatter(partials, axis=1)
    dy = mesh.map_ranks(lambda r: add(dz[r], dy_ffn[r], dtype))

    ln1 = mesh.map_ranks(lambda r: layer_norm_backward(dy[r], lc.ln1[r], dtype))
    dh = [dx for dx, _, _ in ln1]
    grads[layer_param(layer, "ln1.gain")] = _reduce(mesh, [dg for _, dg, _ in ln1], dtype)
    grads[layer_param(layer, "ln1.bias")] = _reduce(mesh, [db for _, _, db in ln1], dtype)

    gathered = mesh.all_gather(dh, axis=1)
    attn = mesh.map_ranks(lambda r: _attention_backward(params, config, ctx, layer, r, lc.attn[r], gathered[r]))
    for _, rank_grads, _ in attn:
        grads.update(rank_grads)
    for g in range(config.kv_heads):
        users = [kv[g] for _, _, kv in attn if g in kv]
        grads[layer_param(layer, f"attn.wk.kv{g}")] = _reduce(mesh, [dwk for dwk, _ in users], dtype)
        grads[layer_param(layer, f"attn.wv.kv{g}")] = _reduce(mesh, [dwv for _, dwv in users], dtype)
    partials = ctx.fire(HookKind.BWD_ATTN, layer, [dx for dx, _, _ in attn])
    dx_attn = mesh.reduce_scatter(partials, axis=1)
    return mesh.map_ranks(lambda r: add(dh[r], dx_attn[r], dtype))


def backward(params: Params, cache: ForwardCache, config: ModelConfig, ctx: ExecutionContext) -> Params:
    """Gradients of the mean loss for every parameter, keyed and ordered like params."""
    B, L, H = config.micro_batch, config.seq_len, config.hidden
    Ls = config.seq_per_rank
    mesh, dtype = ctx.mesh, ctx.dtype
    grads: Params = {}

    def head_rank(r: int) -> Tuple[np.ndarray, np.ndarray]:
        dlogits = scale(cache.dlogits[r], 1.0 / (B * L), dtype)
        h2 = cache.hidden[r].reshape(B * Ls, H)
        d_head = ctx.mm(h2.T, dlogits, MatmulSite(-1, r, "head", MatmulDirection.BWD_WEIGHT))
        dh = ctx.mm(dlogits, params["head"].T, MatmulSite(-1, r, "head", MatmulDirection.BWD_INPUT))
        return d_head, dh.reshape(B, Ls, H)

    try:
        head = mesh.map_ranks(head_rank)
    except NumericalFailure as exc:
        raise exc.at(layer="head", direction="bwd") from exc
    grads["head"] = _reduce(mesh, [d for d, _ in head], dtype)
    dout = [dh for _, dh in head]

    for layer in reversed(range(config.layers)):
        try:
            dout = _layer_backward(params, config, ctx, layer, cache.layers[layer], dout, grads)
        except NumericalFailure as exc:
            raise exc.at(layer=layer, direction="bwd") from exc

    d_embed = np.zeros_like(params["embed"])
    for r in mesh.ranks:
        tokens = cache.inputs[:, r * Ls:(r + 1) * Ls].reshape(-1)
        np.add.at(d_embed, tokens, dout[r].reshape(-1, H))
    grads["embed"] = finish(d_embed, dtype, "embed_backward")
    return {name: grads[name] for name in params}


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_tensor: str
    worst_index: int
    checked: int
    step_size: float
    tolerance: float
    per_tensor: Dict[str, float]

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def to_dict(self) -> Dict[str, object]:
        return {
            "max_rel_error": self.max_rel_error,
            "worst_tensor": self.worst_tensor,
            "worst_index": self.worst_index,
            "checked": self.checked,
            "step_size": self.step_size,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "per_tensor": dict(self.per_tensor),
        }


def _checked_indices(size: int, limit: Optional[int]) -> np.ndarray:
    if limit is None or limit >= size:
        return np.arange(size)
    return np.unique(np.linspace(0, size - 1, num=limit).astype(np.int64))


def gradient_check(config: ModelConfig, seed: int, step_size: float = 1e-5, tolerance: float = 1e-2,
                   max_elements_per_tensor: Optional[int] = None, workers: int = 1) -> GradCheckReport:
    """Compare the analytic backward against central differences, all in float64.

    Relative error per element is |a - n| / max(|a| + |n|, 1e-6).
    """
    params = {name: value.astype(np.float64) for name, value in init_params(config, seed).items()}
    inputs, labels = SyntheticTokenStream.for_model(config, seed).batch(0, 0)
    per_tensor: Dict[str, float] = {}
    worst = (0.0, "", -1)
    checked = 0
    with Mesh(config.tp_degree, workers) as mesh:
        ctx = ExecutionContext(mesh=mesh, dtype=DType.F32)
        result = forward(params, inputs, labels, config, ctx)
        analytic = backward(params, result.cache, config, ctx)
        for name, value in params.items():
            flat = value.reshape(-1)
            grad = analytic[name].reshape(-1)
            tensor_max = 0.0
            for index in _checked_indices(flat.size, max_elements_per_tensor):
                original = flat[index]
                flat[index] = original + step_size
                loss_plus = forward(params, inputs, labels, config, ctx).loss
                flat[index] = original - step_size
                loss_minus = forward(params, inputs, labels, config, ctx).loss
                flat[index] = original
                numeric = (loss_plus - loss_minus) / (2.0 * step_size)
                exact = float(grad[index])
                rel = abs(exact - numeric) / max(abs(exact) + abs(numeric), 1e-6)
                tensor_max = max(tensor_max, rel)
                if rel > worst[0]:
                    worst = (rel, name, int(index))
                checked += 1
            per_tensor[name] = tensor_max
            logger.debug(f"gradcheck {name}: max rel error {tensor_max:.3e}")

    report = GradCheckReport(max_rel_error=worst[0], worst_tensor=worst[1], worst_index=worst[2],
                             checked=checked, step_size=step_size, tolerance=tolerance,
                             per_tensor=per_tensor)
    logger.info(f"Gradient check: {checked} elements, max rel error {report.max_rel_error:.3e} "
                f"({'pass' if report.passed else 'FAIL'})")
    return report
