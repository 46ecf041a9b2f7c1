"""Phase-split factorised inference.

Prefill streams the prompt through blockwise online-softmax attention,
reconstructing dense K/V one block at a time from the rank activations.
Decode reconstructs only the current token's q/k/v and reads the history
from a contiguous dense cache (``dense_kv``), or, as the ablation route,
keeps history in rank space and rebuilds all of it every step
(``lowrank_history``). Decode layers run eagerly or as replayed plans.
"""

import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .checkpoint import CanonicalLayer, CanonicalModel
from .config import DEFAULT_CAPACITY
from .errors import CapacityError, ConfigurationError, ShapeError
from .kernels import (
    k_add,
    k_attend,
    k_attend_lowrank,
    k_cache_append,
    k_embed,
    k_gemm,
    k_rank_append,
    k_rmsnorm,
    k_rope,
    k_silu_mul,
    k_split,
)
from .plan import PLAN_MODES, Counters, EagerExecutor, capture_layer_plan, route_ffn_auto
from .tensor import DTYPES, OnlineSoftmax, argmax_greedy, rope_rows, rope_tables

ATTN_ROUTES = ("dense_kv", "lowrank_history")
PREFILL_BLOCK = 64


def canon(name: str) -> str:
    """CLI spellings use hyphens; internal names use underscores."""
    return name.replace("-", "_")


class KVCache:
    """Dense per-layer key/value history, head-major: (n_heads, capacity, d_head).

    ``len`` doubles as the length register read by captured plans; it is
    advanced once per step, after every layer has appended.
    """

    def __init__(self, n_layers, n_heads, d_head, capacity, dtype, dense=True):
        self.capacity = capacity
        self.len = 0
        shape = (n_heads, capacity, d_head)
        self.k = [np.zeros(shape, dtype) for _ in range(n_layers)] if dense else None
        self.v = [np.zeros(shape, dtype) for _ in range(n_layers)] if dense else None

    def keys(self, layer: int) -> np.ndarray:
        return self.k[layer][:, : self.len]

    def values(self, layer: int) -> np.ndarray:
        return self.v[layer][:, : self.len]


class RankHistory:
    """Pre-RoPE rank activations of every past key/value, per layer."""

    def __init__(self, model: CanonicalModel, capacity: int):
        self.k = [np.zeros((capacity, l.k.rank), model.dtype) for l in model.layers]
        self.v = [np.zeros((capacity, l.v.rank), model.dtype) for l in model.layers]


@dataclass
class StepStats:
    wall_ms: float
    dispatch_count: int
    alloc_count: int
    copy_bytes: int
    recon_flops: int


@dataclass
class GenerationResult:
    tokens: List[int]
    prefill_ms: float
    steps: List[StepStats] = field(default_factory=list)

    @property
    def decode_ms(self) -> float:
        return sum(s.wall_ms for s in self.steps)


def _gemm(ex, x, w, tag=None, flops=0):
    return ex.op("gemm", k_gemm, (x, w), out=(x.shape[0], w.shape[1]), tag=tag, flops=flops)


def _check_ffn_input(x, layer):
    if x.ndim != 2 or x.shape[1] != layer.up.d_in:
        raise ShapeError(f"FFN input must be (n, {layer.up.d_in}), got {x.shape}")


def ffn_no_merge(x: np.ndarray, layer: CanonicalLayer, ex=None) -> np.ndarray:
    """silu(x A_gate B_gate) * (x A_up B_up), then the down projection."""
    _check_ffn_input(x, layer)
    ex = ex or EagerExecutor(x.dtype)
    u = _gemm(ex, _gemm(ex, x, layer.up.A, tag="ffn_in"), layer.up.B)
    g = _gemm(ex, _gemm(ex, x, layer.gate.A, tag="ffn_in"), layer.gate.B)
    act = ex.op("silu_mul", k_silu_mul, (g, u), out=g.shape)
    return _gemm(ex, _gemm(ex, act, layer.down.A), layer.down.B)


def ffn_packed(x: np.ndarray, layer: CanonicalLayer, ex=None) -> np.ndarray:
    """Same maths as ``ffn_no_merge`` with one wide input projection."""
    _check_ffn_input(x, layer)
    ex = ex or EagerExecutor(x.dtype)
    p = _gemm(ex, x, layer.packed.A_ug, tag="ffn_in")
    p_up, p_gate = ex.op("split", k_split, (p,), r_up=layer.packed.r_up)
    u = _gemm(ex, p_up, layer.up.B)
    g = _gemm(ex, p_gate, layer.gate.B)
    act = ex.op("silu_mul", k_silu_mul, (g, u), out=g.shape)
    return _gemm(ex, _gemm(ex, act, layer.down.A), layer.down.B)


FFN = {"no_merge": ffn_no_merge, "packed": ffn_packed}


class Session:
    """One generation stream over a canonical model (batch size 1)."""

    def __init__(
        self,
        model: CanonicalModel,
        capacity: Optional[int] = None,
        attn_route: str = "dense_kv",
        ffn_backend: str = "auto",
        plan_mode: str = "eager",
        dtype: str = "f32",
        block_size: int = PREFILL_BLOCK,
        trace: bool = False,
    ):
        attn_route, ffn_backend, plan_mode = canon(attn_route), canon(ffn_backend), canon(plan_mode)
        if attn_route not in ATTN_ROUTES:
            raise ConfigurationError(f"unknown attention route {attn_route!r}")
        if plan_mode not in PLAN_MODES:
            raise ConfigurationError(f"unknown plan mode {plan_mode!r}")
        if dtype not in DTYPES:
            raise ConfigurationError(f"unknown dtype {dtype!r}")
        if block_size < 1:
            raise ConfigurationError("prefill block size must be >= 1")
        self.dtype = np.dtype(DTYPES[dtype])
        self.model = model.astype(self.dtype)
        self.config = cfg = model.config
        self.capacity = int(capacity or DEFAULT_CAPACITY)
        self.attn_route = attn_route
        self.plan_mode = plan_mode
        self.ffn_backend = route_ffn_auto(plan_mode, ffn_backend)
        self.block_size = block_size

        self.cache = KVCache(
            cfg.n_layers, cfg.n_heads, cfg.d_head, self.capacity, self.dtype, dense=attn_route == "dense_kv"
        )
        self.rank_history = RankHistory(self.model, self.capacity) if attn_route == "lowrank_history" else None
        self.cos, self.sin = rope_tables(self.capacity, cfg.d_head, cfg.rope_base, self.dtype)
        self.scale = float(1.0 / np.sqrt(cfg.d_head))

        self.live = Counters(trace=[] if trace else None)
        self.totals = Counters()
        self.steps: List[StepStats] = []
        self.prefill_ms = 0.0
        self.h = np.zeros((1, cfg.d_model), self.dtype)
        self._eager = EagerExecutor(self.dtype, self.live)
        self._outer = EagerExecutor(self.dtype, self.live, reuse=plan_mode != "eager")
        self.captured = None

    @property
    def position(self) -> int:
        return self.cache.len

    # -- prefill ----------------------------------------------------------

    def prefill(self, tokens: Sequence[int]) -> np.ndarray:
        """Process the prompt and return the last position's logits."""
        tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
        if tokens.size == 0:
            raise ShapeError("empty prompt")
        if tokens.size > self.capacity:
            raise CapacityError(f"prompt of {tokens.size} tokens exceeds capacity {self.capacity}")
        if self.position != 0:
            raise ConfigurationError("prefill needs a fresh session")
        cfg = self.config
        if tokens.min() < 0 or tokens.max() >= cfg.vocab:
            raise ShapeError(f"token ids must lie in [0, {cfg.vocab})")
        t0 = time.perf_counter()
        ex = EagerExecutor(self.dtype)
        t = tokens.size
        h = np.ascontiguousarray(self.model.embed[tokens])
        for li, layer in enumerate(self.model.layers):
            xn = ex.op("rmsnorm", k_rmsnorm, (h, layer.attn_norm), out=h.shape, eps=cfg.norm_eps)
            pq = _gemm(ex, xn, layer.q.A)
            pk = _gemm(ex, xn, layer.k.A)
            pv = _gemm(ex, xn, layer.v.A)
            if self.rank_history is not None:
                self.rank_history.k[li][:t] = pk
                self.rank_history.v[li][:t] = pv
            att = ex.op("attend", self._prefill_attend, (pq, pk, pv), out=h.shape, layer=li)
            h = ex.op("residual_add", k_add, (h, _gemm(ex, _gemm(ex, att, layer.o.A), layer.o.B)), out=h.shape)
            xn = ex.op("rmsnorm", k_rmsnorm, (h, layer.ffn_norm), out=h.shape, eps=cfg.norm_eps)
            h = ex.op("residual_add", k_add, (h, FFN[self.ffn_backend](xn, layer, ex)), out=h.shape)
        self.cache.len = t
        xf = ex.op("rmsnorm", k_rmsnorm, (h[-1:], self.model.final_norm), out=(1, cfg.d_model), eps=cfg.norm_eps)
        logits = _gemm(ex, xf, self.model.head)
        self.prefill_ms = (time.perf_counter() - t0) * 1e3
        return logits[0]

    def _prefill_attend(self, out, pq, pk, pv, layer):
        """Causal attention over the prompt, one query block at a time.

        K/V blocks are reconstructed from rank space as they are reached and
        (dense route) written straight into the cache; each query block is
        reconstructed, rotated, and streamed over the key blocks so far.
        """
        lw = self.model.layers[layer]
        cfg = self.config
        n_heads, dh, bs = cfg.n_heads, cfg.d_head, self.block_size
        t = pq.shape[0]
        blocks = []
        for start in range(0, t, bs):
            stop = min(start + bs, t)
            n = stop - start
            cos, sin = self.cos[start:stop], self.sin[start:stop]
            kb = rope_rows(pk[start:stop] @ lw.k.B, cos, sin, n_heads)
            kh = kb.reshape(n, n_heads, dh).transpose(1, 0, 2)
            vh = (pv[start:stop] @ lw.v.B).reshape(n, n_heads, dh).transpose(1, 0, 2)
            if self.cache.k is not None:
                self.cache.k[layer][:, start:stop] = kh
                self.cache.v[layer][:, start:stop] = vh
                kh = self.cache.k[layer][:, start:stop]
                vh = self.cache.v[layer][:, start:stop]
            blocks.append((kh, vh))

            qb = rope_rows(pq[start:stop] @ lw.q.B, cos, sin, n_heads)
            state = OnlineSoftmax(qb.reshape(n, n_heads, dh).transpose(1, 0, 2), self.scale)
            for k_blk, v_blk in blocks[:-1]:
                state.update(k_blk, v_blk)
            state.update(kh, vh, mask=np.tri(n, dtype=bool))
            out[start:stop] = state.result().transpose(1, 0, 2).reshape(n, cfg.d_model)

    # -- decode -----------------------------------------------------------

    def _emit_attention(self, ex, li: int) -> None:
        lw = self.model.layers[li]
        cfg = self.config
        d, n_heads = cfg.d_model, cfg.n_heads
        h = self.h
        rope = dict(cos=self.cos, sin=self.sin, reg=self.cache, n_heads=n_heads)

        xn = ex.op("rmsnorm", k_rmsnorm, (h, lw.attn_norm), out=(1, d), eps=cfg.norm_eps)
        pq = _gemm(ex, xn, lw.q.A)
        pk = _gemm(ex, xn, lw.k.A)
        pv = _gemm(ex, xn, lw.v.A)
        q = _gemm(ex, pq, lw.q.B, tag="recon", flops=2 * lw.q.rank * d)
        q = ex.op("rope", k_rope, (q,), out=(1, d), **rope)
        if self.attn_route == "dense_kv":
            k = _gemm(ex, pk, lw.k.B, tag="recon", flops=2 * lw.k.rank * d)
            v = _gemm(ex, pv, lw.v.B, tag="recon", flops=2 * lw.v.rank * d)
            k = ex.op("rope", k_rope, (k,), out=(1, d), **rope)
            kc, vc = self.cache.k[li], self.cache.v[li]
            ex.op("cache_append", k_cache_append, (k, v, kc, vc), reg=self.cache, n_heads=n_heads)
            att = ex.op(
                "attend", k_attend, (q, kc, vc), out=(1, d), scratch=((n_heads, self.capacity, 1),),
                reg=self.cache, scale=self.scale, n_heads=n_heads,
            )
        else:
            hk, hv = self.rank_history.k[li], self.rank_history.v[li]
            ex.op("cache_append", k_rank_append, (pk, pv, hk, hv), reg=self.cache)
            att = ex.op(
                "attend", k_attend_lowrank, (q, hk, lw.k.B, hv, lw.v.B), out=(1, d),
                scratch=((self.capacity, d), (self.capacity, d), (n_heads, self.capacity, 1)),
                scale=self.scale, live=self.live, **rope,
            )
        o = _gemm(ex, _gemm(ex, att, lw.o.A), lw.o.B)
        ex.op("residual_add", k_add, (h, o), out=h)

    def _emit_mlp(self, ex, li: int, x: np.ndarray) -> None:
        lw = self.model.layers[li]
        cfg = self.config
        xn = ex.op("rmsnorm", k_rmsnorm, (x, lw.ffn_norm), out=(1, cfg.d_model), eps=cfg.norm_eps)
        y = FFN[self.ffn_backend](xn, lw, ex)
        ex.op("residual_add", k_add, (x, y), out=self.h)

    def _step(self, token: int) -> np.ndarray:
        if self.position == 0:
            raise ConfigurationError("decode_step before prefill")
        if self.position >= self.capacity:
            raise CapacityError(f"KV cache full at {self.capacity} positions")
        if not 0 <= int(token) < self.config.vocab:
            raise ShapeError(f"token id {token} outside vocabulary")
        live = self.live
        live.reset()
        t0 = time.perf_counter()
        out = self._outer
        out.begin_step()
        out.op("embed", k_embed, (self.model.embed,), out=self.h, token=int(token))
        if self.plan_mode == "eager":
            for li in range(self.config.n_layers):
                self._emit_attention(self._eager, li)
                self._emit_mlp(self._eager, li, self.h)
        elif self.captured is None:
            mode = "full_layer" if self.plan_mode == "per_layer" else "split"
            self.captured = [capture_layer_plan(self, li, mode) for li in range(self.config.n_layers)]
        else:
            for layer_plan in self.captured:
                layer_plan.run(live)
        xf = out.op("rmsnorm", k_rmsnorm, (self.h, self.model.final_norm), out=self.h.shape, eps=self.config.norm_eps)
        logits = out.op("gemm", k_gemm, (xf, self.model.head), out=(1, self.config.vocab))
        self.cache.len += 1
        wall = (time.perf_counter() - t0) * 1e3
        self.steps.append(StepStats(wall, live.dispatch, live.alloc, live.copy_bytes, live.recon_flops))
        self.totals.add(live)
        return logits[0]

    def decode_step(self, token: int) -> np.ndarray:
        """Feed one token; returns a copy of the next-token logits."""
        return self._step(token).copy()

    def rewind(self, n: int) -> None:
        """Drop the last ``n`` positions (the slots are overwritten later)."""
        if not 0 <= n <= self.position:
            raise ConfigurationError(f"cannot rewind {n} of {self.position} positions")
        self.cache.len -= n

    def generate(self, prompt: Sequence[int], max_new: int) -> GenerationResult:
        """Prefill, then ``max_new`` greedy steps; each sampled token is fed back."""
        n_prompt = len(prompt)
        if max_new < 0:
            raise ConfigurationError("max_new must be >= 0")
        if n_prompt + max_new > self.capacity:
            raise CapacityError(f"{n_prompt} + {max_new} tokens exceed capacity {self.capacity}")
        logits = self.prefill(prompt)
        first = len(self.steps)
        tokens = []
        for _ in range(max_new):
            tok = argmax_greedy(logits)
            tokens.append(tok)
            logits = self._step(tok)
        return GenerationResult(tokens, self.prefill_ms, self.steps[first:])


def prefill(session: Session, tokens) -> np.ndarray:
    return session.prefill(tokens)


def decode_step(session: Session, token: int) -> np.ndarray:
    return session.decode_step(token)


def generate(session: Session, prompt, max_new: int) -> GenerationResult:
    return session.generate(prompt, max_new)


def lowrank_history_attend(session: Session, layer: int, q: np.ndarray) -> np.ndarray:
    """Attend a rotated query row over the rank-space history [0, len).

    Every call rebuilds the full dense K/V history and re-applies RoPE.
    """
    if session.attn_route != "lowrank_history":
        raise ConfigurationError("lowrank_history_attend needs a lowrank_history session")
    n = session.position
    if n == 0:
        raise ConfigurationError("empty history")
    lw = session.model.layers[layer]
    cfg = session.config
    q = np.asarray(q, dtype=session.dtype).reshape(1, cfg.d_model)
    keys = session.rank_history.k[layer][:n] @ lw.k.B
    vals = session.rank_history.v[layer][:n] @ lw.v.B
    session.live.recon_flops += 2 * n * cfg.d_model * (lw.k.rank + lw.v.rank)
    keys = rope_rows(keys, session.cos[:n], session.sin[:n], cfg.n_heads)
    kh = keys.reshape(n, cfg.n_heads, cfg.d_head).transpose(1, 0, 2)
    vh = vals.reshape(n, cfg.n_heads, cfg.d_head).transpose(1, 0, 2)
    state = OnlineSoftmax(q.reshape(cfg.n_heads, 1, cfg.d_head), session.scale)
    state.update(kh, vh)
    return state.result().reshape(-1)
