"""Float64 no-cache forward pass: the gold oracle for every runtime path.

Works on both dense models (projections are plain matrices) and canonical
factorised models (projections are ``FactorizedLinear``). Attention is the
naive full softmax with a causal mask; the FFN is the unpacked path.
"""

from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ShapeError
from .tensor import argmax_greedy, rmsnorm, rope_rows, rope_tables, silu


def _linear(proj, x: np.ndarray) -> np.ndarray:
    if isinstance(proj, np.ndarray):
        return x @ proj
    return (x @ proj.A) @ proj.B


def _as_f64(model):
    if hasattr(model, "astype"):
        return model.astype(np.float64)
    return model


def causal_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, n_heads: int) -> np.ndarray:
    """Naive causal multi-head attention over packed (T, n_heads*d_head) rows."""
    t, width = q.shape
    dh = width // n_heads
    qh = q.reshape(t, n_heads, dh).transpose(1, 0, 2)
    kh = k.reshape(t, n_heads, dh).transpose(1, 0, 2)
    vh = v.reshape(t, n_heads, dh).transpose(1, 0, 2)
    s = qh @ kh.transpose(0, 2, 1) * (1.0 / np.sqrt(dh))
    s = np.where(np.tril(np.ones((t, t), dtype=bool)), s, -np.inf)
    p = np.exp(s - s.max(axis=-1, keepdims=True))
    p /= p.sum(axis=-1, keepdims=True)
    return (p @ vh).transpose(1, 0, 2).reshape(t, width)


def layer_forward(
    layer,
    cfg,
    h: np.ndarray,
    cos: np.ndarray,
    sin: np.ndarray,
    isolated: bool = False,
    record: Optional[Callable[[str, np.ndarray], None]] = None,
    kv_out: Optional[list] = None,
) -> np.ndarray:
    """One decoder block over rows ``h``.

    ``isolated`` treats each row as its own length-1 sequence, so attention
    returns the value row unchanged. ``record(proj, x)`` sees the input of
    every projection.
    """
    note = record or (lambda name, x: None)
    xn = rmsnorm(h, layer.attn_norm, cfg.norm_eps)
    for name in ("q", "k", "v"):
        note(name, xn)
    q = _linear(layer.q, xn)
    k = _linear(layer.k, xn)
    v = _linear(layer.v, xn)
    if isolated:
        att = v
    else:
        q = rope_rows(q, cos, sin, cfg.n_heads)
        k = rope_rows(k, cos, sin, cfg.n_heads)
        att = causal_attention(q, k, v, cfg.n_heads)
    if kv_out is not None:
        kv_out.append((k, v))
    note("o", att)
    h = h + _linear(layer.o, att)
    xn = rmsnorm(h, layer.ffn_norm, cfg.norm_eps)
    note("up", xn)
    note("gate", xn)
    act = silu(_linear(layer.gate, xn)) * _linear(layer.up, xn)
    note("down", act)
    return h + _linear(layer.down, act)


def reference_forward_nocache(
    model,
    tokens: Sequence[int],
    return_kv: bool = False,
    isolated: bool = False,
    record: Optional[Callable[[int, str, np.ndarray], None]] = None,
):
    """Logits for every position, shape (T, vocab), computed in float64."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ShapeError("reference forward needs a non-empty 1-D token sequence")
    model = _as_f64(model)
    cfg = model.config
    if tokens.min() < 0 or tokens.max() >= cfg.vocab:
        raise ShapeError(f"token ids must lie in [0, {cfg.vocab})")
    cos, sin = rope_tables(tokens.size, cfg.d_head, cfg.rope_base)
    h = model.embed[tokens]
    kv: List[Tuple[np.ndarray, np.ndarray]] = []
    for i, layer in enumerate(model.layers):
        rec = None if record is None else (lambda name, x, i=i: record(i, name, x))
        h = layer_forward(layer, cfg, h, cos, sin, isolated=isolated, record=rec, kv_out=kv)
    logits = rmsnorm(h, model.final_norm, cfg.norm_eps) @ model.head
    if return_kv:
        return logits, kv
    return logits


def greedy_reference(model, prompt: Sequence[int], max_new: int):
    """Greedy decode by re-running the full no-cache forward every step.

    Returns (tokens, per-step last-position logits).
    """
    model = _as_f64(model)
    seq = list(int(t) for t in prompt)
    out, logits_seq = [], []
    for _ in range(max_new):
        logits = reference_forward_nocache(model, seq)[-1]
        tok = argmax_greedy(logits)
        out.append(tok)
        logits_seq.append(logits)
        seq.append(tok)
    return out, logits_seq

