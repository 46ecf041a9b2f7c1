"""Dense numeric primitives: RNG, GEMM, truncated SVD, and transformer math.

Tensors are plain 2-D numpy arrays in float32 (runtime) or float64 (oracle).
"""

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from .errors import EmptyHistoryError, NumericError, RankError, ShapeError

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

DTYPES = {"f32": np.float32, "f64": np.float64}


class Rng64:
    """SplitMix64 generator.

    The scalar and the vectorised paths produce the same stream: output ``i``
    only depends on ``seed + (i + 1) * golden``, so a block of ``n`` draws is
    computed in one numpy pass and the state is advanced by ``n`` steps.
    """

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + _GOLDEN) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
        z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
        return z ^ (z >> 31)

    def next_float(self) -> float:
        return (self.next_u64() >> 11) * 2.0**-53

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in the closed range [lo, hi]."""
        return lo + int(self.next_float() * (hi - lo + 1))

    def u64_array(self, n: int) -> np.ndarray:
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)
        with np.errstate(over="ignore"):
            steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(_GOLDEN)
            z = steps + np.uint64(self.state)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * _GOLDEN) & _MASK64
        return z

    def uniform_array(self, n: int) -> np.ndarray:
        """``n`` float64 draws in [0, 1) built from the top 53 bits."""
        return (self.u64_array(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def token_array(self, n: int, vocab: int) -> np.ndarray:
        return (self.uniform_array(n) * vocab).astype(np.int64)


def matmul(a: np.ndarray, b: np.ndarray, out: Optional[np.ndarray] = None) -> np.ndarray:
    """Row-major GEMM; accumulates in the operand dtype."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    return np.matmul(a, b, out=out)


@dataclass(frozen=True)
class SvdResult:
    A: np.ndarray  # U_r * S_r, shape (m, r)
    B: np.ndarray  # V_r^T, shape (r, n)
    singular_values: np.ndarray

    @property
    def rank(self) -> int:
        return self.A.shape[1]


def truncated_svd(w: np.ndarray, r: int) -> SvdResult:
    """Best rank-``r`` factorisation ``w ~= A @ B`` computed in float64.

    Signs are fixed so the largest-magnitude entry of every left singular
    vector is positive, which makes the factors reproducible across LAPACK
    builds.
    """
    if w.ndim != 2:
        raise ShapeError(f"truncated_svd expects a matrix, got shape {w.shape}")
    m, n = w.shape
    if not 1 <= r <= min(m, n):
        raise RankError(f"rank {r} outside [1, {min(m, n)}] for a {m}x{n} matrix")
    w64 = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w64)):
        raise NumericError("truncated_svd input contains non-finite values")
    try:
        u, s, vt = np.linalg.svd(w64, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"SVD did not converge: {exc}") from exc
    u, s, vt = u[:, :r], s[:r], vt[:r]
    pivot = np.abs(u).argmax(axis=0)
    signs = np.where(u[pivot, np.arange(r)] < 0, -1.0, 1.0)
    u = u * signs
    vt = vt * signs[:, None]
    return SvdResult(A=np.ascontiguousarray(u * s), B=np.ascontiguousarray(vt), singular_values=s.copy())


def rmsnorm(x: np.ndarray, gamma: np.ndarray, eps: float) -> np.ndarray:
    """Normalise the last axis of ``x`` to unit RMS, then scale by ``gamma``."""
    if x.shape[-1] != gamma.shape[-1]:
        raise ShapeError(f"rmsnorm length mismatch: {x.shape[-1]} vs {gamma.shape[-1]}")
    ms = np.mean(x * x, axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = x / np.sqrt(ms + eps)
    # eps == 0 on an all-zero row is 0/0; the normalised row is defined as 0.
    y = np.where(ms + eps == 0, 0, y)
    return (y * gamma).astype(x.dtype, copy=False)


def rope_inv_freq(d: int, theta_base: float = 10000.0) -> np.ndarray:
    if d % 2:
        raise ShapeError(f"RoPE needs an even head dimension, got {d}")
    i = np.arange(d // 2, dtype=np.float64)
    return theta_base ** (-(2.0 * i) / d)


def rope_tables(n_positions: int, d: int, theta_base: float = 10000.0, dtype=np.float64):
    """cos/sin tables of shape (n_positions, d/2) for positions 0..n-1."""
    angles = np.arange(n_positions, dtype=np.float64)[:, None] * rope_inv_freq(d, theta_base)[None, :]
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def rope_apply(v: np.ndarray, position: int, theta_base: float = 10000.0) -> np.ndarray:
    """Rotate consecutive pairs ``(v[2i], v[2i+1])`` by ``position * base**(-2i/d)``."""
    d = v.shape[-1]
    angle = position * rope_inv_freq(d, theta_base)
    c, s = np.cos(angle).astype(v.dtype), np.sin(angle).astype(v.dtype)
    x0, x1 = v[..., 0::2], v[..., 1::2]
    y = np.empty_like(v)
    y[..., 0::2] = x0 * c - x1 * s
    y[..., 1::2] = x0 * s + x1 * c
    return y


def rope_rows(x: np.ndarray, cos: np.ndarray, sin: np.ndarray, n_heads: int) -> np.ndarray:
    """Apply RoPE to rows of packed heads.

    ``x`` has shape (T, n_heads * d_head); ``cos``/``sin`` are the table rows
    for the T positions, shape (T, d_head / 2).
    """
    t, width = x.shape
    xv = x.reshape(t, n_heads, width // n_heads // 2, 2)
    c, s = cos[:, None, :], sin[:, None, :]
    y = np.empty_like(xv)
    y[..., 0] = xv[..., 0] * c - xv[..., 1] * s
    y[..., 1] = xv[..., 0] * s + xv[..., 1] * c
    return y.reshape(t, width)


class OnlineSoftmax:
    """Running (max, normaliser, accumulator) state for blockwise attention.

    ``q`` has shape (..., M, d); every block supplies keys (..., N, d) and
    values (..., N, dv). ``mask`` (broadcastable to (..., M, N)) marks the
    key positions that may be attended.
    """

    def __init__(self, q: np.ndarray, scale: float, dv: Optional[int] = None):
        self.q = q
        self.scale = q.dtype.type(scale)
        lead = q.shape[:-1]
        self.m = np.full(lead + (1,), -np.inf, dtype=q.dtype)
        self.l = np.zeros(lead + (1,), dtype=q.dtype)
        self.acc = np.zeros(lead + (dv or q.shape[-1],), dtype=q.dtype)
        self.n_keys = 0

    def update(self, k: np.ndarray, v: np.ndarray, mask: Optional[np.ndarray] = None) -> None:
        s = np.matmul(self.q, np.swapaxes(k, -1, -2)) * self.scale
        if mask is not None:
            s = np.where(mask, s, -np.inf)
        m_new = np.maximum(self.m, s.max(axis=-1, keepdims=True))
        # rows that have seen no valid key yet keep a -inf max; rescale by 0
        safe = np.where(np.isneginf(m_new), 0, m_new)
        alpha = np.exp(self.m - safe)
        p = np.exp(s - safe)
        self.l = self.l * alpha + p.sum(axis=-1, keepdims=True)
        self.acc = self.acc * alpha + np.matmul(p, v)
        self.m = m_new
        self.n_keys += k.shape[-2]

    def result(self) -> np.ndarray:
        if self.n_keys == 0:
            raise EmptyHistoryError("attention over an empty key history")
        return self.acc / self.l


def online_softmax_attend(
    q: np.ndarray, kv_blocks: Iterable[Tuple[np.ndarray, np.ndarray]], scale: float
) -> np.ndarray:
    """Exact softmax attention of one query row over a stream of (K, V) blocks."""
    q = np.asarray(q)
    state = OnlineSoftmax(q[None, :], scale)
    dv = None
    for k, v in kv_blocks:
        if k.shape[-1] != q.shape[-1]:
            raise ShapeError(f"key width {k.shape[-1]} != query width {q.shape[-1]}")
        if k.shape[0] == 0:
            continue
        if dv is None:
            dv = v.shape[-1]
            state.acc = np.zeros((1, dv), dtype=q.dtype)
        state.update(k, v)
    return state.result()[0]


def softmax_attend_naive(q: np.ndarray, k: np.ndarray, v: np.ndarray, scale: float) -> np.ndarray:
    """Unblocked softmax(q k^T * scale) v for a single query row."""
    if k.shape[0] == 0:
        raise EmptyHistoryError("attention over an empty key history")
    s = (k @ q) * scale
    p = np.exp(s - s.max())
    return (p @ v) / p.sum()


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1 + np.exp(-x))


def argmax_greedy(logits: Sequence[float]) -> int:
    """Index of the largest logit; ties go to the smallest index."""
    arr = np.asarray(logits)
    if arr.size == 0:
        raise ShapeError("argmax over empty logits")
    return int(np.argmax(arr.reshape(-1)))
