"""Decode-step kernels.

Every kernel writes into a caller-provided ``out`` buffer (plus optional
scratch buffers). A kernel has two halves: ``bind`` resolves views and
temporaries for fixed operands and returns a zero-argument closure that
does the arithmetic. Eager execution binds and runs on every call; a
captured plan binds once and replays the closure, so both run the exact
same numpy calls. ``reg`` is the cache object: ``reg.len`` is the position
being written, read at run time.
"""

from functools import partial

import numpy as np


def kernel(bind):
    def run(out, *args, **params):
        bind(out, *args, **params)()

    run.bind = bind
    run.__name__ = bind.__name__
    run.__doc__ = bind.__doc__
    return run


@kernel
def k_gemm(out, x, w):
    return partial(np.matmul, x, w, out=out)


@kernel
def k_rmsnorm(out, x, gamma, eps):
    ms = np.empty(x.shape[:-1] + (1,), x.dtype)
    n = x.dtype.type(x.shape[-1])
    eps = x.dtype.type(eps)

    def run():
        np.multiply(x, x, out=out)
        np.add.reduce(out, axis=-1, keepdims=True, out=ms)
        ms[...] /= n
        ms[...] += eps
        np.sqrt(ms, out=ms)
        np.divide(x, ms, out=out)
        out[...] *= gamma

    return run


def _rotate(out3, x3, c, s):
    x0, x1 = x3[..., 0], x3[..., 1]
    out3[..., 0] = x0 * c - x1 * s
    out3[..., 1] = x0 * s + x1 * c


@kernel
def k_rope(out, x, cos, sin, reg, n_heads):
    shape = (n_heads, x.shape[1] // n_heads // 2, 2)
    x3, o3 = x.reshape(shape), out.reshape(shape)
    x0, x1, o0, o1 = x3[..., 0], x3[..., 1], o3[..., 0], o3[..., 1]
    t = np.empty(x0.shape, x.dtype)

    def run():
        c, s = cos[reg.len], sin[reg.len]
        np.multiply(x0, c, out=o0)
        np.multiply(x1, s, out=t)
        np.subtract(o0, t, out=o0)
        np.multiply(x0, s, out=o1)
        np.multiply(x1, c, out=t)
        np.add(o1, t, out=o1)

    return run


@kernel
def k_cache_append(out, k, v, kc, vc, reg, n_heads):
    kr, vr = k.reshape(n_heads, -1), v.reshape(n_heads, -1)

    def run():
        kc[:, reg.len, :] = kr
        vc[:, reg.len, :] = vr

    return run


@kernel
def k_rank_append(out, pk, pv, hist_k, hist_v, reg):
    def run():
        hist_k[reg.len] = pk[0]
        hist_v[reg.len] = pv[0]

    return run


def _bind_heads(out, q, ws, n_heads):
    dh = q.shape[1] // n_heads
    return q.reshape(n_heads, dh, 1), out.reshape(n_heads, 1, dh), ws


def _attend_heads(acc, q3, kh, vh, ws, n, scale):
    """Single-row, single-block softmax attention over the first ``n`` keys.

    ``kh``/``vh`` are (H, >=n, d_head) views, ``q3`` is (H, d_head, 1),
    ``acc`` is the (H, 1, d_head) output view and ``ws`` an (H, >=n, 1)
    logits workspace.
    """
    logits = ws[:, :n, :]
    np.matmul(kh[:, :n, :], q3, out=logits)
    logits *= scale
    m = logits.max(axis=1, keepdims=True)
    logits -= m
    np.exp(logits, out=logits)
    norm = logits.sum(axis=1, keepdims=True)
    np.matmul(logits.transpose(0, 2, 1), vh[:, :n, :], out=acc)
    acc /= norm


@kernel
def k_attend(out, q, kc, vc, ws, reg, scale, n_heads):
    q3, acc, ws = _bind_heads(out, q, ws, n_heads)
    scale = q.dtype.type(scale)

    def run():
        _attend_heads(acc, q3, kc, vc, ws, reg.len + 1, scale)

    return run


@kernel
def k_attend_lowrank(out, q, hist_k, b_k, hist_v, b_v, wk, wv, ws, reg, cos, sin, scale, n_heads, live):
    """Rebuild the whole dense K/V history from rank space, then attend."""
    q3, acc, ws = _bind_heads(out, q, ws, n_heads)
    scale = q.dtype.type(scale)
    d = b_k.shape[1]
    flops_per_pos = 2 * d * (b_k.shape[0] + b_v.shape[0])

    def run():
        n = reg.len + 1
        keys, vals = wk[:n], wv[:n]
        np.matmul(hist_k[:n], b_k, out=keys)
        np.matmul(hist_v[:n], b_v, out=vals)
        live.recon_flops += n * flops_per_pos
        k3 = keys.reshape(n, n_heads, -1, 2)
        _rotate(k3, k3.copy(), cos[:n, None, :], sin[:n, None, :])
        kh = keys.reshape(n, n_heads, -1).transpose(1, 0, 2)
        vh = vals.reshape(n, n_heads, -1).transpose(1, 0, 2)
        _attend_heads(acc, q3, kh, vh, ws, n, scale)

    return run


@kernel
def k_silu_mul(out, g, u):
    def run():
        np.negative(g, out=out)
        np.exp(out, out=out)
        out[...] += 1
        np.divide(g, out, out=out)
        out[...] *= u

    return run


@kernel
def k_add(out, a, b):
    return partial(np.add, a, b, out=out)


def k_split(out, p, r_up):
    return p[:, :r_up], p[:, r_up:]


@kernel
def k_embed(out, table, token):
    def run():
        out[0] = table[token]

    return run


@kernel
def k_copy(out, x):
    return partial(np.copyto, out, x)
