"""End-to-end acceptance criteria, one test per criterion.

Each test prints a ``PASS``/``FAIL`` line (also collected into the terminal
summary) and then asserts, and every tolerance is the required one.
"""

import itertools
import json
import struct

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from lowrank_serve.checkpoint import (
    ALIGN,
    PROJECTIONS,
    Checkpoint,
    normalize,
    read_checkpoint,
    write_checkpoint,
)
from lowrank_serve.compress import (
    compress_basis_shared,
    compress_plain,
    compress_whitened,
    generate_toy_dense,
)
from lowrank_serve.config import get_preset
from lowrank_serve.errors import CheckpointFormatError
from lowrank_serve.harness import (
    DENSE_BASELINE,
    EAGER_NAIVE,
    BEST_PATH,
    BenchConfig,
    Candidate,
    audit_fidelity,
    audit_prompts,
    bench_many,
    sweep_cached_len,
)
from lowrank_serve.plan import Counters, EagerExecutor, FFN_BACKENDS, PLAN_MODES, route_ffn_auto
from lowrank_serve.reference import greedy_reference, layer_forward, reference_forward_nocache
from lowrank_serve.runtime import Session, ffn_no_merge, ffn_packed
from lowrank_serve.tensor import Rng64, argmax_greedy, online_softmax_attend, rope_tables, truncated_svd
from oracles import naive_attention, singular_values_jacobi

N_PROMPTS, MAX_NEW = 20, 64


def report(n, title, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} {n}: {title} ({detail})"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def rel(a, b):
    return float(np.max(np.abs(a - b)) / np.max(np.abs(b)))


@pytest.fixture(scope="module")
def bench_model():
    return normalize(compress_plain(generate_toy_dense(get_preset("bench"), 1), 0.5))


@pytest.fixture(scope="module")
def desk_prompts(desk_dense):
    return audit_prompts(N_PROMPTS, desk_dense.config.vocab, seed=0)


# 1 ---------------------------------------------------------------------------


@pytest.mark.slow
def test_c01_full_rank_is_lossless(desk_dense, desk_prompts):
    model = normalize(compress_plain(desk_dense, 1.0))
    same = 0
    for p in desk_prompts:
        gold, _ = greedy_reference(desk_dense, p, MAX_NEW)
        got = Session(model, capacity=len(p) + MAX_NEW, dtype="f64").generate(p, MAX_NEW).tokens
        same += got == gold
    report(1, "full-rank losslessness", same == N_PROMPTS, f"{same}/{N_PROMPTS} prompts token-identical")


# 2 ---------------------------------------------------------------------------


@pytest.mark.slow
def test_c02_cached_equals_nocache(desk_model, desk_prompts):
    same, worst = 0, 0.0
    for p in desk_prompts:
        gold, gold_logits = greedy_reference(desk_model, p, MAX_NEW)
        s = Session(desk_model, capacity=len(p) + MAX_NEW, dtype="f64")
        logits, toks = s.prefill(p), []
        for want in gold_logits:
            worst = max(worst, rel(logits, want))
            toks.append(argmax_greedy(logits))
            logits = s.decode_step(toks[-1])
        same += toks == gold
    ok = same == N_PROMPTS and worst <= 1e-12
    report(2, "cached == no-cache", ok, f"{same}/{N_PROMPTS} token-identical, worst logit rel {worst:.2e}")


# 3 ---------------------------------------------------------------------------


def _attention_case(rng, i):
    d = int(rng.integers(1, 17))
    dv = int(rng.integers(1, 9))
    n = 1 if i % 10 == 0 else int(rng.integers(1, 129))
    q = rng.standard_normal(d) * rng.choice([0.1, 1.0, 10.0])
    k = rng.standard_normal((n, d))
    if i % 10 == 1:
        k[:] = k[0]  # every logit ties
    elif i % 10 == 2:
        q[:] = 0.0  # ties through a zero query
    v = rng.standard_normal((n, dv))
    cuts = sorted({0, n, *rng.integers(1, n + 1, size=int(rng.integers(0, 6))).tolist()})
    return q, k, v, [(k[a:b], v[a:b]) for a, b in zip(cuts, cuts[1:])]


def test_c03_streaming_attention_oracle():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for i in range(1000):
        q, k, v, blocks = _attention_case(rng, i)
        scale = 1.0 / np.sqrt(q.size)
        want = naive_attention(q, k, v, scale)
        got = online_softmax_attend(q, blocks, scale)
        worst = max(worst, float(np.max(np.abs(got - want)) / max(1.0, np.max(np.abs(want)))))
    report(3, "streaming attention oracle", worst <= 1e-12, f"1000 cases, worst err {worst:.2e}")


# 4 ---------------------------------------------------------------------------


def test_c04_eckart_young():
    rng = np.random.default_rng(7)
    shapes = [(64, 96), (64, 64)] + [(int(rng.integers(1, 65)), int(rng.integers(1, 97))) for _ in range(48)]
    worst, floor, checked = 0.0, 0.0, 0
    for m, n in shapes:
        w = rng.standard_normal((m, n))
        sv = singular_values_jacobi(w)
        for r in range(1, min(m, n) + 1):
            res = truncated_svd(w, r)
            err = np.linalg.norm(w - res.A @ res.B)
            tail = float(np.sqrt(np.sum(sv[r:] ** 2)))
            if r < min(m, n):
                worst = max(worst, abs(err - tail) / tail)
            else:
                # the tail is exactly zero at full rank; only roundoff remains
                floor = max(floor, err / np.linalg.norm(w))
            checked += 1
    ok = worst <= 1e-6 and floor <= 1e-12
    report(4, "Eckart-Young tail", ok, f"{len(shapes)} matrices, {checked} ranks, worst rel {worst:.2e}, full-rank {floor:.1e}")


# 5 ---------------------------------------------------------------------------


def test_c05_packed_ffn_equivalence(desk_model):
    rng = np.random.default_rng(5)
    worst = {}
    for dtype in (np.float64, np.float32):
        model = desk_model.astype(dtype)
        x = rng.standard_normal((1000, model.config.d_model)).astype(dtype)
        worst[dtype] = max(rel(ffn_packed(x, layer), ffn_no_merge(x, layer)) for layer in model.layers)
    counts = {}
    for name, fn in (("packed", ffn_packed), ("no_merge", ffn_no_merge)):
        c = Counters(trace=[])
        fn(np.ones((1, desk_model.config.d_model)), desk_model.layers[0], EagerExecutor(np.float64, c))
        gemms = [tag for kind, tag in c.trace if kind == "gemm"]
        counts[name] = len(gemms)
    # both paths share up.B, gate.B and the two down factors
    input_side = {k: v - 4 for k, v in counts.items()}
    ok = worst[np.float64] <= 1e-12 and worst[np.float32] <= 1e-6 and input_side == {"packed": 1, "no_merge": 2}
    detail = f"f64 {worst[np.float64]:.1e}, f32 {worst[np.float32]:.1e}, input GEMMs {input_side}"
    report(5, "packed FFN equivalence", ok, detail)


# 6 ---------------------------------------------------------------------------


def _families(ckpt_a, seed=0):
    """Family B and C exports that carry exactly the factors of ``ckpt_a``."""
    rng = np.random.default_rng(seed)
    cfg = ckpt_a.config
    common = {k: v for k, v in ckpt_a.tensors.items() if not k.endswith((".A", ".B"))}
    b_t, c_t, refs = dict(common), dict(common), {}
    for i, name in itertools.product(range(cfg.n_layers), PROJECTIONS):
        a = ckpt_a.tensors[f"layers.{i}.{name}.A"]
        b = ckpt_a.tensors[f"layers.{i}.{name}.B"]
        s = rng.uniform(0.5, 2.0, a.shape[0])
        b_t.update({f"layers.{i}.{name}.U": a * s[:, None], f"layers.{i}.{name}.Vt": b, f"layers.{i}.{name}.s": s})
        c_t.update({f"bases.{name}.{i}": a, f"layers.{i}.{name}.B": b})
        refs[f"{i}.{name}"] = i
    return Checkpoint("B", cfg, b_t), Checkpoint("C", cfg, c_t, {"groups": {"group_size": 1, "refs": refs}})


def test_c06_cross_family_normalization(desk_dense):
    prompt = audit_prompts(1, desk_dense.config.vocab, seed=3)[0]
    ckpt_a = compress_plain(desk_dense, 0.5)
    ref = reference_forward_nocache(normalize(ckpt_a), prompt)
    agree = max(rel(reference_forward_nocache(normalize(ck), prompt), ref) for ck in _families(ckpt_a))

    g = 2
    model = normalize(compress_basis_shared(desk_dense, 0.5, g)).astype(np.float64)
    cfg = model.config
    instances = {
        name: len({layer.proj(name).A.__array_interface__["data"][0] for layer in model.layers})
        for name in PROJECTIONS
    }
    h = np.random.default_rng(6).standard_normal((4, cfg.d_model))
    cos, sin = rope_tables(4, cfg.d_head)
    before = [layer_forward(layer, cfg, h, cos, sin) for layer in model.layers]
    model.shared_bases["q.0"][0, :] += 0.25
    after = [layer_forward(layer, cfg, h, cos, sin) for layer in model.layers]
    changed = [not np.array_equal(b, a) for b, a in zip(before, after)]
    visible = changed == [True] * g + [False] * (cfg.n_layers - g)
    ok = agree <= 1e-6 and set(instances.values()) == {cfg.n_layers // g} and visible
    report(6, "cross-family normalization", ok, f"logit rel {agree:.1e}, bases per projection {instances['q']}, layers changed by mutation {changed}")


# 7 ---------------------------------------------------------------------------


@pytest.mark.slow
def test_c07_replay_bitwise(desk_model):
    vocab = desk_model.config.vocab
    prompt = [int(t) for t in Rng64(17).token_array(16, vocab)]
    feed = [int(t) for t in Rng64(18).token_array(1000, vocab)]
    results, allocs = {}, []
    for ffn in ("packed", "no_merge"):
        outs = {}
        for plan in ("eager", "split", "per_layer"):
            s = Session(desk_model, capacity=16 + 1000, dtype="f32", plan_mode=plan, ffn_backend=ffn)
            s.prefill(prompt)
            outs[plan] = [s.decode_step(t) for t in feed]
            if plan == "per_layer":
                allocs.extend(st.alloc_count for st in s.steps[1:])
        for plan in ("split", "per_layer"):
            results[(ffn, plan)] = all(np.array_equal(a, b) for a, b in zip(outs["eager"], outs[plan]))
    ok = all(results.values()) and set(allocs) == {0}
    report(7, "plan replay bitwise", ok, f"1000 steps x {len(results)} (backend, plan) pairs, steady alloc {max(allocs)}")


# 8 ---------------------------------------------------------------------------


def test_c08_dispatch_ordering(desk_model, bench_model):
    details, ok = [], True
    for name, model in (("desk", desk_model), ("bench", bench_model)):
        stats = {}
        for plan in ("eager", "split", "per_layer"):
            s = Session(model, capacity=24, plan_mode=plan)
            s.prefill(list(range(8)))
            for t in range(3):
                s.decode_step(t)
            stats[plan] = s.steps[-1]
        d = {p: st.dispatch_count for p, st in stats.items()}
        ok &= d["per_layer"] < d["split"] < d["eager"]
        ok &= stats["split"].copy_bytes > 0 and stats["per_layer"].copy_bytes == 0
        ok &= d["eager"] >= 5 * d["per_layer"]
        details.append(f"{name} {d['per_layer']}<{d['split']}<{d['eager']}")
    report(8, "dispatch ordering", bool(ok), ", ".join(details))


# 9 ---------------------------------------------------------------------------


@pytest.mark.slow
def test_c09_attention_route_scaling(bench_model):
    lengths = [512, 1024, 2048, 4096]
    series = sweep_cached_len(bench_model, lengths, runs=20, steps=20)
    d = bench_model.config.d_model
    q = sum(2 * d * layer.q.rank for layer in bench_model.layers)
    kv = sum(2 * d * (layer.k.rank + layer.v.rank) for layer in bench_model.layers)
    flops_ok = series["dense_kv"].recon_flops == [q + kv] * 4
    flops_ok &= series["lowrank_history"].recon_flops == [q + kv * (n + 1) for n in lengths]
    dense_slope = series["dense_kv"].slope_ms_per_token
    low_slope = series["lowrank_history"].slope_ms_per_token
    ok = flops_ok and low_slope > dense_slope
    report(9, "attention-route scaling", ok, f"FLOPs exact {flops_ok}, slope ms/token {dense_slope:.2e} vs {low_slope:.2e}")


# 10 --------------------------------------------------------------------------


@pytest.mark.slow
def test_c10_decode_latency_ordering(bench_model):
    base = BenchConfig(prompt_len=512, gen_len=128, warmup_runs=5, measured_runs=20, dtype="f32")
    best, dense, naive = bench_many([base.with_axes(**axes) for axes in (BEST_PATH, DENSE_BASELINE, EAGER_NAIVE)], bench_model)
    ok = (
        best.decode_ms_per_token_med < dense.decode_ms_per_token_med < naive.decode_ms_per_token_med
        and best.decode_p90 < dense.decode_p10
        and dense.decode_p90 < naive.decode_p10
    )
    fmt = lambda r: f"{r.decode_ms_per_token_med:.3f} [{r.decode_p10:.3f}, {r.decode_p90:.3f}]"
    report(10, "decode-latency ordering", ok, f"ms/token {fmt(best)} < {fmt(dense)} < {fmt(naive)}")


# 11 --------------------------------------------------------------------------


def test_c11_ffn_auto_routing(desk_model):
    table = {"eager": "no_merge", "split": "no_merge", "per_layer": "packed"}
    table_ok = all(
        route_ffn_auto(m, o) == (table[m] if o == "auto" else o) for m, o in itertools.product(PLAN_MODES, FFN_BACKENDS)
    )
    prompt = audit_prompts(1, desk_model.config.vocab, seed=5)[0]

    def logits(plan, ffn):
        s = Session(desk_model, capacity=len(prompt) + 16, plan_mode=plan, ffn_backend=ffn)
        out = [s.prefill(prompt)]
        out += [s.decode_step(t) for t in range(16)]
        return out

    same = lambda a, b: all(np.array_equal(x, y) for x, y in zip(a, b))
    eager_ok = same(logits("eager", "auto"), logits("eager", "no_merge"))
    plan_ok = same(logits("per_layer", "auto"), logits("per_layer", "packed"))
    ok = table_ok and eager_ok and plan_ok
    report(11, "FFN auto-routing", ok, f"table {table_ok}, eager==no_merge {eager_ok}, per_layer==packed {plan_ok}")


# 12 --------------------------------------------------------------------------


@pytest.mark.slow
def test_c12_fidelity_audit(desk_model):
    f64 = audit_fidelity(
        desk_model, N_PROMPTS, MAX_NEW,
        candidates=[Candidate("f64_eager", dtype="f64"), Candidate("f64_per_layer", plan="per_layer", dtype="f64")],
    )
    f32 = audit_fidelity(desk_model, N_PROMPTS, MAX_NEW)
    ok = all(sc.exact_match == N_PROMPTS and sc.mean_token_match == 1.0 for sc in f64.scores.values())
    ok &= all(
        sc.first_token_match == N_PROMPTS and sc.first_token_match >= sc.exact_match and 0 <= sc.mean_token_match <= 1
        for sc in f32.scores.values()
    )
    ok &= f32.pairwise_exact == N_PROMPTS
    summary = "; ".join(
        f"{k} {v.exact_match}/{v.first_token_match}/{v.mean_token_match:.4f}" for k, v in {**f64.scores, **f32.scores}.items()
    )
    report(12, "fidelity audit", bool(ok), f"exact/first/mean: {summary}; pairwise {f32.pairwise_exact}/{N_PROMPTS}")


# 13 --------------------------------------------------------------------------


def _flip_one_byte(blob):
    blob = bytearray(blob)
    hlen = struct.unpack_from("<6sHI", blob, 0)[2]
    header = json.loads(bytes(blob[12 : 12 + hlen]))
    start = (12 + hlen + ALIGN - 1) // ALIGN * ALIGN
    target = header["tensors"][len(header["tensors"]) // 2]
    blob[start + target["offset"] + target["nbytes"] // 2] ^= 0x01
    return bytes(blob), target["name"]


def test_c13_checkpoint_round_trip(desk_dense):
    ckpts = {
        "A": compress_plain(desk_dense, 0.5),
        "B": compress_whitened(desk_dense, 0.5, calib_tokens=64),
        "C": compress_basis_shared(desk_dense, 0.5, 2),
    }
    identical, caught = {}, {}
    for fam, ck in ckpts.items():
        blob = write_checkpoint(ck)
        identical[fam] = write_checkpoint(read_checkpoint(blob)) == blob
        bad, name = _flip_one_byte(blob)
        try:
            read_checkpoint(bad)
            caught[fam] = False
        except CheckpointFormatError as e:
            caught[fam] = e.field == f"tensor {name}"
    ok = all(identical.values()) and all(caught.values())
    report(13, "checkpoint round-trip", ok, f"byte-identical {identical}, corruption caught {caught}")
