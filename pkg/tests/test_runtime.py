import numpy as np
import pytest

from lowrank_serve.compress import DenseLayer, DenseModel
from lowrank_serve.config import ModelConfig
from lowrank_serve.errors import CapacityError, ConfigurationError, ShapeError
from lowrank_serve.plan import Counters, EagerExecutor
from lowrank_serve.reference import greedy_reference, reference_forward_nocache
from lowrank_serve.runtime import Session, ffn_no_merge, ffn_packed, lowrank_history_attend
from lowrank_serve.tensor import Rng64, rope_rows


def rel(a, b):
    return np.max(np.abs(a - b)) / np.max(np.abs(b))


def tokens(n, vocab, seed=0):
    return [int(t) for t in Rng64(seed).token_array(n, vocab)]


# -- prefill ----------------------------------------------------------------------


def test_prefill_matches_oracle_f64(desk_model):
    prompt = tokens(150, desk_model.config.vocab)
    ref = reference_forward_nocache(desk_model, prompt)[-1]
    got = Session(desk_model, capacity=256, dtype="f64").prefill(prompt)
    assert np.max(np.abs(got - ref)) <= 1e-12 * max(1.0, np.max(np.abs(ref)))


def test_prefill_matches_oracle_f32(desk_model):
    prompt = tokens(150, desk_model.config.vocab)
    ref = reference_forward_nocache(desk_model, prompt)[-1]
    assert rel(Session(desk_model, capacity=256, dtype="f32").prefill(prompt), ref) <= 1e-4


def test_block_size_invariance(tiny_model):
    prompt = tokens(70, tiny_model.config.vocab, 1)
    a = Session(tiny_model, capacity=80, dtype="f64", block_size=1).prefill(prompt)
    b = Session(tiny_model, capacity=80, dtype="f64", block_size=64).prefill(prompt)
    assert np.max(np.abs(a - b)) <= 1e-12


def test_cache_after_512_token_prefill(desk_model):
    cfg = desk_model.config
    prompt = tokens(512, cfg.vocab, 2)
    s = Session(desk_model, capacity=520, dtype="f64")
    s.prefill(prompt)
    assert s.cache.len == 512
    _, kv = reference_forward_nocache(desk_model, prompt, return_kv=True)
    for li, (k_ref, v_ref) in enumerate(kv):
        k = s.cache.keys(li).transpose(1, 0, 2).reshape(512, cfg.d_model)
        v = s.cache.values(li).transpose(1, 0, 2).reshape(512, cfg.d_model)
        assert np.max(np.abs(k - k_ref)) <= 1e-12 * max(1.0, np.abs(k_ref).max())
        assert np.max(np.abs(v - v_ref)) <= 1e-12 * max(1.0, np.abs(v_ref).max())


def test_prefill_errors(tiny_model):
    with pytest.raises(ShapeError):
        Session(tiny_model, capacity=8).prefill([])
    with pytest.raises(CapacityError):
        Session(tiny_model, capacity=8).prefill(list(range(9)))
    with pytest.raises(ShapeError):
        Session(tiny_model, capacity=8).prefill([tiny_model.config.vocab])


# -- decode ------------------------------------------------------------------------


def test_greedy_64_steps_matches_oracle_f64(desk_model):
    prompt = tokens(40, desk_model.config.vocab, 3)
    want, want_logits = greedy_reference(desk_model, prompt, 64)
    s = Session(desk_model, capacity=128, dtype="f64")
    res = s.generate(prompt, 64)
    assert res.tokens == want


def test_first_decode_after_one_token_prefill(tiny_model):
    s = Session(tiny_model, capacity=8, dtype="f64")
    s.prefill([5])
    assert s.position == 1
    logits = s.decode_step(7)
    assert s.position == 2
    ref = reference_forward_nocache(tiny_model, [5, 7])[-1]
    assert np.max(np.abs(logits - ref)) <= 1e-12


def test_decode_agrees_with_prefill(desk_model):
    prompt = tokens(30, desk_model.config.vocab, 4)
    s = Session(desk_model, capacity=64, dtype="f64")
    s.prefill(prompt[:-1])
    a = s.decode_step(prompt[-1])
    b = Session(desk_model, capacity=64, dtype="f64").prefill(prompt)
    assert np.max(np.abs(a - b)) <= 1e-12 * max(1.0, np.abs(b).max())


@pytest.mark.parametrize("plan", ["eager", "split", "per_layer"])
def test_routes_agree_f64(desk_model, plan):
    prompt = tokens(33, desk_model.config.vocab, 5)
    outs = {}
    for route in ("dense_kv", "lowrank_history"):
        s = Session(desk_model, capacity=64, dtype="f64", attn_route=route, plan_mode=plan)
        s.prefill(prompt)
        outs[route] = [s.decode_step(t) for t in (1, 2, 3, 4)]
    for a, b in zip(outs["dense_kv"], outs["lowrank_history"]):
        assert np.max(np.abs(a - b)) <= 1e-12 * max(1.0, np.abs(a).max())


def test_recon_flops_constant_vs_linear(tiny_model):
    cfg = tiny_model.config
    dense = Session(tiny_model, capacity=64, attn_route="dense_kv")
    low = Session(tiny_model, capacity=64, attn_route="lowrank_history")
    for s in (dense, low):
        s.prefill([1, 2, 3])
        for t in range(10):
            s.decode_step(t)
    fd = [st.recon_flops for st in dense.steps]
    fl = [st.recon_flops for st in low.steps]
    per_layer_q = sum(2 * cfg.d_model * layer.q.rank for layer in tiny_model.layers)
    per_pos = sum(2 * cfg.d_model * (layer.k.rank + layer.v.rank) for layer in tiny_model.layers)
    assert len(set(fd)) == 1 and fd[0] == per_layer_q + per_pos
    assert fl == [per_layer_q + per_pos * (n + 1) for n in range(3, 13)]


def test_lowrank_history_attend(tiny_model):
    cfg = tiny_model.config
    s = Session(tiny_model, capacity=32, dtype="f64", attn_route="lowrank_history")
    prompt = [4, 8, 15, 16, 23, 42]
    s.prefill(prompt)
    q = np.random.default_rng(0).standard_normal((1, cfg.d_model))
    got = lowrank_history_attend(s, 1, q)
    d = Session(tiny_model, capacity=32, dtype="f64")
    d.prefill(prompt)
    kh, vh = d.cache.keys(1), d.cache.values(1)
    qh = q.reshape(cfg.n_heads, 1, cfg.d_head)
    w = np.exp(qh @ kh.transpose(0, 2, 1) / np.sqrt(cfg.d_head))
    want = ((w / w.sum(-1, keepdims=True)) @ vh).reshape(1, cfg.d_model)
    assert np.max(np.abs(got.reshape(1, -1) - want)) <= 1e-12
    with pytest.raises(ConfigurationError):
        lowrank_history_attend(d, 0, q)


def test_generate_zero_new(tiny_model):
    s = Session(tiny_model, capacity=16)
    res = s.generate([1, 2, 3], 0)
    assert res.tokens == [] and s.position == 3


def test_generate_is_deterministic(tiny_model):
    a = Session(tiny_model, capacity=32).generate([9, 8, 7], 12)
    b = Session(tiny_model, capacity=32).generate([9, 8, 7], 12)
    assert a.tokens == b.tokens
    assert [(x.dispatch_count, x.alloc_count) for x in a.steps] == [(x.dispatch_count, x.alloc_count) for x in b.steps]


def test_decode_errors(tiny_model):
    s = Session(tiny_model, capacity=4)
    with pytest.raises(ConfigurationError):
        s.decode_step(1)
    s.prefill([1, 2, 3])
    s.decode_step(1)
    with pytest.raises(CapacityError):
        s.decode_step(1)
    with pytest.raises(CapacityError):
        Session(tiny_model, capacity=4).generate([1, 2, 3], 2)


def test_session_rejects_unknown_axes(tiny_model):
    for kw in ({"attn_route": "x"}, {"plan_mode": "x"}, {"dtype": "bf16"}, {"ffn_backend": "x"}):
        with pytest.raises(ConfigurationError):
            Session(tiny_model, capacity=8, **kw)


def test_rewind_reuses_positions(tiny_model):
    s = Session(tiny_model, capacity=32, dtype="f64")
    s.prefill([1, 2, 3, 4])
    first = s.decode_step(5)
    s.decode_step(6)
    s.rewind(2)
    assert np.array_equal(s.decode_step(5), first)


# -- FFN backends -----------------------------------------------------------------


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 1e-6)])
def test_packed_equals_no_merge(tiny_model, dtype, tol):
    model = tiny_model.astype(dtype)
    x = np.random.default_rng(1).standard_normal((50, model.config.d_model)).astype(dtype)
    for layer in model.layers:
        a, b = ffn_packed(x, layer), ffn_no_merge(x, layer)
        assert np.max(np.abs(a - b)) <= tol * np.max(np.abs(b))


def test_ffn_zero_input(tiny_model):
    x = np.zeros((3, tiny_model.config.d_model))
    for fn in (ffn_packed, ffn_no_merge):
        assert np.array_equal(fn(x, tiny_model.layers[0]), np.zeros_like(x))


def test_ffn_shape_error(tiny_model):
    with pytest.raises(ShapeError):
        ffn_packed(np.zeros((1, 3)), tiny_model.layers[0])


def test_packed_issues_one_input_gemm(tiny_model):
    x = np.ones((1, tiny_model.config.d_model))
    layer = tiny_model.layers[0]
    counts = {}
    for name, fn in (("packed", ffn_packed), ("no_merge", ffn_no_merge)):
        c = Counters(trace=[])
        fn(x, layer, EagerExecutor(np.float64, c))
        counts[name] = sum(kind == "gemm" for kind, _ in c.trace)
    # input side 1 vs 2, plus up.B, gate.B and the two down factors in both
    assert counts == {"packed": 5, "no_merge": 6}


# -- reference oracle -------------------------------------------------------------


def _hand_model():
    cfg = ModelConfig(1, 2, 1, 2, 2, 2)
    z = np.zeros((2, 2))
    layer = DenseLayer(q=z, k=z, v=z, o=z, up=z, gate=z, down=z, attn_norm=np.ones(2), ffn_norm=np.ones(2))
    return DenseModel(cfg, [layer], np.array([[3.0, 4.0], [1.0, 0.0]]), np.eye(2), np.ones(2))


def test_reference_hand_checkable():
    logits = reference_forward_nocache(_hand_model(), [0])
    # zero projections leave the embedding; rmsnorm of [3, 4] has RMS sqrt(12.5)
    assert np.allclose(logits[0], np.array([3.0, 4.0]) / np.sqrt(12.5 + 1e-5), atol=1e-12)


def test_reference_last_token_matters(tiny_dense):
    a = reference_forward_nocache(tiny_dense, [1, 2, 3])[-1]
    b = reference_forward_nocache(tiny_dense, [1, 2, 4])[-1]
    assert not np.allclose(a, b)


def test_reference_shape_errors(tiny_dense):
    with pytest.raises(ShapeError):
        reference_forward_nocache(tiny_dense, [])
    with pytest.raises(ShapeError):
        reference_forward_nocache(tiny_dense, [10_000])


def test_rope_rows_matches_packed_heads():
    from lowrank_serve.tensor import rope_apply, rope_tables

    x = np.random.default_rng(3).standard_normal((5, 16))
    cos, sin = rope_tables(5, 8)
    y = rope_rows(x, cos, sin, 2)
    for t in range(5):
        for h in range(2):
            assert np.allclose(y[t, h * 8 : (h + 1) * 8], rope_apply(x[t, h * 8 : (h + 1) * 8], t), atol=1e-14)
