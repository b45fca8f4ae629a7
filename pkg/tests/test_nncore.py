import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from wicdistil import nncore, oracles
from wicdistil.nncore import ConfigurationError, DimensionError, EncoderConfig, ParamStore, Tensor

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


def test_linear_worked_example():
    x = np.array([[1.0, 2.0]])
    W = np.array([[1.0, 0.0, -1.0], [0.5, 2.0, 1.0]])
    b = np.array([0.1, 0.2, 0.3])
    out = nncore.linear(x, W, b).data
    np.testing.assert_allclose(out, [[2.1, 4.2, 1.3]])
    np.testing.assert_allclose(out, oracles.matmul_loop(x.tolist(), W.tolist(), b.tolist()))


def test_linear_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(1, 3\).*\(2, 4\)"):
        nncore.linear(np.zeros((1, 3)), np.zeros((2, 4)), np.zeros(4))


def test_layer_norm_matches_loop():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 6))
    g, b = rng.normal(size=6), rng.normal(size=6)
    out = nncore.layer_norm(x, g, b, 1e-5).data
    for r in range(4):
        np.testing.assert_allclose(out[r], oracles.layer_norm_loop(x[r], g, b, 1e-5), atol=1e-12)


def test_layer_norm_rejects_bad_eps():
    with pytest.raises(ConfigurationError):
        nncore.layer_norm(np.zeros((1, 2)), np.ones(2), np.zeros(2), eps=0.0)


def test_gelu_known_values():
    out = nncore.gelu(np.array([0.0, 1.0, -1.0])).data
    np.testing.assert_allclose(out, [0.0, 0.8413447460685429, -0.15865525393145707], atol=1e-12)


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_softmax_rows_sum_to_one(x):
    p = nncore.softmax_rows(x).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    for r in range(x.shape[0]):
        np.testing.assert_allclose(p[r], oracles.softmax_loop(list(x[r])), atol=1e-12)


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite),
       st.floats(-5, 5, allow_nan=False))
def test_softmax_shift_invariant(x, c):
    np.testing.assert_allclose(nncore.softmax_rows(x).data, nncore.softmax_rows(x + c).data, atol=1e-10)


def test_softmax_large_logits_stable():
    p = nncore.softmax_rows(np.array([[1000.0, 1000.0, -1000.0]])).data
    np.testing.assert_allclose(p, [[0.5, 0.5, 0.0]])


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 4)), elements=finite))
def test_mean_pool_of_identical_rows_is_the_row(x):
    rows = np.repeat(x[:1], x.shape[0], axis=0)
    np.testing.assert_allclose(nncore.mean_pool(rows).data, x[0], atol=1e-12)


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 4)), elements=finite))
def test_mean_pool_gradient_is_uniform(x):
    t = Tensor(x, requires_grad=True)
    nncore.sum_all(nncore.mean_pool(t)).backward()
    np.testing.assert_allclose(t.grad, np.full_like(x, 1.0 / x.shape[0]))


def test_mean_pool_rejects_vector():
    with pytest.raises(DimensionError):
        nncore.mean_pool(np.zeros(3))


def test_encoder_config_rejects_indivisible_heads():
    with pytest.raises(ConfigurationError, match="divisible"):
        EncoderConfig(dim=10, num_heads=8)


def _attention_params(d, rng):
    return {k: rng.normal(size=(d, d)) * 0.5 if k.startswith("w") else rng.normal(size=d) * 0.1
            for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}


def test_attention_matches_loop_oracle():
    rng = np.random.default_rng(3)
    d, L, heads = 8, 3, 4
    p = _attention_params(d, rng)
    x = rng.normal(size=(L, d))
    out = nncore.multi_head_self_attention(x, {k: Tensor(v) for k, v in p.items()}, heads).data
    ref = oracles.attention_loop(x.tolist(), {k: v.tolist() for k, v in p.items()}, heads)
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_attention_batched_equals_unbatched():
    rng = np.random.default_rng(4)
    p = {k: Tensor(v) for k, v in _attention_params(8, rng).items()}
    x = rng.normal(size=(2, 3, 8))
    batched = nncore.multi_head_self_attention(x, p, 2).data
    for i in range(2):
        np.testing.assert_allclose(batched[i], nncore.multi_head_self_attention(x[i], p, 2).data, atol=1e-12)


def test_dropout_identity_in_eval_and_needs_rng_in_training():
    x = np.ones((3, 4))
    np.testing.assert_array_equal(nncore.dropout(x, 0.5, False, None).data, x)
    with pytest.raises(ConfigurationError):
        nncore.dropout(x, 0.5, True, None)


def test_dropout_inverted_scaling():
    x = np.ones((200, 50))
    out = nncore.dropout(x, 0.25, True, np.random.default_rng(0)).data
    assert set(np.unique(out)) <= {0.0, 1.0 / 0.75}
    assert abs(out.mean() - 1.0) < 0.05


def _encoder_store(d=8, heads=4, seed=0):
    store = ParamStore()
    cfg = EncoderConfig(dim=d, num_heads=heads, ffn_mult=2, dropout=0.1)
    nncore.init_encoder_params(store, "enc", cfg, np.random.default_rng(seed), np.float64)
    rng = np.random.default_rng(seed + 1)
    for _, t in store.items():
        if t.data.ndim == 1:
            t.data = t.data + rng.normal(0, 0.1, size=t.data.shape)
    return store, cfg


def test_encoder_layer_gradients_match_finite_differences():
    store, cfg = _encoder_store()
    x = np.random.default_rng(9).normal(size=(3, 8))

    def loss():
        h = nncore.transformer_encoder_layer(x, store.group("enc"), cfg, training=False)
        return nncore.sum_all(nncore.mul(nncore.mean_pool(h), np.arange(1.0, 9.0)))

    rep = nncore.check_gradients(store, loss, step=1e-4, tol=1e-5)
    assert rep.passed, (rep.worst, rep.max_error)
    assert rep.checked == store.num_values()


def test_gradient_check_catches_corrupted_gradient():
    store, cfg = _encoder_store()
    x = np.random.default_rng(9).normal(size=(3, 8))

    def loss():
        h = nncore.transformer_encoder_layer(x, store.group("enc"), cfg, training=False)
        return nncore.sum_all(nncore.mean_pool(h))

    store.zero_grad()
    loss().backward()
    bad = {n: t.grad.copy() for n, t in store.items()}
    bad["enc.w1"] = bad["enc.w1"] * 1.01
    rep = nncore.check_gradients(store, loss, analytic=bad)
    assert not rep.passed
    assert rep.worst == "enc.w1"


def test_gradient_check_reports_nonfinite_loss():
    store = ParamStore()
    store.add("w", np.array([1.0]))

    def loss():
        return nncore.scale(nncore.sum_all(store["w"]), math.inf)

    rep = nncore.check_gradients(store, loss)
    assert not rep.passed
    assert "unperturbed" in rep.failure


def test_gradient_check_names_parameter_when_perturbation_blows_up():
    store = ParamStore()
    store.add("weight", np.array([1.0, 2.0]))

    def loss():
        w = store["weight"]
        blown = w.data[1] != 2.0  # finite only at the base point
        return nncore.scale(nncore.sum_all(w), math.inf if blown else 1.0)

    rep = nncore.check_gradients(store, loss)
    assert not rep.passed
    assert "weight[1]" in rep.failure


def test_backward_accumulates_shared_parents():
    a = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    out = nncore.sum_all(nncore.mul(a, a))
    out.backward()
    np.testing.assert_allclose(a.grad, [4.0, 6.0])


def test_backward_requires_scalar_seed():
    a = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(DimensionError):
        nncore.scale(a, 2.0).backward()


def test_param_store_rejects_duplicates():
    s = ParamStore()
    s.add("x", np.zeros(2))
    with pytest.raises(KeyError):
        s.add("x", np.zeros(2))


def test_init_bounds():
    store = ParamStore()
    cfg = EncoderConfig(dim=16, num_heads=8, ffn_mult=4)
    nncore.init_encoder_params(store, "e", cfg, np.random.default_rng(0))
    assert np.abs(store["e.wq"].data).max() <= 1 / 4
    assert np.abs(store["e.w2"].data).max() <= 1 / 8
    np.testing.assert_array_equal(store["e.ln1_g"].data, 1.0)
    np.testing.assert_array_equal(store["e.bq"].data, 0.0)
