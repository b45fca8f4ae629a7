import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wicdistil import evalkit, oracles
from wicdistil.distiller import DistillerConfig, DistillerModel
from wicdistil.evalkit import LabelledPair, RepSource, STSPair, WordPairInstance
from wicdistil.provider import ToyMLM, ToyMLMConfig
from wicdistil.synthetic import toy_words


@pytest.fixture(scope="module")
def env():
    words = toy_words(30)
    mlm = ToyMLM(ToyMLMConfig.from_words(words, num_layers=4, dim=16, seed=1))
    model = DistillerModel(DistillerConfig(dim=16, num_input_layers=2))
    return words, mlm, model


def test_threshold_worked_example():
    assert evalkit.tune_threshold([0.2, 0.8], [0, 1]) == 0.21


def test_threshold_ties_go_to_smallest():
    assert evalkit.tune_threshold([0.5, 0.5], [1, 1]) == 0.0


def test_binary_accuracy_boundary_is_positive():
    assert evalkit.binary_accuracy([0.5, 0.49], [1, 0], 0.5) == 1.0


@given(st.lists(st.tuples(st.floats(-1, 1, allow_nan=False), st.integers(0, 1)), min_size=1, max_size=20))
def test_threshold_matches_oracle(rows):
    sims, labels = zip(*rows)
    assert evalkit.tune_threshold(sims, labels) == oracles.threshold_grid_oracle(sims, labels)


def test_correlations_examples():
    assert evalkit.pearson_r([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert evalkit.spearman_rho([1, 2, 3], [1, 4, 9]) == pytest.approx(1.0)
    assert evalkit.spearman_rho([1, 2, 2, 3], [4, 3, 2, 1]) == pytest.approx(
        oracles.spearman_oracle([1, 2, 2, 3], [4, 3, 2, 1]), abs=1e-12)
    with pytest.raises(evalkit.UndefinedCorrelationError):
        evalkit.pearson_r([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        evalkit.spearman_rho([1], [2])


def test_cosimlex_change():
    assert evalkit.cosimlex_change(0.2, 0.5) == pytest.approx(0.3)


def test_rep_source_kinds(env):
    words, mlm, model = env
    with pytest.raises(ValueError):
        RepSource(mlm, "meaning")
    with pytest.raises(ValueError):
        RepSource(mlm, "other", model)
    v = {k: RepSource(mlm, k, model).target_vector(words[:5], 2) for k in evalkit.KINDS}
    assert all(x.shape == (16,) for x in v.values())
    assert not np.allclose(v["meaning"], v["context"])


def test_multiword_span(env):
    words, mlm, _ = env
    src = RepSource(mlm)
    span_vec = src.target_vector(words[:5], (1, 3))
    stack = mlm.encode(words[:5])
    s, e = stack.word_spans[1][0], stack.word_spans[2][1]
    H = stack.values[s:e].mean(axis=0).astype(np.float64)
    np.testing.assert_allclose(span_vec, H[3:].mean(axis=0), rtol=1e-6)


def test_same_context_similarity_is_one(env):
    words, mlm, model = env
    inst = WordPairInstance(words[:6], (2, 3), list(words[:6]), (2, 3), 1)
    for kind in evalkit.KINDS:
        assert evalkit.word_similarity(RepSource(mlm, kind, model), inst) == pytest.approx(1.0, abs=1e-6)


def test_evaluate_binary_and_graded(env):
    words, mlm, model = env
    rng = np.random.default_rng(0)
    data = []
    for i in range(8):
        a = [words[k] for k in rng.integers(0, 30, 6)]
        b = [words[k] for k in rng.integers(0, 30, 6)]
        b[1] = a[2]
        data.append(WordPairInstance(a, (2, 3), b, (1, 2), float(i % 2)))
    src = RepSource(mlm, "context", model)
    rep = evalkit.evaluate_binary(src, data[:4], data[4:])
    assert 0.0 <= rep.value <= 1.0 and rep.threshold in evalkit.THRESHOLD_GRID
    assert len(rep.similarities) == 4
    g = evalkit.evaluate_graded(src, data, metric="pearson")
    assert -1.0 <= g.value <= 1.0 and g.record()["metric"] == "pearson"


def test_sts_excludes_degenerate_subcorpus(env):
    words, mlm, _ = env
    pairs = [STSPair(words[0:4], words[1:5], 3.0, "a"), STSPair(words[5:9], words[10:14], 1.0, "a"),
             STSPair(words[2:6], words[2:6], 5.0, "a"), STSPair(words[0:4], words[4:8], 2.0, "solo"),
             STSPair(words[3:7], words[8:12], 2.0, "flat"), STSPair(words[6:9], words[1:4], 2.0, "flat")]
    rep = evalkit.sts_evaluate(RepSource(mlm), pairs)
    assert set(rep.details["subcorpora"]) == {"a"}
    assert rep.value == rep.details["subcorpora"]["a"]


def test_sentence_representation_skips_specials(env):
    words, mlm, _ = env
    stack = mlm.encode(words[:3])
    rep = evalkit.sentence_representation(RepSource(mlm), stack)
    keep = stack.values[1:-1].astype(np.float64)
    np.testing.assert_allclose(rep, keep[:, 3:].mean(axis=1).mean(axis=0), rtol=1e-6)


def test_common_and_different_pairs():
    common, diff = evalkit.common_and_different_pairs(["a", "b", "c"], ["c", "x", "A"])
    assert common == [(0, 2), (2, 0)]
    assert (1, 0) in diff and (0, 2) not in diff and len(diff) == 9 - 2


def test_bucketed_similarity(env):
    words, mlm, model = env
    pairs = [LabelledPair(words[:4], words[:4], True), LabelledPair(words[:4], words[10:14], False)]
    out = evalkit.bucketed_similarity(RepSource(mlm, "meaning", model), pairs)
    assert out["common_P"] == pytest.approx(1.0, abs=1e-6)
    assert out["common_N"] is None
    assert out["different_N"] is not None and out["different_P"] is not None


def test_layerwise_similarity(env):
    words, mlm, model = env
    targets = [(words[:5], 1), (words[5:10], 3)]
    base = evalkit.layerwise_similarity(None, mlm, targets)
    assert base.shape == (3, 5) and np.isnan(base[1:]).all()
    full = evalkit.layerwise_similarity(model, mlm, targets)
    np.testing.assert_allclose(full[0], base[0])
    assert np.isfinite(full).all() and np.all(np.abs(full) <= 1.0 + 1e-12)
    assert not math.isnan(full[1, -1])
