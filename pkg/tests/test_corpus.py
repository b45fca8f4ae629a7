import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wicdistil import corpus, oracles
from wicdistil.corpus import EmbeddingTable, FilterConfig, SentenceRecord
from wicdistil.provider import MaskedPredictionSet


class Stub:
    def __init__(self, tokens, probs):
        self.ps = MaskedPredictionSet(0, list(tokens), np.asarray(probs, dtype=float), len(tokens))

    def __call__(self, tokens, index):
        return self.ps


def table(d):
    t = EmbeddingTable(len(next(iter(d.values()))))
    for k, v in d.items():
        t.add(k, v)
    return t


# ---------------------------------------------------------------- embeddings


def test_embedding_table_lookup_and_duplicates():
    t = EmbeddingTable(2)
    assert t.add("Bank", [1, 0])
    assert not t.add("Bank", [0, 1])
    assert t.warnings == 1
    np.testing.assert_array_equal(t.get("bank"), [1, 0])
    assert t.get("river") is None


def test_load_embedding_table(tmp_path):
    p = tmp_path / "e.txt"
    p.write_text("3 2\na 1 0\nb 0 1\nbad x y\n")
    t = corpus.load_embedding_table(p)
    assert len(t) == 2 and t.dim == 2 and t.warnings == 1
    p.write_text("a 1 0\nb 0 1 2\n")
    with pytest.raises(corpus.EmbeddingFormatError, match="expected 2"):
        corpus.load_embedding_table(p)


def test_embedding_save_load_round_trip(tmp_path):
    t = table({"a": [0.1, 0.2], "b": [1.5, -2.0]})
    t.save(tmp_path / "e.txt")
    back = corpus.load_embedding_table(tmp_path / "e.txt")
    np.testing.assert_array_equal(back.get("b"), [1.5, -2.0])


def test_cosine_zero_vector():
    assert corpus.cosine([0, 0], [1, 0]) == 0.0
    assert corpus.cosine([1, 0], [1, 0]) == pytest.approx(1.0)


@given(st.text("abcd", max_size=6), st.text("abcd", max_size=6))
def test_edit_distance_matches_recursive(a, b):
    assert corpus.edit_distance(a, b) == oracles.edit_distance_rec(a, b)


def test_edit_distance_examples():
    assert corpus.edit_distance("kitten", "sitting") == 3
    assert corpus.edit_distance("", "abc") == 3


@pytest.mark.parametrize("tok,ok", [("river", True), ("Bank", True), ("##ing", False), (".", False),
                                    ("1999", False), ("[MASK]", False), ("--", False)])
def test_is_candidate_word(tok, ok):
    assert corpus.is_candidate_word(tok) is ok


def test_filter_config_presets():
    m, x = FilterConfig.monolingual(), FilterConfig.crosslingual()
    assert (m.lam, m.top_k, m.min_prob, m.sigma_mult) == (0.6, 100, 0.003, 1.0)
    assert (x.top_k, x.min_prob, x.sigma_mult, x.per_target_cap) == (30, 0.001, 1.282, 100)
    with pytest.raises(ValueError):
        FilterConfig(min_prob=0.0)


# ---------------------------------------------------------------- alignment


def test_alignment_hand_example():
    # "the bank river" vs "la banque rive": bank has no mutual partner (t excluded)
    Z = table({"the": [1, 0, 0], "la": [1, 0.05, 0], "bank": [0, 1, 0], "banque": [0.1, 1, 0.1],
               "river": [0, 0, 1], "rive": [0, 0.1, 1]})
    S = SentenceRecord(["the", "bank", "river"], 1)
    S_p = SentenceRecord(["la", "banque", "rive"], 0)
    al = corpus.mutual_argmax_align(S, S_p, Z)
    assert sorted(al.pairs) == [(0, 0), (2, 2)]
    assert al.A == {0, 2}
    assert corpus.align_target_mono(S, S_p, Z, FilterConfig.monolingual()) == 1
    # 0.990 falls below the crosslingual lower bound set by the two aligned pairs (~0.9956)
    assert corpus.align_target_xl(S, S_p, Z, FilterConfig.crosslingual()) is None
    Z.entries["banque"] = Z._lower["banque"] = np.array([0.0, 1.0, 0.01])
    assert corpus.align_target_xl(S, S_p, Z, FilterConfig.crosslingual()) == 1


def test_alignment_no_vectors():
    Z = table({"x": [1.0, 0.0]})
    S = SentenceRecord(["a", "b"], 0)
    S_p = SentenceRecord(["c"], 0)
    assert corpus.align_target_mono(S, S_p, Z, FilterConfig.monolingual()) is None
    assert corpus.align_target_xl(S, S_p, Z, FilterConfig.crosslingual()) is None


def test_alignment_random_against_bruteforce():
    from wicdistil.selftest import _knife_edge, oracle_matrix, random_alignment_instance

    rng = np.random.default_rng(11)
    checked = 0
    while checked < 200:
        S, S_p, Z, vecs = random_alignment_instance(rng)
        M = oracle_matrix(S, S_p, vecs)
        if _knife_edge(M, S.target_index, oracles.mutual_pairs_bruteforce(M, S.target_index)):
            continue
        checked += 1
        assert corpus.align_target_mono(S, S_p, Z, FilterConfig.monolingual()) == \
            oracles.align_mono_bruteforce(M, S.target_index)
        assert corpus.align_target_xl(S, S_p, Z, FilterConfig.crosslingual()) == \
            oracles.align_xl_bruteforce(M, S.target_index)


# ---------------------------------------------------------------- filters


def test_negative_mono_takes_first_dissimilar():
    Z = table({"bank": [1, 0], "banks": [0.99, 0.1], "river": [0, 1], "shore": [0.1, 1]})
    pred = Stub(["bank", "banks", "##s", "river", "shore"], [0.4, 0.3, 0.1, 0.1, 0.1])
    S = SentenceRecord(["the", "bank"], 1)
    assert corpus.select_negative_mono(S, 1, pred, Z, FilterConfig.monolingual()) == "river"


def test_negative_mono_respects_min_prob_and_top_k():
    Z = table({"bank": [1, 0], "river": [0, 1]})
    S = SentenceRecord(["bank"], 0)
    assert corpus.select_negative_mono(S, 0, Stub(["river"], [0.003]), Z, FilterConfig.monolingual()) is None
    cfg = FilterConfig.monolingual(top_k=1)
    assert corpus.select_negative_mono(S, 0, Stub(["bank", "river"], [0.5, 0.4]), Z, cfg) is None


def test_enhance_positive_gate():
    Z = table({"car": [1, 0], "cars": [1, 0.1], "automobile": [0.9, 0.2], "dog": [0, 1]})
    cfg = FilterConfig.monolingual()
    S_p = SentenceRecord(["the", "cars"], 1)
    pred = Stub(["cars", "carts", "dog", "automobile"], [0.4, 0.2, 0.2, 0.2])
    assert corpus.enhance_positive_mono(S_p, 1, "car", pred, Z, cfg) == "automobile"
    far = SentenceRecord(["the", "automobile"], 1)
    assert corpus.enhance_positive_mono(far, 1, "car", pred, Z, cfg) == "automobile"
    assert corpus.enhance_positive_mono(far, 1, "dog", pred, Z, cfg) == "automobile"


def test_negative_xl_uses_candidate_mean():
    Z = table({"bank": [1, 0, 0], "banque": [1, 0.1, 0], "rive": [0.2, 1, 0], "argent": [0.9, 0.3, 0.1],
               "pomme": [0, 0, 1]})
    cfg = FilterConfig.crosslingual()
    S_p = SentenceRecord(["la", "banque"], 1)
    pred = Stub(["banque", "argent", "rive", "pomme"], [0.5, 0.3, 0.1, 0.05])
    assert corpus.select_negative_xl(S_p, 1, "bank", "banque", pred, Z, cfg) == "rive"


def test_filters_random_against_fullscan():
    from wicdistil.selftest import StubPredictor, random_prediction_instance

    rng = np.random.default_rng(12)
    mono, xl = FilterConfig.monolingual(), FilterConfig.crosslingual()
    for _ in range(100):
        preds, Z, vecs, w_t, w_p = random_prediction_instance(rng)
        listed = list(zip(preds.tokens, map(float, preds.probs)))
        pred = StubPredictor(preds)
        S = SentenceRecord(["aa", w_t], 1)
        S_p = SentenceRecord(["cc", w_p], 1)
        assert corpus.select_negative_mono(S, 1, pred, Z, mono) == \
            oracles.negative_mono_fullscan(listed, w_t, vecs.get, 0.6, 100, 0.003)
        assert corpus.enhance_positive_mono(S_p, 1, w_t, pred, Z, mono) == \
            oracles.enhance_positive_fullscan(listed, w_p, w_t, vecs.get, 0.6, 100, 0.003)
        assert corpus.select_negative_xl(S_p, 1, w_t, w_p, pred, Z, xl) == \
            oracles.negative_xl_fullscan(listed, w_t, w_p, vecs.get, 30, 0.001)


# ---------------------------------------------------------------- pipeline


def test_split_validation_sizes():
    assert corpus.split_validation(0, 0.1, 0) == set()
    assert len(corpus.split_validation(2, 0.01, 0)) == 1
    assert len(corpus.split_validation(1000, 0.01, 0)) == 10
    assert corpus.split_validation(50, 0.1, 3) == corpus.split_validation(50, 0.1, 3)


def test_triple_dict_round_trip():
    tr = corpus.TrainingTriple("t1", SentenceRecord(["a", "b"], 0), SentenceRecord(["c"], 0),
                               SentenceRecord(["d", "e"], 1, "xx"), "crosslingual", "en-xx")
    assert corpus.TrainingTriple.from_dict(tr.to_dict()) == tr


def test_pair_record_validation():
    with pytest.raises(KeyError):
        corpus.PairRecord.from_dict({"src_tokens": ["a"]})
    with pytest.raises(ValueError):
        corpus.PairRecord.from_dict({"src_tokens": ["a"], "tgt_tokens": ["b"], "target_index": 3})


def _fixture_corpus(mode):
    from wicdistil.cli import RunConfig, make_provider
    from wicdistil.io_utils import iter_jsonl
    from wicdistil.synthetic import fixture_dir

    d = fixture_dir()
    rc = RunConfig.load(str(d / "config.json"))
    Z = corpus.load_embedding_table(d / "embeddings.txt")
    pairs = [rec for _, rec, _ in iter_jsonl(d / "pairs.jsonl")]
    return corpus.build_corpus(pairs, make_provider(rc), Z, FilterConfig.for_mode(mode, validation_fraction=0.1))


@pytest.mark.parametrize("mode", [corpus.MONO, corpus.XL])
def test_build_corpus_on_fixture(mode):
    res = _fixture_corpus(mode)
    s = res.stats
    assert s.bad_lines == 1 and s.pairs_read == 100
    assert s.targets_tried == s.no_alignment + s.no_negative + s.capped + s.emitted
    assert s.emitted == s.train + s.validation and s.validation >= 1
    ids = [t.id for t in res.train + res.validation]
    assert len(set(ids)) == len(ids)
    for t in res.train:
        assert t.mode == mode
        if mode == corpus.MONO:
            assert t.negative.tokens[t.negative.target_index] != t.original.target
        else:
            assert t.negative.tokens[t.negative.target_index] != t.positive.target


def _cap_setup():
    eye = np.eye(6)
    Z = EmbeddingTable(6)
    for i in range(5):
        Z.add(f"s{i}", eye[i])
        Z.add(f"t{i}", eye[i] + (0.0 if i == 0 else 0.05) * eye[(i + 1) % 5])
    Z.add("q", eye[5])
    pair = {"src_tokens": [f"s{i}" for i in range(5)], "tgt_tokens": [f"t{i}" for i in range(5)],
            "target_index": 0, "lang_src": "en", "lang_tgt": "xx"}
    return Z, pair, Stub(["t0", "q"], [0.6, 0.4])


def test_single_crosslingual_triple():
    Z, pair, pred = _cap_setup()
    res = corpus.build_corpus([pair], pred, Z, FilterConfig.crosslingual(validation_fraction=0.0))
    (tr,) = res.train
    assert tr.positive.target == "t0" and tr.negative.target == "q"
    assert tr.negative.tokens[1:] == tr.positive.tokens[1:]
    assert tr.language_pair == "en-xx" and tr.id == "t000000"


def test_per_target_cap():
    res = corpus.build_corpus([], None, table({"a": [1.0]}), FilterConfig.crosslingual())
    assert res.stats.emitted == 0 and res.train == []
    Z, pair, pred = _cap_setup()
    res = corpus.build_corpus([pair] * 5 + [None], pred, Z, FilterConfig.crosslingual(per_target_cap=2))
    assert res.stats.emitted == 2 and res.stats.capped == 3 and res.stats.bad_lines == 1
