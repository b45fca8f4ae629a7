import numpy as np
import pytest

from wicdistil.nncore import ConfigurationError
from wicdistil.provider import (CLS, SEP, FileProvider, HiddenStack, HSXFormatError, MaskedPredictionSet, ToyMLM,
                                ToyMLMConfig, chunk_word, load_hidden_states, pool_target_subwords,
                                provider_shape, select_top_layers, top_layer_start, write_hidden_states)
from wicdistil.synthetic import toy_words


@pytest.fixture(scope="module")
def mlm():
    return ToyMLM(ToyMLMConfig.from_words(toy_words(30) + ["extraordinarily"], seed=2))


def test_top_layer_start_examples():
    assert top_layer_start(24) == 13
    assert top_layer_start(12) == 7
    assert top_layer_start(4) == 3
    with pytest.raises(ConfigurationError):
        top_layer_start(5)


def test_select_top_layers_rows():
    H = np.arange(25.0)[:, None] * np.ones((1, 3))
    top = select_top_layers(H, 24)
    assert top.shape == (12, 3)
    assert top[0, 0] == 13 and top[-1, 0] == 24
    with pytest.raises(ConfigurationError):
        select_top_layers(H, 12)


def test_select_top_layers_batched():
    H = np.zeros((2, 3, 5, 4))
    assert select_top_layers(H, 4).shape == (2, 3, 2, 4)


def test_chunk_word():
    assert chunk_word("abc", 6) == ["abc"]
    assert chunk_word("abcdefghij", 4) == ["abcd", "##efgh", "##ij"]


def test_pool_target_subwords_mean():
    vals = np.arange(24, dtype=np.float32).reshape(4, 3, 2)
    st = HiddenStack("s", list("abcd"), [False] * 4, vals, (1, 3))
    np.testing.assert_allclose(pool_target_subwords(st), vals[1:3].mean(axis=0))
    with pytest.raises(ValueError):
        pool_target_subwords(HiddenStack("s", list("abcd"), [False] * 4, vals))


def test_hidden_stack_validates_span():
    with pytest.raises(ValueError):
        HiddenStack("s", ["a"], [False], np.zeros((1, 2, 2)), (0, 2))


def test_toy_mlm_encode_shapes_and_markers(mlm):
    words = toy_words(30)[:4] + ["extraordinarily"]
    st = mlm.encode(words, "x")
    assert st.subword_tokens[0] == CLS and st.subword_tokens[-1] == SEP
    assert st.special_mask[0] and st.special_mask[-1] and not any(st.special_mask[1:-1])
    assert st.values.shape == (len(st.subword_tokens), 5, 16)
    assert st.values.dtype == np.float32
    s, e = st.word_spans[4]
    assert e - s == 3 and st.subword_tokens[s + 1].startswith("##")


def test_toy_mlm_deterministic(mlm):
    other = ToyMLM(mlm.config)
    words = toy_words(30)[:6]
    np.testing.assert_array_equal(mlm.encode(words).values, other.encode(words).values)
    assert mlm.parameter_digest() == other.parameter_digest()


def test_toy_mlm_weights_read_only(mlm):
    with pytest.raises(ValueError):
        mlm.token_embeddings[0, 0] = 1.0


def test_predict_masked_sorted_distribution(mlm):
    preds = mlm.predict_masked(toy_words(30)[:5], 2)
    assert len(preds.tokens) == preds.vocab_size == len(mlm.config.vocab)
    assert np.all(np.diff(preds.probs) <= 0)
    assert abs(preds.probs.sum() - 1.0) < 1e-9
    with pytest.raises(IndexError):
        mlm.predict_masked(["a"], 3)


def test_masked_prediction_set_top():
    ps = MaskedPredictionSet(0, ["a", "b", "c", "d"], np.array([0.5, 0.3, 0.15, 0.05]), 4)
    assert ps.top(3, 0.2) == [("a", 0.5), ("b", 0.3)]
    assert ps.top(2, 0.0) == [("a", 0.5), ("b", 0.3)]


def _stacks(mlm, n=3):
    words = toy_words(30)
    out = []
    for i in range(n):
        st = mlm.encode(words[i:i + 4 + i], f"s{i}")
        out.append(st.with_target(st.word_spans[1]) if i % 2 == 0 else st)
    return out


def test_hsx_round_trip(tmp_path, mlm):
    stacks = _stacks(mlm)
    write_hidden_states(tmp_path / "m.jsonl", tmp_path / "v.bin", stacks)
    back = list(load_hidden_states(tmp_path / "m.jsonl", tmp_path / "v.bin"))
    assert [b.sentence_id for b in back] == ["s0", "s1", "s2"]
    for a, b in zip(stacks, back):
        np.testing.assert_array_equal(a.values, b.values)
        assert a.target_span == b.target_span and a.word_spans == b.word_spans
    assert (tmp_path / "v.bin").read_bytes()[:5] == b"HSX1\x01"


def test_hsx_truncated_yields_nothing(tmp_path, mlm):
    write_hidden_states(tmp_path / "m.jsonl", tmp_path / "v.bin", _stacks(mlm))
    data = (tmp_path / "v.bin").read_bytes()
    (tmp_path / "v.bin").write_bytes(data[:-7])
    gen = load_hidden_states(tmp_path / "m.jsonl", tmp_path / "v.bin")
    with pytest.raises(HSXFormatError, match="truncated"):
        next(gen)


@pytest.mark.parametrize("mutate,msg", [
    (lambda d: b"XXXX" + d[4:], "magic"),
    (lambda d: d[:4] + b"\x02" + d[5:], "version"),
    (lambda d: d + b"\x00", "trailing"),
])
def test_hsx_bad_headers(tmp_path, mlm, mutate, msg):
    write_hidden_states(tmp_path / "m.jsonl", tmp_path / "v.bin", _stacks(mlm))
    (tmp_path / "v.bin").write_bytes(mutate((tmp_path / "v.bin").read_bytes()))
    with pytest.raises(HSXFormatError, match=msg):
        list(load_hidden_states(tmp_path / "m.jsonl", tmp_path / "v.bin"))


def test_hsx_error_carries_offset(tmp_path, mlm):
    write_hidden_states(tmp_path / "m.jsonl", tmp_path / "v.bin", _stacks(mlm))
    lines = (tmp_path / "m.jsonl").read_text().splitlines()
    lines[1] = lines[1].replace('"offset_bytes": ', '"offset_bytes": 1')
    (tmp_path / "m.jsonl").write_text("\n".join(lines) + "\n")
    with pytest.raises(HSXFormatError) as exc:
        list(load_hidden_states(tmp_path / "m.jsonl", tmp_path / "v.bin"))
    assert exc.value.offset > 0


def test_empty_meta_yields_nothing(tmp_path):
    (tmp_path / "m.jsonl").write_text("")
    assert list(load_hidden_states(tmp_path / "m.jsonl", tmp_path / "missing.bin")) == []


def test_file_provider_lookup(tmp_path, mlm):
    stacks = _stacks(mlm)
    write_hidden_states(tmp_path / "m.jsonl", tmp_path / "v.bin", stacks)
    fp = FileProvider(tmp_path / "m.jsonl", tmp_path / "v.bin")
    assert provider_shape(fp) == (4, 16)
    st = fp.encode_target([], 2, "s1")
    assert st.target_span == stacks[1].word_spans[2]
    with pytest.raises(KeyError, match="nope"):
        fp.encode([], "nope")
    assert len(fp.parameter_digest()) == 64
