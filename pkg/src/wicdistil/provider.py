"""Frozen masked-language-model hidden states.

Two sources share one interface: :class:`ToyMLM`, a deterministic seeded
stand-in encoder, and :class:`FileProvider`, which serves stacks exported to
the HSX1 format by an external model. Helpers for target pooling and top-half
layer selection live here as well.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import nncore
from .nncore import ConfigurationError, EncoderConfig

CLS, SEP, MASK, PAD, UNK = "[CLS]", "[SEP]", "[MASK]", "[PAD]", "[UNK]"
SPECIAL_TOKENS = (CLS, SEP, MASK, PAD, UNK)
CONTINUATION = "##"

HSX_MAGIC = b"HSX1"
HSX_VERSION = 1


class HSXFormatError(ValueError):
    """Malformed HSX1 payload; ``offset`` is the byte position involved."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class HiddenStack:
    sentence_id: str
    subword_tokens: list[str]
    special_mask: list[bool]
    values: np.ndarray  # (n_subwords, n_layers, dim)
    target_span: tuple[int, int] | None = None
    word_spans: list[tuple[int, int]] | None = None

    def __post_init__(self):
        n = len(self.subword_tokens)
        if self.values.ndim != 3 or self.values.shape[0] != n:
            raise ValueError(f"values shape {self.values.shape} does not match {n} subwords")
        if len(self.special_mask) != n:
            raise ValueError("special_mask length differs from subword count")
        if self.target_span is not None:
            s, e = self.target_span
            if not (0 <= s < e <= n):
                raise ValueError(f"target span {self.target_span} out of bounds for {n} subwords")

    @property
    def num_layers(self) -> int:
        """Number of stored layers, i.e. transformer layers + 1."""
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    def with_target(self, span: tuple[int, int]) -> "HiddenStack":
        return HiddenStack(self.sentence_id, self.subword_tokens, self.special_mask, self.values,
                           tuple(span), self.word_spans)


@dataclass
class MaskedPredictionSet:
    position: int
    tokens: list[str]
    probs: np.ndarray
    vocab_size: int

    def top(self, k: int, min_prob: float) -> list[tuple[str, float]]:
        """The first ``k`` predictions, then those with probability > ``min_prob``."""
        return [(t, float(p)) for t, p in zip(self.tokens[:k], self.probs[:k]) if p > min_prob]


# --------------------------------------------------------------------------
# pooling and layer policy
# --------------------------------------------------------------------------


def pool_target_subwords(stack: HiddenStack) -> np.ndarray:
    """Layer-wise mean over the target's subwords, shape (layers, dim)."""
    if stack.target_span is None:
        raise ValueError(f"stack {stack.sentence_id!r} has no target span")
    s, e = stack.target_span
    return stack.values[s:e].mean(axis=0)


def top_layer_start(num_layers: int) -> int:
    """k = l/2 + 1 for an l-layer model."""
    if num_layers % 2:
        raise ConfigurationError(f"top-half layer policy needs an even layer count, got {num_layers}")
    return num_layers // 2 + 1


def select_top_layers(H: np.ndarray, num_layers: int) -> np.ndarray:
    """Rows k..l of an (l+1)-row layer matrix."""
    if H.shape[-2] != num_layers + 1:
        raise ConfigurationError(f"expected {num_layers + 1} layer rows, got {H.shape[-2]}")
    return H[..., top_layer_start(num_layers):, :]


# --------------------------------------------------------------------------
# toy MLM
# --------------------------------------------------------------------------


def chunk_word(word: str, size: int) -> list[str]:
    """Fixed-size character chunks; non-initial chunks get the ``##`` prefix."""
    if len(word) <= size:
        return [word]
    pieces = [word[i:i + size] for i in range(0, len(word), size)]
    return [pieces[0]] + [CONTINUATION + p for p in pieces[1:]]


def build_vocab(words: Iterable[str], subword_chunk: int = 6) -> list[str]:
    vocab = list(SPECIAL_TOKENS)
    seen = set(vocab)
    for w in words:
        for piece in chunk_word(w, subword_chunk):
            if piece not in seen:
                seen.add(piece)
                vocab.append(piece)
    return vocab


@dataclass(frozen=True)
class ToyMLMConfig:
    vocab: tuple[str, ...]
    num_layers: int = 4
    dim: int = 16
    heads: int = 2
    seed: int = 0
    subword_chunk: int = 6
    max_positions: int = 256

    def __post_init__(self):
        object.__setattr__(self, "vocab", tuple(self.vocab))
        if self.dim % self.heads:
            raise ConfigurationError(f"toy MLM dim {self.dim} not divisible by {self.heads} heads")
        for tok in SPECIAL_TOKENS:
            if self.vocab.count(tok) != 1:
                raise ConfigurationError(f"vocabulary must contain {tok} exactly once")
        if len(set(self.vocab)) != len(self.vocab):
            raise ConfigurationError("vocabulary has duplicate entries")

    @classmethod
    def from_words(cls, words: Iterable[str], **kw) -> "ToyMLMConfig":
        return cls(vocab=tuple(build_vocab(words, kw.get("subword_chunk", 6))), **kw)

    def to_dict(self) -> dict:
        return {"vocab": list(self.vocab), "num_layers": self.num_layers, "dim": self.dim,
                "heads": self.heads, "seed": self.seed, "subword_chunk": self.subword_chunk,
                "max_positions": self.max_positions}


class ToyMLM:
    """Seeded random post-norm encoder with tied output embeddings.

    Weights are drawn once at construction and never updated; hidden states
    are computed in float64 and stored as float32.
    """

    def __init__(self, config: ToyMLMConfig):
        self.config = config
        self.index = {tok: i for i, tok in enumerate(config.vocab)}
        rng = np.random.default_rng(config.seed)
        d = config.dim
        self.token_embeddings = rng.normal(0.0, 1.0, size=(len(config.vocab), d))
        self.position_embeddings = rng.normal(0.0, 0.1, size=(config.max_positions, d))
        self.enc_config = EncoderConfig(dim=d, num_heads=config.heads, ffn_mult=4, dropout=0.0)
        store = nncore.ParamStore()
        for i in range(config.num_layers):
            nncore.init_encoder_params(store, f"layer{i}", self.enc_config, rng, dtype=np.float64)
        self._layers = [
            {k: v.data for k, v in store.group(f"layer{i}").items()} for i in range(config.num_layers)
        ]
        for arr in self._arrays():
            arr.flags.writeable = False

    def _arrays(self) -> list[np.ndarray]:
        out = [self.token_embeddings, self.position_embeddings]
        for layer in self._layers:
            out.extend(layer[k] for k in sorted(layer))
        return out

    def parameter_digest(self) -> str:
        h = hashlib.sha256()
        for arr in self._arrays():
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    # ------------------------------------------------------------------

    def tokenize(self, words: Sequence[str]) -> tuple[list[str], list[tuple[int, int]]]:
        """Subword tokens with markers, plus the subword span of each word."""
        subwords = [CLS]
        spans = []
        for w in words:
            pieces = [w] if w in SPECIAL_TOKENS else chunk_word(w, self.config.subword_chunk)
            spans.append((len(subwords), len(subwords) + len(pieces)))
            subwords.extend(pieces)
        subwords.append(SEP)
        return subwords, spans

    def _forward(self, subwords: list[str]) -> np.ndarray:
        if len(subwords) > self.config.max_positions:
            raise ConfigurationError(f"sentence of {len(subwords)} subwords exceeds max_positions")
        ids = [self.index.get(t, self.index[UNK]) for t in subwords]
        x = self.token_embeddings[ids] + self.position_embeddings[: len(ids)]
        layers = [x]
        for params in self._layers:
            x = nncore.transformer_encoder_layer(x, params, self.enc_config).data
            layers.append(x)
        return np.stack(layers, axis=1)

    def encode(self, words: Sequence[str], sentence_id: str = "") -> HiddenStack:
        if not words:
            raise ValueError("cannot encode an empty sentence")
        subwords, spans = self.tokenize(words)
        values = self._forward(subwords).astype(np.float32)
        special = [t in (CLS, SEP, PAD) for t in subwords]
        return HiddenStack(sentence_id, subwords, special, values, None, spans)

    def encode_target(self, words: Sequence[str], target_index: int, key: str = "") -> HiddenStack:
        stack = self.encode(words, key)
        return stack.with_target(stack.word_spans[target_index])

    def predict_masked(self, words: Sequence[str], mask_position: int) -> MaskedPredictionSet:
        """Mask word ``mask_position`` and rank the vocabulary at that slot."""
        if not 0 <= mask_position < len(words):
            raise IndexError(f"mask position {mask_position} outside sentence of {len(words)} words")
        masked = list(words)
        masked[mask_position] = MASK
        subwords, spans = self.tokenize(masked)
        pos = spans[mask_position][0]
        hidden = self._forward(subwords)[pos, -1]
        logits = self.token_embeddings @ hidden
        probs = nncore.softmax_rows(logits[None, :]).data[0]
        order = np.argsort(-probs, kind="stable")
        return MaskedPredictionSet(pos, [self.config.vocab[i] for i in order], probs[order], len(probs))

    # For the corpus builder: predictor(tokens, index) -> MaskedPredictionSet
    __call__ = predict_masked


# --------------------------------------------------------------------------
# HSX1 files
# --------------------------------------------------------------------------


def write_hidden_states(meta_path, bin_path, stacks: Iterable[HiddenStack]) -> int:
    """Write stacks as HSX1; returns the number written."""
    n = 0
    offset = len(HSX_MAGIC) + 1
    with open(bin_path, "wb") as fb, open(meta_path, "w", encoding="utf-8") as fm:
        fb.write(HSX_MAGIC + bytes([HSX_VERSION]))
        for st in stacks:
            payload = np.ascontiguousarray(st.values, dtype="<f4").tobytes()
            rec = {
                "id": st.sentence_id,
                "tokens": list(st.subword_tokens),
                "special_mask": [bool(b) for b in st.special_mask],
                "target_start": None if st.target_span is None else int(st.target_span[0]),
                "target_end": None if st.target_span is None else int(st.target_span[1]),
                "offset_bytes": offset,
                "n_subwords": st.values.shape[0],
                "n_layers": st.values.shape[1],
                "dim": st.values.shape[2],
            }
            if st.word_spans is not None:
                rec["word_spans"] = [list(s) for s in st.word_spans]
            fb.write(payload)
            fm.write(json.dumps(rec, ensure_ascii=False) + "\n")
            offset += len(payload)
            n += 1
    return n


def _read_meta(meta_path) -> list[dict]:
    records = []
    with open(meta_path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if line.strip():
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise HSXFormatError(f"{meta_path}:{lineno}: bad metadata record: {exc}", 0) from exc
    return records


def load_hidden_states(meta_path, bin_path) -> Iterator[HiddenStack]:
    """Yield stacks in file order.

    The whole metadata file is validated against the payload size before the
    first record is produced, so a truncated file yields nothing.
    """
    records = _read_meta(meta_path)
    if not records:
        return
    data = Path(bin_path).read_bytes()
    head = len(HSX_MAGIC) + 1
    if len(data) < head or data[:4] != HSX_MAGIC:
        raise HSXFormatError("bad magic, expected HSX1", 0)
    if data[4] != HSX_VERSION:
        raise HSXFormatError(f"unsupported HSX version {data[4]}", 4)
    expected = head
    for rec in records:
        shape = (rec["n_subwords"], rec["n_layers"], rec["dim"])
        if rec["offset_bytes"] != expected:
            raise HSXFormatError(f"record {rec['id']!r} offset mismatch, expected {expected}", rec["offset_bytes"])
        if len(rec["tokens"]) != shape[0] or len(rec["special_mask"]) != shape[0]:
            raise HSXFormatError(f"record {rec['id']!r} token count disagrees with shape {shape}", expected)
        expected += 4 * shape[0] * shape[1] * shape[2]
        if expected > len(data):
            raise HSXFormatError(f"payload truncated in record {rec['id']!r}", len(data))
    if expected != len(data):
        raise HSXFormatError("trailing bytes after last record", expected)
    for rec in records:
        shape = (rec["n_subwords"], rec["n_layers"], rec["dim"])
        off = rec["offset_bytes"]
        values = np.frombuffer(data, dtype="<f4", count=shape[0] * shape[1] * shape[2], offset=off)
        values = values.reshape(shape).astype(np.float32)
        if not np.isfinite(values).all():
            raise HSXFormatError(f"non-finite values in record {rec['id']!r}", off)
        span = None
        if rec.get("target_start") is not None:
            span = (rec["target_start"], rec["target_end"])
        spans = rec.get("word_spans")
        yield HiddenStack(rec["id"], list(rec["tokens"]), [bool(b) for b in rec["special_mask"]], values,
                          span, None if spans is None else [tuple(s) for s in spans])


class FileProvider:
    """Serves pre-exported stacks by id.

    Lookups use the ``key`` passed by callers (``<triple id>:original`` etc.
    for training, ``<task>:<line>:<side>`` for evaluation); the word tokens
    are used only to pick the word's subword span from ``word_spans``.
    """

    def __init__(self, meta_path, bin_path):
        self.stacks = {st.sentence_id: st for st in load_hidden_states(meta_path, bin_path)}
        first = next(iter(self.stacks.values()), None)
        self.num_layers = None if first is None else first.num_layers - 1
        self.dim = None if first is None else first.dim

    def parameter_digest(self) -> str:
        h = hashlib.sha256()
        for key in sorted(self.stacks):
            h.update(self.stacks[key].values.tobytes())
        return h.hexdigest()

    def encode(self, words: Sequence[str], sentence_id: str = "") -> HiddenStack:
        try:
            return self.stacks[sentence_id]
        except KeyError:
            raise KeyError(f"no hidden states stored for id {sentence_id!r}") from None

    def encode_target(self, words: Sequence[str], target_index: int, key: str = "") -> HiddenStack:
        st = self.encode(words, key)
        if st.word_spans is not None:
            return st.with_target(st.word_spans[target_index])
        if st.target_span is None:
            raise ValueError(f"stack {key!r} carries neither word spans nor a target span")
        return st


def provider_shape(provider) -> tuple[int, int]:
    """(number of transformer layers, hidden width) of a provider."""
    if isinstance(provider, ToyMLM):
        return provider.config.num_layers, provider.config.dim
    return provider.num_layers, provider.dim
