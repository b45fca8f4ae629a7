"""Automatic construction of (original, positive, negative) training triples.

Positives come from word alignment between a sentence and its paraphrase or
translation; negatives come from filtered masked-token predictions.
"""

from __future__ import annotations

import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .provider import CONTINUATION, SPECIAL_TOKENS, MaskedPredictionSet

log = logging.getLogger(__name__)

MONO = "monolingual"
XL = "crosslingual"

Predictor = Callable[[Sequence[str], int], MaskedPredictionSet]

_NON_WORD = re.compile(r"^[\W\d_]+$", re.UNICODE)


class EmbeddingFormatError(ValueError):
    pass


# --------------------------------------------------------------------------
# embeddings
# --------------------------------------------------------------------------


class EmbeddingTable:
    """Static word vectors; lookup tries the exact form, then lowercase."""

    def __init__(self, dim: int, entries: dict[str, np.ndarray] | None = None):
        self.dim = dim
        self.entries: dict[str, np.ndarray] = {}
        self._lower: dict[str, np.ndarray] = {}
        self.warnings = 0
        for tok, vec in (entries or {}).items():
            self.add(tok, vec)

    def add(self, token: str, vector) -> bool:
        vec = np.asarray(vector, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise EmbeddingFormatError(f"vector for {token!r} has shape {vec.shape}, expected ({self.dim},)")
        if token in self.entries:
            self.warnings += 1
            return False
        self.entries[token] = vec
        self._lower.setdefault(token.lower(), vec)
        return True

    def get(self, token: str) -> np.ndarray | None:
        vec = self.entries.get(token)
        if vec is None:
            vec = self._lower.get(token.lower())
        return vec

    def __contains__(self, token: str) -> bool:
        return self.get(token) is not None

    def __len__(self):
        return len(self.entries)

    def save(self, path) -> None:
        from .io_utils import atomic_write_text

        lines = [f"{len(self.entries)} {self.dim}"]
        for tok, vec in self.entries.items():
            lines.append(tok + " " + " ".join(repr(float(x)) for x in vec))
        atomic_write_text(path, "\n".join(lines) + "\n")


def load_embedding_table(path) -> EmbeddingTable:
    """Read a text vector file (optional "<count> <dim>" header line)."""
    table = None
    malformed = 0
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.rstrip("\n").rstrip().split(" ")
            if not parts or parts == [""]:
                continue
            if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                table = EmbeddingTable(int(parts[1]))
                continue
            try:
                vec = [float(x) for x in parts[1:]]
            except ValueError:
                malformed += 1
                continue
            if not vec:
                malformed += 1
                continue
            if table is None:
                table = EmbeddingTable(len(vec))
            if len(vec) != table.dim:
                raise EmbeddingFormatError(
                    f"{path}:{lineno}: vector has {len(vec)} components, expected {table.dim}"
                )
            table.add(parts[0], vec)
    if table is None:
        raise EmbeddingFormatError(f"{path}: no vectors found")
    table.warnings += malformed
    if table.warnings:
        log.warning("%s: %d malformed or duplicate lines skipped", path, table.warnings)
    return table


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"cosine of vectors with shapes {u.shape} and {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


def edit_distance(a: str, b: str) -> int:
    """Levenshtein distance with unit costs."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def is_candidate_word(token: str) -> bool:
    """False for special markers, subword continuations, punctuation and numerals."""
    return (token not in SPECIAL_TOKENS and not token.startswith(CONTINUATION)
            and _NON_WORD.match(token) is None)


# --------------------------------------------------------------------------
# configuration and records
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FilterConfig:
    mode: str = MONO
    lam: float = 0.6
    top_k: int = 100
    min_prob: float = 0.003
    sigma_mult: float = 1.0
    ci_z: float = 0.674  # one-sided 50% normal quantile for the crosslingual alignment bound
    edit_gate: int = 3
    per_target_cap: int | None = None
    validation_fraction: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.mode not in (MONO, XL):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not 0.0 < self.min_prob < 1.0:
            raise ValueError("min_prob (delta) must lie in (0, 1)")
        if self.top_k < 1:
            raise ValueError("top_k must be at least 1")
        if not -1.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [-1, 1]")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in [0, 1)")

    @classmethod
    def monolingual(cls, **kw) -> "FilterConfig":
        return cls(**{"mode": MONO, "lam": 0.6, "top_k": 100, "min_prob": 0.003, "sigma_mult": 1.0, **kw})

    @classmethod
    def crosslingual(cls, **kw) -> "FilterConfig":
        return cls(**{"mode": XL, "top_k": 30, "min_prob": 0.001, "sigma_mult": 1.282,
                      "per_target_cap": 100, **kw})

    @classmethod
    def for_mode(cls, mode: str, **kw) -> "FilterConfig":
        return cls.crosslingual(**kw) if mode == XL else cls.monolingual(**kw)


@dataclass
class SentenceRecord:
    tokens: list[str]
    target_index: int
    lang: str = "en"

    def __post_init__(self):
        if not 0 <= self.target_index < len(self.tokens):
            raise IndexError(f"target index {self.target_index} outside sentence of {len(self.tokens)} words")

    @property
    def target(self) -> str:
        return self.tokens[self.target_index]

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens), "target_index": self.target_index, "lang": self.lang}

    @classmethod
    def from_dict(cls, d: dict) -> "SentenceRecord":
        return cls(list(d["tokens"]), int(d["target_index"]), d.get("lang", "en"))


@dataclass
class TrainingTriple:
    id: str
    original: SentenceRecord
    positive: SentenceRecord
    negative: SentenceRecord
    mode: str = MONO
    language_pair: str | None = None

    def to_dict(self) -> dict:
        return {"id": self.id, "mode": self.mode, "language_pair": self.language_pair,
                "original": self.original.to_dict(), "positive": self.positive.to_dict(),
                "negative": self.negative.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingTriple":
        return cls(str(d["id"]), SentenceRecord.from_dict(d["original"]), SentenceRecord.from_dict(d["positive"]),
                   SentenceRecord.from_dict(d["negative"]), d.get("mode", MONO), d.get("language_pair"))


# --------------------------------------------------------------------------
# alignment
# --------------------------------------------------------------------------


@dataclass
class Alignment:
    M: np.ndarray  # cosine matrix, -inf where a word has no vector
    A: set[int]  # target-side indices aligned to some non-target source word
    pairs: list[tuple[int, int]]


def similarity_matrix(src: Sequence[str], tgt: Sequence[str], Z: EmbeddingTable) -> np.ndarray:
    M = np.full((len(src), len(tgt)), -np.inf)
    tv = [Z.get(w) for w in tgt]
    for i, w in enumerate(src):
        u = Z.get(w)
        if u is None:
            continue
        for j, v in enumerate(tv):
            if v is not None:
                M[i, j] = cosine(u, v)
    return M


def mutual_argmax_align(S: SentenceRecord, S_p: SentenceRecord, Z: EmbeddingTable) -> Alignment:
    """Mutual best-match alignment of every non-target word of ``S``."""
    if not S.tokens or not S_p.tokens:
        raise ValueError("alignment needs two non-empty sentences")
    M = similarity_matrix(S.tokens, S_p.tokens, Z)
    A: set[int] = set()
    pairs = []
    for i in range(M.shape[0]):
        if i == S.target_index or not np.isfinite(M[i]).any():
            continue
        j = int(np.argmax(M[i]))
        if int(np.argmax(M[:, j])) == i:
            A.add(j)
            pairs.append((i, j))
    return Alignment(M, A, pairs)


def _finite_stats(values: np.ndarray) -> tuple[float, float]:
    vals = values[np.isfinite(values)]
    if vals.size == 0:
        return math.nan, math.nan
    return float(vals.mean()), float(vals.std())


def align_target_mono(S: SentenceRecord, S_p: SentenceRecord, Z: EmbeddingTable, cfg: FilterConfig,
                      alignment: Alignment | None = None) -> int | None:
    al = alignment or mutual_argmax_align(S, S_p, Z)
    row = al.M[S.target_index]
    mu, sd = _finite_stats(al.M)
    if math.isnan(mu):
        return None
    threshold = mu + cfg.sigma_mult * sd
    for j in np.argsort(-row, kind="stable"):
        j = int(j)
        if j in al.A or not np.isfinite(row[j]):
            continue
        if row[j] > threshold:
            return j
    return None


def align_target_xl(S: SentenceRecord, S_p: SentenceRecord, Z: EmbeddingTable, cfg: FilterConfig,
                    alignment: Alignment | None = None) -> int | None:
    al = alignment or mutual_argmax_align(S, S_p, Z)
    row = al.M[S.target_index]
    mu, sd = _finite_stats(al.M)
    if math.isnan(mu):
        return None
    upper = mu + cfg.sigma_mult * sd
    if al.pairs:
        sims = np.array([al.M[i, j] for i, j in al.pairs])
        lower = float(sims.mean()) - cfg.ci_z * float(sims.std())
    else:
        lower = -math.inf
    best, best_sim = None, -math.inf
    for j in range(len(row)):
        if j in al.A or not np.isfinite(row[j]):
            continue
        if row[j] > upper and row[j] >= lower and row[j] > best_sim:
            best, best_sim = j, row[j]
    return best


# --------------------------------------------------------------------------
# masked-prediction filters
# --------------------------------------------------------------------------


def select_negative_mono(S: SentenceRecord, t: int, predictor: Predictor, Z: EmbeddingTable,
                         cfg: FilterConfig) -> str | None:
    w_t = S.tokens[t]
    zt = Z.get(w_t)
    if zt is None:
        return None
    preds = predictor(S.tokens, t)
    for tok, _ in preds.top(cfg.top_k, cfg.min_prob):
        if tok.lower() == w_t.lower() or not is_candidate_word(tok):
            continue
        z = Z.get(tok)
        if z is None:
            continue
        if cosine(z, zt) < cfg.lam:
            return tok
    return None


def enhance_positive_mono(S_p: SentenceRecord, p_index: int, w_t: str, predictor: Predictor,
                          Z: EmbeddingTable, cfg: FilterConfig) -> str:
    """Swap a surface-similar ``w_p`` for a more distant paraphrase when one qualifies."""
    w_p = S_p.tokens[p_index]
    if edit_distance(w_t.lower(), w_p.lower()) > cfg.edit_gate:
        return w_p
    zt = Z.get(w_t)
    if zt is None:
        return w_p
    preds = predictor(S_p.tokens, p_index)
    for tok, _ in preds.top(cfg.top_k, cfg.min_prob):
        low = tok.lower()
        if low == w_t.lower() or low == w_p.lower() or not is_candidate_word(tok):
            continue
        if edit_distance(low, w_t.lower()) <= cfg.edit_gate:
            continue
        z = Z.get(tok)
        if z is not None and cosine(z, zt) >= cfg.lam:
            return tok
    return w_p


def select_negative_xl(S_p: SentenceRecord, p_index: int, w_t: str, w_p: str, predictor: Predictor,
                       Z: EmbeddingTable, cfg: FilterConfig) -> str | None:
    zt, zp = Z.get(w_t), Z.get(w_p)
    if zt is None or zp is None:
        return None
    preds = predictor(S_p.tokens, p_index)
    cands = []
    for tok, _ in preds.top(cfg.top_k, cfg.min_prob):
        if not is_candidate_word(tok):
            continue
        z = Z.get(tok)
        if z is not None:
            cands.append((tok, cosine(z, zp), cosine(z, zt)))
    if not cands:
        return None
    mean_to_p = float(np.mean([c[1] for c in cands]))
    ref = cosine(zp, zt)
    for tok, to_p, to_t in cands:  # already in descending probability
        if to_p < mean_to_p and to_t < ref:
            return tok
    return None


# --------------------------------------------------------------------------
# pipeline
# --------------------------------------------------------------------------


@dataclass
class CorpusStats:
    pairs_read: int = 0
    bad_lines: int = 0
    targets_tried: int = 0
    no_alignment: int = 0
    no_negative: int = 0
    capped: int = 0
    enhanced: int = 0
    emitted: int = 0
    train: int = 0
    validation: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class PairRecord:
    src_tokens: list[str]
    tgt_tokens: list[str]
    lang_src: str = "en"
    lang_tgt: str = "en"
    target_index: int | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "PairRecord":
        src, tgt = d["src_tokens"], d["tgt_tokens"]
        if not (isinstance(src, list) and isinstance(tgt, list) and src and tgt):
            raise ValueError("pair record needs two non-empty token lists")
        if not all(isinstance(t, str) for t in src + tgt):
            raise ValueError("tokens must be strings")
        ti = d.get("target_index")
        if ti is not None and not (isinstance(ti, int) and 0 <= ti < len(src)):
            raise ValueError(f"target_index {ti!r} out of range")
        return cls(src, tgt, d.get("lang_src", "en"), d.get("lang_tgt", "en"), ti)


def _target_positions(pair: PairRecord, Z: EmbeddingTable, targets: set[str] | None) -> list[int]:
    if pair.target_index is not None:
        return [pair.target_index]
    out = []
    for i, w in enumerate(pair.src_tokens):
        if not is_candidate_word(w) or w not in Z:
            continue
        if targets is not None and w.lower() not in targets:
            continue
        out.append(i)
    return out


def process_pair(pair: PairRecord, t: int, predictor: Predictor, Z: EmbeddingTable,
                 cfg: FilterConfig) -> tuple[TrainingTriple | None, str | None, bool]:
    """Build one triple; returns (triple, discard reason, positive enhanced)."""
    S = SentenceRecord(list(pair.src_tokens), t, pair.lang_src)
    probe = SentenceRecord(list(pair.tgt_tokens), 0, pair.lang_tgt)
    al = mutual_argmax_align(S, probe, Z)
    if cfg.mode == MONO:
        j = align_target_mono(S, probe, Z, cfg, al)
    else:
        j = align_target_xl(S, probe, Z, cfg, al)
    if j is None:
        return None, "no_alignment", False
    S_p = SentenceRecord(list(pair.tgt_tokens), j, pair.lang_tgt)
    enhanced = False
    if cfg.mode == MONO:
        new_p = enhance_positive_mono(S_p, j, S.target, predictor, Z, cfg)
        if new_p != S_p.tokens[j]:
            S_p.tokens[j] = new_p
            enhanced = True
        w_n = select_negative_mono(S, t, predictor, Z, cfg)
        if w_n is None:
            return None, "no_negative", enhanced
        neg_tokens = list(S.tokens)
        neg_tokens[t] = w_n
        S_n = SentenceRecord(neg_tokens, t, S.lang)
    else:
        w_n = select_negative_xl(S_p, j, S.target, S_p.target, predictor, Z, cfg)
        if w_n is None:
            return None, "no_negative", False
        neg_tokens = list(S_p.tokens)
        neg_tokens[j] = w_n
        S_n = SentenceRecord(neg_tokens, j, S_p.lang)
    lp = None if cfg.mode == MONO else f"{pair.lang_src}-{pair.lang_tgt}"
    return TrainingTriple("", S, S_p, S_n, cfg.mode, lp), None, enhanced


def split_validation(n: int, fraction: float, seed: int) -> set[int]:
    """Seeded random validation indices; at least one when n >= 2 and fraction > 0."""
    if n == 0 or fraction <= 0:
        return set()
    k = int(round(n * fraction))
    if n >= 2:
        k = max(1, k)
    k = min(k, n - 1) if n >= 2 else 0
    rng = np.random.default_rng(seed)
    return set(int(i) for i in rng.choice(n, size=k, replace=False))


@dataclass
class CorpusResult:
    train: list[TrainingTriple] = field(default_factory=list)
    validation: list[TrainingTriple] = field(default_factory=list)
    stats: CorpusStats = field(default_factory=CorpusStats)


def build_corpus(pairs: Iterable[PairRecord | dict | None], predictor: Predictor, Z: EmbeddingTable,
                 cfg: FilterConfig, targets: Iterable[str] | None = None) -> CorpusResult:
    """Run alignment and filtering over a pair stream.

    ``None`` or malformed dict entries count as bad lines. Pairs without a
    ``target_index`` are tried at every eligible source position (restricted
    to ``targets`` when given).
    """
    stats = CorpusStats()
    target_set = None if targets is None else {w.lower() for w in targets}
    emitted: list[TrainingTriple] = []
    per_target: Counter = Counter()
    for item in pairs:
        try:
            pair = item if isinstance(item, PairRecord) else PairRecord.from_dict(item)
        except (KeyError, TypeError, ValueError, AttributeError):
            stats.bad_lines += 1
            continue
        stats.pairs_read += 1
        for t in _target_positions(pair, Z, target_set):
            stats.targets_tried += 1
            triple, reason, enhanced = process_pair(pair, t, predictor, Z, cfg)
            stats.enhanced += int(enhanced)
            if triple is None:
                setattr(stats, reason, getattr(stats, reason) + 1)
                continue
            key = triple.original.target.lower()
            if cfg.per_target_cap is not None and per_target[key] >= cfg.per_target_cap:
                stats.capped += 1
                continue
            per_target[key] += 1
            triple.id = f"t{len(emitted):06d}"
            emitted.append(triple)
    stats.emitted = len(emitted)
    val_idx = split_validation(len(emitted), cfg.validation_fraction, cfg.seed)
    result = CorpusResult(stats=stats)
    for i, tr in enumerate(emitted):
        (result.validation if i in val_idx else result.train).append(tr)
    stats.train, stats.validation = len(result.train), len(result.validation)
    return result
