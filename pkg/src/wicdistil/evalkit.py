"""Evaluation protocols: word-pair similarity, STS, and the two analyses."""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .corpus import cosine
from .distiller import DistillerModel, reconstruction_target
from .provider import HiddenStack, pool_target_subwords, provider_shape, select_top_layers

log = logging.getLogger(__name__)

KINDS = ("baseline", "meaning", "context")
THRESHOLD_GRID = tuple(i / 100 for i in range(101))


class UndefinedCorrelationError(ValueError):
    pass


# --------------------------------------------------------------------------
# representation sources
# --------------------------------------------------------------------------


class RepSource:
    """Maps (sentence, target) to a vector: baseline mean, meaning, or context."""

    def __init__(self, provider, kind: str = "baseline", model: DistillerModel | None = None):
        if kind not in KINDS:
            raise ValueError(f"unknown representation kind {kind!r}; expected one of {KINDS}")
        if kind != "baseline" and model is None:
            raise ValueError(f"{kind} representations need a trained distiller")
        self.provider = provider
        self.kind = kind
        self.model = model
        self.num_layers, self.dim = provider_shape(provider)

    def from_layers(self, H: np.ndarray) -> np.ndarray:
        """Representation(s) from (..., l+1, d) layer matrices."""
        top = select_top_layers(np.asarray(H), self.num_layers)
        if self.kind == "baseline":
            return reconstruction_target(top).astype(np.float64)
        meaning, context = self.model.represent(top)
        return meaning if self.kind == "meaning" else context

    def target_vector(self, tokens: Sequence[str], span: tuple[int, int] | int, key: str = "") -> np.ndarray:
        """``span`` is a word index or a [start, end) word range (multi-word targets)."""
        stack = self.provider.encode(tokens, key)
        return self.from_layers(pool_target_subwords(stack.with_target(word_to_subword_span(stack, span))))

    def stack_vector(self, stack: HiddenStack) -> np.ndarray:
        return self.from_layers(pool_target_subwords(stack))


def word_to_subword_span(stack: HiddenStack, span) -> tuple[int, int]:
    if isinstance(span, int):
        span = (span, span + 1)
    s, e = span
    if stack.word_spans is None:
        if stack.target_span is None:
            raise ValueError(f"stack {stack.sentence_id!r} has no word spans")
        return stack.target_span
    if not 0 <= s < e <= len(stack.word_spans):
        raise IndexError(f"word span {span} outside sentence of {len(stack.word_spans)} words")
    return stack.word_spans[s][0], stack.word_spans[e - 1][1]


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


def _cos_warn(u, v) -> float:
    if not np.any(u) or not np.any(v):
        log.warning("zero representation vector; similarity set to 0")
        return 0.0
    return float(np.clip(cosine(u, v), -1.0, 1.0))


@dataclass
class WordPairInstance:
    tokens1: list[str]
    span1: tuple[int, int]
    tokens2: list[str]
    span2: tuple[int, int]
    gold: float


def word_similarity(source: RepSource, inst: WordPairInstance, key: str = "") -> float:
    u = source.target_vector(inst.tokens1, inst.span1, f"{key}:1" if key else "")
    v = source.target_vector(inst.tokens2, inst.span2, f"{key}:2" if key else "")
    return _cos_warn(u, v)


def binary_accuracy(sims: Sequence[float], labels: Sequence[int], threshold: float) -> float:
    sims, labels = np.asarray(sims, dtype=float), np.asarray(labels)
    if sims.shape != labels.shape:
        raise ValueError("sims and labels differ in length")
    return float(np.mean((sims >= threshold) == (labels == 1)))


def tune_threshold(dev_sims: Sequence[float], dev_labels: Sequence[int]) -> float:
    """Grid point in {0.00, ..., 1.00} with the best dev accuracy; ties to the smallest."""
    if len(dev_sims) != len(dev_labels) or not len(dev_sims):
        raise ValueError("tune_threshold needs equal-length, non-empty inputs")
    sims = np.asarray(dev_sims, dtype=float)
    gold = np.asarray(dev_labels) == 1
    grid = np.asarray(THRESHOLD_GRID)
    acc = ((sims[None, :] >= grid[:, None]) == gold[None, :]).mean(axis=1)
    return float(grid[int(np.argmax(acc))])


def pearson_r(x: Sequence[float], y: Sequence[float]) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("pearson_r needs two equal-length sequences of length >= 2")
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = float(xc @ xc), float(yc @ yc)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("correlation undefined for a constant sequence")
    return float(np.clip((xc @ yc) / math.sqrt(sxx * syy), -1.0, 1.0))


def spearman_rho(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation of average ranks."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("spearman_rho needs two equal-length sequences of length >= 2")
    return pearson_r(rankdata(x, method="average"), rankdata(y, method="average"))


def cosimlex_change(sim_ctx1: float, sim_ctx2: float) -> float:
    """Predicted change in a word pair's similarity from context 1 to context 2."""
    return sim_ctx2 - sim_ctx1


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------


@dataclass
class SimilarityReport:
    task: str
    kind: str
    metric: str
    value: float | None
    similarities: list[float] = field(default_factory=list)
    threshold: float | None = None
    details: dict = field(default_factory=dict)

    def record(self) -> dict:
        out = {"task": self.task, "kind": self.kind, "metric": self.metric, "value": self.value}
        if self.threshold is not None:
            out["threshold"] = self.threshold
        out.update(self.details)
        return out


def evaluate_binary(source: RepSource, dev: Sequence[WordPairInstance], test: Sequence[WordPairInstance],
                    task: str = "wic") -> SimilarityReport:
    dev_sims = [word_similarity(source, x, f"{task}:dev:{i}") for i, x in enumerate(dev)]
    thr = tune_threshold(dev_sims, [int(x.gold) for x in dev])
    sims = [word_similarity(source, x, f"{task}:test:{i}") for i, x in enumerate(test)]
    acc = binary_accuracy(sims, [int(x.gold) for x in test], thr)
    return SimilarityReport(task, source.kind, "accuracy", acc, sims, thr,
                            {"dev_accuracy": binary_accuracy(dev_sims, [int(x.gold) for x in dev], thr)})


def evaluate_graded(source: RepSource, data: Sequence[WordPairInstance], task: str = "usim",
                    metric: str = "spearman") -> SimilarityReport:
    sims = [word_similarity(source, x, f"{task}:{i}") for i, x in enumerate(data)]
    gold = [x.gold for x in data]
    value = spearman_rho(sims, gold) if metric == "spearman" else pearson_r(sims, gold)
    return SimilarityReport(task, source.kind, metric, value, sims)


def sentence_representation(source: RepSource, stack: HiddenStack) -> np.ndarray:
    """Mean over non-special subwords, each treated as its own one-subword target."""
    keep = [i for i, sp in enumerate(stack.special_mask) if not sp]
    if not keep:
        raise ValueError(f"sentence {stack.sentence_id!r} contains only special tokens")
    vecs = source.from_layers(stack.values[keep].astype(np.float64))
    return vecs.mean(axis=0)


@dataclass
class STSPair:
    tokens1: list[str]
    tokens2: list[str]
    score: float
    subcorpus: str = "all"


def sts_evaluate(source: RepSource, pairs: Sequence[STSPair], task: str = "sts") -> SimilarityReport:
    """Cosine per pair, Pearson per sub-corpus, unweighted mean across sub-corpora."""
    sims = []
    groups: dict[str, tuple[list, list]] = defaultdict(lambda: ([], []))
    for i, pr in enumerate(pairs):
        u = sentence_representation(source, source.provider.encode(pr.tokens1, f"{task}:{i}:1"))
        v = sentence_representation(source, source.provider.encode(pr.tokens2, f"{task}:{i}:2"))
        s = _cos_warn(u, v)
        sims.append(s)
        groups[pr.subcorpus][0].append(s)
        groups[pr.subcorpus][1].append(pr.score)
    per = {}
    for name in sorted(groups):
        pred, gold = groups[name]
        if len(pred) < 2:
            log.warning("sub-corpus %s has fewer than two pairs; excluded", name)
            continue
        try:
            per[name] = pearson_r(pred, gold)
        except UndefinedCorrelationError:
            log.warning("sub-corpus %s has constant gold or predictions; excluded", name)
    value = float(np.mean(list(per.values()))) if per else None
    return SimilarityReport(task, source.kind, "pearson_mean", value, sims, details={"subcorpora": per})


# --------------------------------------------------------------------------
# analyses
# --------------------------------------------------------------------------


@dataclass
class LabelledPair:
    tokens1: list[str]
    tokens2: list[str]
    paraphrase: bool


def _word_vectors(source: RepSource, tokens, key: str) -> list[np.ndarray]:
    stack = source.provider.encode(tokens, key)
    Hs = np.stack([pool_target_subwords(stack.with_target(word_to_subword_span(stack, i)))
                   for i in range(len(tokens))])
    return list(source.from_layers(Hs))


def common_and_different_pairs(tokens1: Sequence[str], tokens2: Sequence[str]):
    """Index pairs of shared surfaces (first occurrence in sentence 2) and of differing surfaces."""
    first = {}
    for j, w in enumerate(tokens2):
        first.setdefault(w.lower(), j)
    common = [(i, first[w.lower()]) for i, w in enumerate(tokens1) if w.lower() in first]
    different = [(i, j) for i, a in enumerate(tokens1) for j, b in enumerate(tokens2) if a.lower() != b.lower()]
    return common, different


def bucketed_similarity(source: RepSource, pairs: Sequence[LabelledPair], task: str = "buckets") -> dict:
    """Mean cosine for {common, different} x {P, N}; empty buckets map to None."""
    sums: dict[str, list[float]] = {k: [] for k in ("common_P", "common_N", "different_P", "different_N")}
    for i, pr in enumerate(pairs):
        v1 = _word_vectors(source, pr.tokens1, f"{task}:{i}:1")
        v2 = _word_vectors(source, pr.tokens2, f"{task}:{i}:2")
        common, different = common_and_different_pairs(pr.tokens1, pr.tokens2)
        lab = "P" if pr.paraphrase else "N"
        sums[f"common_{lab}"].extend(_cos_warn(v1[a], v2[b]) for a, b in common)
        sums[f"different_{lab}"].extend(_cos_warn(v1[a], v2[b]) for a, b in different)
    return {k: (float(np.mean(v)) if v else None) for k, v in sums.items()}


def layerwise_similarity(model: DistillerModel | None, provider, targets: Sequence[tuple[list[str], int]],
                         keys: Sequence[str] | None = None) -> np.ndarray:
    """Average cosine of (baseline, meaning, context) with every layer, shape (3, l+1).

    Without a model only the baseline row is filled; the other rows are NaN.
    """
    if not targets:
        raise ValueError("layer-wise analysis needs at least one target")
    num_layers, _ = provider_shape(provider)
    acc = np.zeros((3, num_layers + 1))
    for n, (tokens, idx) in enumerate(targets):
        key = keys[n] if keys is not None else ""
        H = pool_target_subwords(provider.encode_target(tokens, idx, key)).astype(np.float64)
        top = select_top_layers(H, num_layers)
        reps = [reconstruction_target(top)]
        if model is not None:
            reps.extend(model.represent(top))
        for r, vec in enumerate(reps):
            acc[r] += [_cos_warn(vec, H[i]) for i in range(num_layers + 1)]
    acc /= len(targets)
    if model is None:
        acc[1:] = np.nan
    return acc
