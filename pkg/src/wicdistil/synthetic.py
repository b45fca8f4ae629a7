"""Deterministic synthetic data: a small bilingual fixture and toy triples.

The fixture language pair is English-like pseudo-words and a "foreign"
counterpart per concept. Aligned embeddings put every form of a concept near
one concept vector, so word alignment behaves as it would with real aligned
vectors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import EmbeddingTable, SentenceRecord, TrainingTriple
from .io_utils import atomic_write_text

ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "st", "tr", "pl"]
VOWELS = ["a", "e", "i", "o", "u"]


def _pseudo_word(rng: np.random.Generator, syllables: int) -> str:
    return "".join(ONSETS[rng.integers(len(ONSETS))] + VOWELS[rng.integers(len(VOWELS))] for _ in range(syllables))


@dataclass
class Lexicon:
    english: list[str]
    synonyms: dict[int, str]
    foreign: list[str]
    vectors: np.ndarray


def make_lexicon(num_concepts: int, dim: int, rng: np.random.Generator) -> Lexicon:
    seen: set[str] = set()

    def fresh(syl):
        while True:
            w = _pseudo_word(rng, syl)
            if w not in seen:
                seen.add(w)
                return w

    # 4-syllable words exceed the toy subword chunk and get split
    english = [fresh(2 + int(rng.integers(3))) for _ in range(num_concepts)]
    foreign = [fresh(2 + int(rng.integers(3))) + "x" for _ in range(num_concepts)]
    synonyms = {c: fresh(3) for c in range(0, num_concepts, 4)}
    return Lexicon(english, synonyms, foreign, rng.normal(size=(num_concepts, dim)))


def _embedding_table(lex: Lexicon, rng: np.random.Generator, noise: float = 0.25) -> EmbeddingTable:
    dim = lex.vectors.shape[1]
    table = EmbeddingTable(dim)
    for c, w in enumerate(lex.english):
        table.add(w, np.round(lex.vectors[c] + noise * rng.normal(size=dim), 6))
    for c, w in lex.synonyms.items():
        table.add(w, np.round(lex.vectors[c] + noise * rng.normal(size=dim), 6))
    for c, w in enumerate(lex.foreign):
        table.add(w, np.round(lex.vectors[c] + noise * rng.normal(size=dim), 6))
    table.add(".", np.round(rng.normal(size=dim), 6))
    return table


def _sentence(rng, n_concepts, length):
    return [int(c) for c in rng.choice(n_concepts, size=length, replace=False)]


def _translate(concepts, lex: Lexicon, rng) -> list[str]:
    out = [lex.foreign[c] for c in concepts]
    if len(out) > 3 and rng.random() < 0.5:
        i = int(rng.integers(len(out) - 1))
        out[i], out[i + 1] = out[i + 1], out[i]
    return out


def write_fixture(out_dir, seed: int = 7, num_pairs: int = 100, num_concepts: int = 60, dim: int = 12) -> dict:
    """Write the bilingual fixture (``num_pairs`` pairs = 2x sentences) and return its file map."""
    rng = np.random.default_rng(seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lex = make_lexicon(num_concepts, dim, rng)
    table = _embedding_table(lex, rng)
    table.save(out / "embeddings.txt")

    lines = []
    for k in range(num_pairs):
        concepts = _sentence(rng, num_concepts, int(rng.integers(6, 10)))
        en = [lex.english[c] for c in concepts] + ["."]
        fr = _translate(concepts, lex, rng) + ["."]
        rec = {"src_tokens": en, "tgt_tokens": fr, "lang_src": "en", "lang_tgt": "xx"}
        if k % 2:  # the rest are tried at every eligible position
            rec["target_index"] = int(rng.integers(len(concepts)))
        lines.append(json.dumps(rec, sort_keys=True))
    lines.insert(num_pairs // 2, "{not json")  # one unreadable line, counted and skipped
    atomic_write_text(out / "pairs.jsonl", "\n".join(lines) + "\n")

    def wordpair_rows(n, graded):
        rows = []
        for _ in range(n):
            c = int(rng.integers(num_concepts))
            s1 = _sentence(rng, num_concepts, 7)
            s2 = _sentence(rng, num_concepts, 7)
            i1, i2 = int(rng.integers(7)), int(rng.integers(7))
            s1[i1] = c
            s2[i2] = c
            shared = len(set(s1) & set(s2)) - 1
            t1 = [lex.english[k] for k in s1]
            t2 = [lex.english[k] for k in s2]
            gold = f"{1.0 + shared + rng.random():.3f}" if graded else str(int(shared >= 1))
            rows.append("\t".join([" ".join(t1), str(i1), str(i1 + 1), " ".join(t2), str(i2), str(i2 + 1), gold]))
        return rows

    atomic_write_text(out / "wic_dev.tsv", "\n".join(wordpair_rows(20, False)) + "\n")
    atomic_write_text(out / "wic_test.tsv", "\n".join(wordpair_rows(20, False)) + "\n")
    atomic_write_text(out / "usim.tsv", "\n".join(wordpair_rows(20, True)) + "\n")

    sts = []
    for k in range(24):
        a = _sentence(rng, num_concepts, 8)
        keep = int(rng.integers(0, 9))
        b = a[:keep] + _sentence(rng, num_concepts, 8 - keep)
        sts.append("\t".join([" ".join(lex.english[c] for c in a), " ".join(lex.english[c] for c in b),
                              f"{5.0 * keep / 8:.3f}", "news" if k % 2 else "forum"]))
    atomic_write_text(out / "sts.tsv", "\n".join(sts) + "\n")

    analysis = []
    for k in range(12):
        a = _sentence(rng, num_concepts, 7)
        if k % 2 == 0:
            b = list(a)
            for c in lex.synonyms:
                if c in b:
                    b[b.index(c)] = -1 - c  # marks a synonym swap
            t2 = [lex.synonyms[-1 - c] if c < 0 else lex.english[c] for c in b]
            label = "P"
        else:
            b = a[:3] + _sentence(rng, num_concepts, 4)
            t2 = [lex.english[c] for c in b]
            label = "N"
        analysis.append("\t".join([" ".join(lex.english[c] for c in a), " ".join(t2), label]))
    atomic_write_text(out / "analysis.tsv", "\n".join(analysis) + "\n")

    config = {
        "seed": seed,
        "mode": "crosslingual",
        "toy_mlm": {"num_layers": 4, "dim": 16, "heads": 2, "seed": 1, "subword_chunk": 6,
                    "vocab_from": "embeddings.txt"},
        "build_corpus": {"pairs": "pairs.jsonl", "embeddings": "embeddings.txt",
                         "filter": {"validation_fraction": 0.1}},
        "train": {"train": {"batch_size": 16, "base_lr": 0.003, "warmup_steps": 20, "max_epochs": 12,
                            "patience": 4}},
        "evaluate": {"tasks": [
            {"name": "wic", "type": "binary", "dev": "wic_dev.tsv", "test": "wic_test.tsv"},
            {"name": "usim", "type": "graded", "test": "usim.tsv", "metric": "spearman"},
            {"name": "sts", "type": "sts", "test": "sts.tsv"},
        ]},
        "analyze": {"pairs": "analysis.tsv"},
    }
    atomic_write_text(out / "config.json", json.dumps(config, indent=2, sort_keys=True) + "\n")
    return {"config": out / "config.json"}


def fixture_dir() -> Path:
    return Path(__file__).parent / "data" / "fixture"


# --------------------------------------------------------------------------
# toy triples for tests and selftest
# --------------------------------------------------------------------------


def toy_words(n: int = 40) -> list[str]:
    rng = np.random.default_rng(1234)
    words = []
    while len(words) < n:
        w = _pseudo_word(rng, 2 + int(rng.integers(3)))
        if w not in words:
            words.append(w)
    return words


def toy_triples(words: list[str], count: int, rng: np.random.Generator, length: int = 8,
                prefix: str = "t") -> list[TrainingTriple]:
    """Paraphrase-shaped triples: the positive rewrites two context words, the negative swaps the target."""
    out = []
    for i in range(count):
        s = [words[k] for k in rng.integers(0, len(words), length)]
        t = int(rng.integers(0, length))
        p = list(s)
        for k in rng.choice([k for k in range(length) if k != t], 2, replace=False):
            p[k] = words[rng.integers(0, len(words))]
        n = list(s)
        n[t] = words[rng.integers(0, len(words))]
        out.append(TrainingTriple(f"{prefix}{i}", SentenceRecord(s, t), SentenceRecord(p, t), SentenceRecord(n, t)))
    return out
