"""Executable acceptance checks (``wicdistil selftest``).

Each check returns a :class:`CheckResult`; ``run_selftest`` prints one line
per check and reports overall success.
"""

from __future__ import annotations

import hashlib
import math
import shutil
import string
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import corpus, evalkit, nncore, objective, oracles
from .distiller import DistillerConfig, DistillerModel, load_checkpoint, save_checkpoint
from .provider import (MaskedPredictionSet, ToyMLM, ToyMLMConfig, load_hidden_states,
                       select_top_layers, write_hidden_states)
from .synthetic import toy_triples, toy_words
from .trainer import TrainConfig, train


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.1f}s)"


# --------------------------------------------------------------------------
# 1. gradient fidelity
# --------------------------------------------------------------------------


def _random_reps_loss(model: DistillerModel, top: np.ndarray, mode: str, use_negatives: bool = True):
    def loss_fn():
        x = top.astype(model.dtype)
        targets = x.mean(axis=-2)
        pair = model.distil(x, training=False)

        def part(i):
            return objective.DistilledPair(nncore.take(pair.meaning, (slice(None), i)),
                                           nncore.take(pair.context, (slice(None), i)))

        reps = objective.TripleRepresentations(targets[:, 0], part(0), targets[:, 1], part(1), targets[:, 2],
                                               part(2), mode, use_negatives)
        return objective.total_loss(reps)

    return loss_fn


def check_gradients_full(seeds=(0, 1, 2), dim=8, heads=8, layers=2, batch=2, tol=1e-4) -> CheckResult:
    worst, n = 0.0, 0
    for seed in seeds:
        for mode in (objective.MONO, objective.XL):
            model = DistillerModel(DistillerConfig.for_mode(mode, dim=dim, num_input_layers=layers, heads=heads,
                                                            dropout=0.1, seed=seed), dtype=np.float64)
            rng = np.random.default_rng(100 + seed)
            # nudge layer-norm affine and biases off their init so their gradients are non-trivial
            for name, t in model.params.items():
                if name.endswith(("_g", "_b")) or ".b" in name:
                    t.data = t.data + rng.normal(0, 0.1, size=t.data.shape)
            top = rng.normal(size=(batch, 3, layers, dim))
            rep = nncore.check_gradients(model.params, _random_reps_loss(model, top, mode), step=1e-4, tol=tol)
            if not rep.passed:
                return CheckResult("gradient fidelity", False,
                                   f"seed {seed} {mode}: max rel err {rep.max_error:.2e} in {rep.worst} {rep.failure or ''}")
            worst = max(worst, rep.max_error)
            n += rep.checked
    return CheckResult("gradient fidelity", True, f"{n} coordinates, {len(seeds)} seeds x 2 modes, "
                                                  f"max rel err {worst:.2e} < {tol:g}")


# --------------------------------------------------------------------------
# 2. loss formulas
# --------------------------------------------------------------------------


def _pair(m, c):
    return objective.DistilledPair(nncore.Tensor(m), nncore.Tensor(c))


def check_loss_formulas(count=100, dim=16, tol=1e-10) -> CheckResult:
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(count):
        v = rng.normal(size=(9, dim))
        y, p, n, hm, hc, pm, pc, nm, nc = v
        for mode, fn, ref in ((objective.MONO, objective.cross_loss_mono, oracles.cross_mono_loop),
                              (objective.XL, objective.cross_loss_xl, oracles.cross_xl_loop)):
            reps = objective.TripleRepresentations(y, _pair(hm, hc), p, _pair(pm, pc), n, _pair(nm, nc), mode)
            args = [list(map(float, a)) for a in v]
            worst = max(worst, abs(float(fn(reps).data) - ref(*args)))
            total = float(objective.total_loss(reps).data)
            worst = max(worst, abs(total - (oracles.recon_total_loop(*args) + ref(*args))))
    ok = worst < tol
    return CheckResult("loss-formula equivalence", ok, f"{count} random triples, max abs diff {worst:.2e} (tol {tol:g})")


# --------------------------------------------------------------------------
# 3 + 4. frozen provider, overfit smoke, negative-free invariance
# --------------------------------------------------------------------------


def _toy_setup(seed=0, n_train=32, n_val=4):
    words = toy_words(40)
    mlm = ToyMLM(ToyMLMConfig.from_words(words, num_layers=4, dim=16, seed=1))
    rng = np.random.default_rng(seed)
    return words, mlm, toy_triples(words, n_train, rng), toy_triples(words, n_val, rng, prefix="v")


OVERFIT_CFG = dict(batch_size=32, base_lr=1e-2, warmup_steps=10, max_steps=200, max_epochs=10_000, patience=10_000)


def check_frozen_provider(steps=200) -> CheckResult:
    _, mlm, tr, va = _toy_setup()
    before = mlm.parameter_digest()
    model = DistillerModel(DistillerConfig(dim=16, num_input_layers=2))
    res = train(model, tr, va, mlm, TrainConfig(**{**OVERFIT_CFG, "max_steps": steps}))
    after = mlm.parameter_digest()
    ok = before == after and res.steps == steps
    return CheckResult("frozen-model contract", ok, f"{res.steps} steps, provider sha256 {before[:12]} -> {after[:12]}")


def _randomise_negatives(triples, words, rng):
    out = []
    for t in triples:
        neg = corpus.SentenceRecord([words[k] for k in rng.integers(0, len(words), len(t.negative.tokens))],
                                    t.negative.target_index)
        out.append(corpus.TrainingTriple(t.id, t.original, t.positive, neg, t.mode))
    return out


def check_overfit(ratio_bound=0.1) -> CheckResult:
    words, mlm, tr, va = _toy_setup()
    model = DistillerModel(DistillerConfig(dim=16, num_input_layers=2))
    res = train(model, tr, va, mlm, TrainConfig(**OVERFIT_CFG))
    ratio = res.final_train_loss / res.initial_train_loss
    ok = ratio < ratio_bound and res.steps <= 200

    cfg = TrainConfig(**OVERFIT_CFG, use_negatives=False)
    r1 = train(DistillerModel(DistillerConfig(dim=16, num_input_layers=2)), tr, va, mlm, cfg)
    rng = np.random.default_rng(99)
    r2 = train(DistillerModel(DistillerConfig(dim=16, num_input_layers=2)),
               _randomise_negatives(tr, words, rng), _randomise_negatives(va, words, rng), mlm, cfg)
    h1 = np.array([[h["train_loss"], h["val_loss"]] for h in r1.history])
    h2 = np.array([[h["train_loss"], h["val_loss"]] for h in r2.history])
    diff = float(np.max(np.abs(h1 - h2))) if h1.shape == h2.shape else math.inf
    finite = bool(np.isfinite(h1).all())
    ok = ok and finite and diff <= 1e-12
    return CheckResult("overfit smoke", ok, f"loss {res.initial_train_loss:.4f} -> {res.final_train_loss:.4f} "
                                            f"(ratio {ratio:.3f} < {ratio_bound}) in {res.steps} steps; "
                                            f"no-negatives history diff {diff:.1e}")


# --------------------------------------------------------------------------
# 5. alignment
# --------------------------------------------------------------------------


def _random_word(rng, length=5):
    return "".join(rng.choice(list(string.ascii_lowercase), size=length))


def random_alignment_instance(rng):
    dim = int(rng.integers(2, 5))
    ns, nt = int(rng.integers(1, 7)), int(rng.integers(1, 7))
    words = [_random_word(rng) + str(i) for i in range(ns + nt)]
    table = corpus.EmbeddingTable(dim)
    vecs = {}
    for w in words:
        if rng.random() < 0.85:
            v = np.round(rng.normal(size=dim), 1)  # coarse values make exact ties likely
            table.add(w, v)
            vecs[w] = list(map(float, v))
    S = corpus.SentenceRecord(words[:ns], int(rng.integers(ns)))
    S_p = corpus.SentenceRecord(words[ns:], 0)
    return S, S_p, table, vecs


def oracle_matrix(S, S_p, vecs):
    return [[oracles.cosine_loop(vecs[a], vecs[b]) if a in vecs and b in vecs else -math.inf
             for b in S_p.tokens] for a in S.tokens]


def _knife_edge(M, t, pairs, eps=1e-9) -> bool:
    """True when a target-row similarity sits within ``eps`` of a threshold (rounding decides)."""
    finite = [v for row in M for v in row if v != -math.inf]
    if not finite:
        return False
    mu = sum(finite) / len(finite)
    sd = math.sqrt(sum((v - mu) ** 2 for v in finite) / len(finite))
    bounds = [mu + 1.0 * sd, mu + 1.282 * sd]
    if pairs:
        s = [M[i][j] for i, j in pairs]
        m = sum(s) / len(s)
        bounds.append(m - 0.674 * math.sqrt(sum((v - m) ** 2 for v in s) / len(s)))
    return any(abs(v - b) < eps for v in M[t] if v != -math.inf for b in bounds)


def check_alignment(count=500) -> CheckResult:
    rng = np.random.default_rng(5)
    mono_cfg, xl_cfg = corpus.FilterConfig.monolingual(), corpus.FilterConfig.crosslingual()
    found = [0, 0]
    k = skipped = 0
    while k < count:
        S, S_p, table, vecs = random_alignment_instance(rng)
        M = oracle_matrix(S, S_p, vecs)
        if _knife_edge(M, S.target_index, oracles.mutual_pairs_bruteforce(M, S.target_index)):
            skipped += 1
            continue
        k += 1
        al = corpus.mutual_argmax_align(S, S_p, table)
        exp_pairs = oracles.mutual_pairs_bruteforce(M, S.target_index)
        if sorted(al.pairs) != sorted(exp_pairs) or al.A != {j for _, j in exp_pairs}:
            return CheckResult("alignment oracle", False, f"instance {k}: pairs {al.pairs} != {exp_pairs}")
        got_m = corpus.align_target_mono(S, S_p, table, mono_cfg)
        exp_m = oracles.align_mono_bruteforce(M, S.target_index, 1.0)
        got_x = corpus.align_target_xl(S, S_p, table, xl_cfg)
        exp_x = oracles.align_xl_bruteforce(M, S.target_index, 1.282, 0.674)
        if got_m != exp_m or got_x != exp_x:
            return CheckResult("alignment oracle", False,
                               f"instance {k}: mono {got_m} vs {exp_m}, xl {got_x} vs {exp_x}")
        found[0] += got_m is not None
        found[1] += got_x is not None
    return CheckResult("alignment oracle", True,
                       f"{count} instances agree (mono found {found[0]}, crosslingual found {found[1]}; "
                       f"{skipped} threshold ties skipped)")


# --------------------------------------------------------------------------
# 6. masked-prediction filters
# --------------------------------------------------------------------------


class StubPredictor:
    def __init__(self, preds: MaskedPredictionSet):
        self.preds = preds
        self.calls = []

    def __call__(self, tokens, index):
        self.calls.append((tuple(tokens), index))
        return self.preds


def random_prediction_instance(rng, vocab_size=150, dim=3):
    vocab = []
    while len(vocab) < vocab_size:
        r = rng.random()
        if r < 0.05:
            tok = "##" + _random_word(rng, 3)
        elif r < 0.08:
            tok = rng.choice([".", ",", "42", "[MASK]", "[UNK]"])
        else:
            tok = _random_word(rng, int(rng.integers(3, 7)))
        if tok not in vocab:
            vocab.append(str(tok))
    table = corpus.EmbeddingTable(dim)
    vecs = {}
    for tok in vocab:
        if rng.random() < 0.8:
            v = rng.normal(size=dim)
            table.add(tok, v)
            vecs[tok] = list(map(float, v))
    w_t = _random_word(rng, 5)
    if rng.random() < 0.5:
        w_p = w_t[:-1] + rng.choice(list("xyz"))  # surface-similar positive
    else:
        w_p = _random_word(rng, 6)
    drop_target = rng.random() < 0.1  # target without an embedding: every filter must give up
    for w in (w_t, w_p):
        if w not in vecs and not (drop_target and w == w_t):
            v = rng.normal(size=dim)
            table.add(w, v)
            vecs[w] = list(map(float, v))
    if rng.random() < 0.3:
        vocab[int(rng.integers(10))] = w_t  # target among the top predictions
    probs = np.sort(rng.dirichlet(np.full(vocab_size, 0.3)))[::-1]
    preds = MaskedPredictionSet(0, list(vocab), probs, vocab_size)
    return preds, table, vecs, w_t, w_p


def check_filters(count=500) -> CheckResult:
    rng = np.random.default_rng(6)
    mono, xl = corpus.FilterConfig.monolingual(), corpus.FilterConfig.crosslingual()
    hits = [0, 0, 0]
    for k in range(count):
        preds, table, vecs, w_t, w_p = random_prediction_instance(rng)
        listed = list(zip(preds.tokens, map(float, preds.probs)))
        pred = StubPredictor(preds)
        S = corpus.SentenceRecord(["aa", w_t, "bb"], 1)
        S_p = corpus.SentenceRecord(["cc", w_p, "dd"], 1)
        got = corpus.select_negative_mono(S, 1, pred, table, mono)
        exp = oracles.negative_mono_fullscan(listed, w_t, vecs.get, 0.6, 100, 0.003)
        got_e = corpus.enhance_positive_mono(S_p, 1, w_t, pred, table, mono)
        exp_e = oracles.enhance_positive_fullscan(listed, w_p, w_t, vecs.get, 0.6, 100, 0.003)
        got_x = corpus.select_negative_xl(S_p, 1, w_t, w_p, pred, table, xl)
        exp_x = oracles.negative_xl_fullscan(listed, w_t, w_p, vecs.get, 30, 0.001)
        if (got, got_e, got_x) != (exp, exp_e, exp_x):
            return CheckResult("filtering oracle", False,
                               f"instance {k}: {(got, got_e, got_x)} != {(exp, exp_e, exp_x)}")
        hits[0] += got is not None
        hits[1] += got_e != w_p
        hits[2] += got_x is not None
    return CheckResult("filtering oracle", True, f"{count} prediction sets agree (negatives {hits[0]}, "
                                                 f"enhanced {hits[1]}, crosslingual negatives {hits[2]})")


# --------------------------------------------------------------------------
# 7. metrics
# --------------------------------------------------------------------------


def check_metrics(count=500, tol=1e-10) -> CheckResult:
    rng = np.random.default_rng(7)
    if evalkit.tune_threshold([0.2, 0.8], [0, 1]) != 0.21:
        return CheckResult("metric oracles", False, "worked threshold example did not give 0.21")
    worst = 0.0
    for k in range(count):
        n = int(rng.integers(2, 30))
        sims = list(np.round(rng.uniform(-0.2, 1.1, size=n), int(rng.integers(1, 4))))
        labels = list(rng.integers(0, 2, size=n))
        if evalkit.tune_threshold(sims, labels) != oracles.threshold_grid_oracle(sims, labels):
            return CheckResult("metric oracles", False, f"threshold mismatch on instance {k}")
        x = list(map(float, rng.integers(0, 5, size=n + 1)))  # heavy ties
        y = list(map(float, rng.normal(size=n + 1)))
        if len(set(x)) > 1:
            worst = max(worst, abs(evalkit.spearman_rho(x, y) - oracles.spearman_oracle(x, y)))
            worst = max(worst, abs(evalkit.pearson_r(x, y) - oracles.pearson_two_pass(x, y)))
    ok = worst < tol
    return CheckResult("metric oracles", ok, f"{count} threshold instances exact; correlation max diff {worst:.1e}")


# --------------------------------------------------------------------------
# 8. layer policy, 10. formats
# --------------------------------------------------------------------------


def check_layer_policy() -> CheckResult:
    ok = True
    for ell, expected in ((24, list(range(13, 25))), (4, [3, 4]), (12, list(range(7, 13)))):
        H = np.arange(ell + 1, dtype=float)[:, None] * np.ones((1, 2))
        got = [int(v) for v in select_top_layers(H, ell)[:, 0]]
        ok = ok and got == expected
    return CheckResult("layer policy", ok, "l=24 -> layers 13..24, l=4 -> 3..4, l=12 -> 7..12")


def _sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def check_formats() -> CheckResult:
    tmp = Path(tempfile.mkdtemp(prefix="wicdistil-fmt-"))
    try:
        words = toy_words(20)
        mlm = ToyMLM(ToyMLMConfig.from_words(words, seed=3))
        rng = np.random.default_rng(0)
        stacks = []
        for i in range(5):
            st = mlm.encode([words[k] for k in rng.integers(0, 20, 6)], f"s{i}")
            stacks.append(st.with_target(st.word_spans[i % 6]) if i % 2 else st)
        write_hidden_states(tmp / "a.meta", tmp / "a.bin", stacks)
        write_hidden_states(tmp / "b.meta", tmp / "b.bin", load_hidden_states(tmp / "a.meta", tmp / "a.bin"))
        hsx_ok = _sha(tmp / "a.bin") == _sha(tmp / "b.bin") and _sha(tmp / "a.meta") == _sha(tmp / "b.meta")

        model = DistillerModel(DistillerConfig(dim=16, num_input_layers=2, seed=4))
        save_checkpoint(tmp / "c1.bin", model, {"note": "x"})
        loaded, extra = load_checkpoint(tmp / "c1.bin")
        save_checkpoint(tmp / "c2.bin", loaded, extra)
        ck_ok = _sha(tmp / "c1.bin") == _sha(tmp / "c2.bin")
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    return CheckResult("format round-trips", hsx_ok and ck_ok, f"HSX1 identical={hsx_ok}, checkpoint identical={ck_ok}")


# --------------------------------------------------------------------------
# 9. end to end
# --------------------------------------------------------------------------


def run_pipeline(workdir: Path, fixture: Path, seed: int = 0) -> dict[str, str]:
    """build-corpus -> train -> evaluate -> analyze; returns sha256 of every output file."""
    from .cli import main

    cfg = str(fixture / "config.json")
    steps = [
        ["build-corpus", "--config", cfg, "--out", str(workdir / "corpus")],
        ["train", "--config", cfg, "--triples", str(workdir / "corpus"), "--out", str(workdir / "model")],
        ["evaluate", "--config", cfg, "--checkpoint", str(workdir / "model" / "checkpoint.bin"),
         "--out", str(workdir / "eval")],
        ["analyze", "--config", cfg, "--checkpoint", str(workdir / "model" / "checkpoint.bin"),
         "--out", str(workdir / "analysis")],
    ]
    for argv in steps:
        code = main(argv + ["--seed", str(seed)])
        if code != 0:
            raise RuntimeError(f"{argv[0]} exited with status {code}")
    return {str(p.relative_to(workdir)): _sha(p) for p in sorted(workdir.rglob("*")) if p.is_file()}


def check_end_to_end(time_limit=300.0) -> CheckResult:
    from .synthetic import fixture_dir

    t0 = time.perf_counter()
    tmp = Path(tempfile.mkdtemp(prefix="wicdistil-e2e-"))
    try:
        a = run_pipeline(tmp / "a", fixture_dir())
        b = run_pipeline(tmp / "b", fixture_dir())
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    elapsed = time.perf_counter() - t0
    ok = a == b and len(a) >= 8 and elapsed < time_limit
    return CheckResult("end-to-end determinism", ok, f"{len(a)} output files identical={a == b}, "
                                                     f"two runs in {elapsed:.0f}s (< {time_limit:.0f}s)")


CHECKS = {
    "gradients": check_gradients_full,
    "loss_formulas": check_loss_formulas,
    "frozen_provider": check_frozen_provider,
    "overfit": check_overfit,
    "alignment": check_alignment,
    "filters": check_filters,
    "metrics": check_metrics,
    "layer_policy": check_layer_policy,
    "end_to_end": check_end_to_end,
    "formats": check_formats,
}


def run_check(name: str, **kw) -> CheckResult:
    t0 = time.perf_counter()
    try:
        res = CHECKS[name](**kw)
    except Exception as exc:  # a crashing check is a failing check
        res = CheckResult(name, False, f"raised {type(exc).__name__}: {exc}")
    res.seconds = time.perf_counter() - t0
    return res


def run_selftest(quick: bool = False) -> bool:
    overrides = {"alignment": {"count": 100}, "filters": {"count": 100}, "metrics": {"count": 100},
                 "gradients": {"seeds": (0,)}} if quick else {}
    ok = True
    for name in CHECKS:
        if quick and name == "end_to_end":
            continue
        res = run_check(name, **overrides.get(name, {}))
        print(res.line(), flush=True)
        ok = ok and res.passed
    print("selftest", "PASSED" if ok else "FAILED")
    return ok
