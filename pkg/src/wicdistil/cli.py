"""Command-line entry point.

    wicdistil build-corpus --config run.json --out work/corpus
    wicdistil train        --config run.json --triples work/corpus --out work/model
    wicdistil evaluate     --config run.json --checkpoint work/model/checkpoint.bin --out work/eval
    wicdistil analyze      --config run.json --checkpoint work/model/checkpoint.bin --out work/analysis
    wicdistil selftest

Relative paths inside the config file are resolved against the config's
directory; paths given on the command line are taken as-is.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path


from . import corpus as corpus_mod
from . import evalkit, trainer
from .distiller import DistillerConfig, DistillerModel, load_checkpoint, save_checkpoint
from .io_utils import atomic_write_text, dumps_jsonl, iter_jsonl
from .nncore import ConfigurationError
from .provider import FileProvider, ToyMLM, ToyMLMConfig, provider_shape, top_layer_start

log = logging.getLogger("wicdistil")

TASK_TYPES = ("binary", "graded", "sts")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


class RunConfig:
    def __init__(self, data: dict, base: Path):
        self.data = data
        self.base = base

    @classmethod
    def load(cls, path: str | None) -> "RunConfig":
        if path is None:
            return cls({}, Path.cwd())
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"{p}: invalid JSON: {exc}") from exc
        return cls(data, p.parent)

    def section(self, name: str) -> dict:
        return dict(self.data.get(name) or {})

    def path(self, value) -> Path | None:
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base / p

    @property
    def mode(self) -> str:
        return self.data.get("mode", corpus_mod.MONO)

    @property
    def seed(self) -> int:
        return int(self.data.get("seed", 0))


def _require_file(path: Path | None, what: str) -> Path:
    if path is None:
        raise UsageError(f"no {what} given")
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    return path


def _checked(cls, values: dict, what: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise UsageError(f"unknown {what} settings: {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {what} settings: {exc}") from exc


def make_provider(rc: RunConfig):
    hs = rc.section("hidden_states")
    if hs:
        return FileProvider(_require_file(rc.path(hs.get("meta")), "hidden-state metadata"),
                            _require_file(rc.path(hs.get("bin")), "hidden-state payload"))
    tm = rc.section("toy_mlm")
    vocab_path = _require_file(rc.path(tm.pop("vocab_from", None)), "toy MLM vocabulary source")
    words = []
    with open(vocab_path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts or (lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts)):
                continue
            words.append(parts[0])
    try:
        return ToyMLM(ToyMLMConfig.from_words(words, **tm))
    except (TypeError, ConfigurationError) as exc:
        raise UsageError(f"invalid toy_mlm settings: {exc}") from exc


def _echo(name: str, settings: dict) -> None:
    log.info("effective %s config: %s", name, json.dumps(settings, sort_keys=True, default=str))


def _read_triples(path: Path) -> tuple[list, int]:
    out, skipped = [], 0
    for lineno, rec, _ in iter_jsonl(path):
        try:
            out.append(corpus_mod.TrainingTriple.from_dict(rec))
        except (KeyError, TypeError, ValueError, IndexError, AttributeError):
            skipped += 1
            log.warning("%s:%d: corrupt triple skipped", path, lineno)
    return out, skipped


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_build_corpus(rc: RunConfig, args) -> dict:
    sec = rc.section("build_corpus")
    pairs_path = _require_file(Path(args.pairs) if args.pairs else rc.path(sec.get("pairs")), "pair file")
    emb_path = _require_file(Path(args.embeddings) if args.embeddings else rc.path(sec.get("embeddings")),
                             "embedding table")
    out = Path(args.out) if args.out else rc.path(sec.get("out_dir", "corpus"))
    fcfg_values = {"seed": rc.seed, **sec.get("filter", {})}
    fcfg = corpus_mod.FilterConfig.for_mode(rc.mode, **{k: v for k, v in fcfg_values.items() if k != "mode"})
    _echo("build-corpus", {"pairs": pairs_path, "embeddings": emb_path, "out": out, "filter": fcfg.__dict__})
    provider = make_provider(rc)
    Z = corpus_mod.load_embedding_table(emb_path)
    targets = sec.get("targets")
    if isinstance(targets, str):
        targets = _require_file(rc.path(targets), "target list").read_text(encoding="utf-8").split()

    def stream():
        for _, rec, _ in iter_jsonl(pairs_path):
            yield rec

    result = corpus_mod.build_corpus(stream(), provider, Z, fcfg, targets)
    stats = result.stats.to_dict()
    atomic_write_text(out / "train.jsonl", dumps_jsonl(t.to_dict() for t in result.train))
    atomic_write_text(out / "validation.jsonl", dumps_jsonl(t.to_dict() for t in result.validation))
    atomic_write_text(out / "stats.json", json.dumps(stats, indent=2, sort_keys=True) + "\n")
    log.info("corpus stats: %s", stats)
    return stats


def cmd_train(rc: RunConfig, args) -> dict:
    sec = rc.section("train")
    triples_dir = Path(args.triples) if args.triples else rc.path(sec.get("triples_dir", "corpus"))
    train_path = _require_file(triples_dir / "train.jsonl", "training triples")
    val_path = _require_file(triples_dir / "validation.jsonl", "validation triples")
    out = Path(args.out) if args.out else rc.path(sec.get("out_dir", "model"))
    tvals = {"seed": rc.seed, **sec.get("train", {})}
    if args.no_negatives:
        tvals["use_negatives"] = False
    tvals.setdefault("batch_size", 512 if rc.mode == corpus_mod.XL else 128)
    tcfg = _checked(trainer.TrainConfig, {"mode": rc.mode, **tvals}, "train")
    provider = make_provider(rc)
    num_layers, dim = provider_shape(provider)

    train_triples, bad_t = _read_triples(train_path)
    val_triples, bad_v = _read_triples(val_path)
    if not train_triples:
        raise ConfigurationError(f"no usable training triples in {train_path} ({bad_t} corrupt lines)")

    resume = Path(args.resume) if args.resume else rc.path(sec.get("resume"))
    if resume is not None:
        model, extra = load_checkpoint(_require_file(resume, "checkpoint to resume from"))
    else:
        dvals = {"seed": rc.seed, **sec.get("distiller", {})}
        dvals.setdefault("ffn_mult", 6 if rc.mode == corpus_mod.XL else 4)
        dcfg = _checked(DistillerConfig, {"dim": dim, "num_input_layers": num_layers - top_layer_start(num_layers) + 1,
                                          **dvals}, "distiller")
        model = DistillerModel(dcfg)
    _echo("train", {"triples": triples_dir, "out": out, "train": tcfg.__dict__,
                    "distiller": model.config.__dict__, "resume": resume})

    features: dict = {}
    if resume is not None:
        feats = [trainer.triple_features(provider, t) for t in val_triples]
        features.update({t.id: f for t, f in zip(val_triples, feats)})
        log.info("resumed checkpoint validation loss %.10g", trainer.evaluate_loss(model, feats, tcfg))

    digest_before = provider.parameter_digest()
    result = trainer.train(model, train_triples, val_triples, provider, tcfg, features)
    if provider.parameter_digest() != digest_before:
        raise RuntimeError("provider parameters changed during training")
    save_checkpoint(out / "checkpoint.bin", model,
                    {"best_epoch": result.best_epoch, "best_val_loss": result.best_val_loss, "mode": rc.mode,
                     "use_negatives": tcfg.use_negatives})
    atomic_write_text(out / "history.jsonl", dumps_jsonl(result.history))
    summary = {"best_epoch": result.best_epoch, "best_val_loss": result.best_val_loss, "steps": result.steps,
               "skipped_lines": bad_t + bad_v}
    log.info("training done: %s", summary)
    return summary


def _read_tsv(path: Path) -> list[list[str]]:
    rows = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if line.strip():
                rows.append(line.split("\t"))
    return rows


def read_wordpair_file(path: Path) -> list[evalkit.WordPairInstance]:
    out = []
    for row in _read_tsv(path):
        if len(row) != 7:
            raise UsageError(f"{path}: word-pair rows need 7 tab-separated fields, got {len(row)}")
        out.append(evalkit.WordPairInstance(row[0].split(), (int(row[1]), int(row[2])), row[3].split(),
                                            (int(row[4]), int(row[5])), float(row[6])))
    return out


def read_sts_file(path: Path) -> list[evalkit.STSPair]:
    out = []
    for row in _read_tsv(path):
        if len(row) != 4:
            raise UsageError(f"{path}: STS rows need 4 tab-separated fields, got {len(row)}")
        out.append(evalkit.STSPair(row[0].split(), row[1].split(), float(row[2]), row[3]))
    return out


def read_labelled_pairs(path: Path) -> list[evalkit.LabelledPair]:
    out = []
    for row in _read_tsv(path):
        if len(row) != 3:
            raise UsageError(f"{path}: analysis rows need 3 tab-separated fields, got {len(row)}")
        out.append(evalkit.LabelledPair(row[0].split(), row[1].split(), row[2].strip().upper() in ("P", "1")))
    return out


def _sources(rc: RunConfig, provider, checkpoint: Path | None, kinds) -> list[evalkit.RepSource]:
    model = None
    if any(k != "baseline" for k in kinds):
        model, _ = load_checkpoint(_require_file(checkpoint, "checkpoint"))
    return [evalkit.RepSource(provider, k, model) for k in kinds]


def _kinds(args, sec) -> list[str]:
    kinds = args.kinds.split(",") if args.kinds else sec.get("kinds", list(evalkit.KINDS))
    bad = [k for k in kinds if k not in evalkit.KINDS]
    if bad:
        raise UsageError(f"unknown representation kinds {bad}; supported: {list(evalkit.KINDS)}")
    return kinds


def cmd_evaluate(rc: RunConfig, args) -> list[dict]:
    sec = rc.section("evaluate")
    out = Path(args.out) if args.out else rc.path(sec.get("out_dir", "eval"))
    kinds = _kinds(args, sec)
    tasks = sec.get("tasks", [])
    for t in tasks:
        if t.get("type") not in TASK_TYPES:
            raise UsageError(f"unknown task type {t.get('type')!r}; supported types: {list(TASK_TYPES)}")
    checkpoint = Path(args.checkpoint) if args.checkpoint else rc.path(sec.get("checkpoint"))
    _echo("evaluate", {"out": out, "kinds": kinds, "tasks": tasks, "checkpoint": checkpoint})
    provider = make_provider(rc)
    sources = _sources(rc, provider, checkpoint, kinds)
    records, sims = [], []
    for t in tasks:
        name, typ = t.get("name", t["type"]), t["type"]
        test_path = _require_file(rc.path(t.get("test")), f"{name} test file")
        if typ == "binary":
            dev = read_wordpair_file(_require_file(rc.path(t.get("dev")), f"{name} dev file"))
            test = read_wordpair_file(test_path)
            reports = [evalkit.evaluate_binary(s, dev, test, name) for s in sources]
        elif typ == "graded":
            data = read_wordpair_file(test_path)
            reports = [evalkit.evaluate_graded(s, data, name, t.get("metric", "spearman")) for s in sources]
        else:
            data = read_sts_file(test_path)
            reports = [evalkit.sts_evaluate(s, data, name) for s in sources]
        for r in reports:
            records.append(r.record())
            sims.append({"task": r.task, "kind": r.kind, "similarities": r.similarities})
    atomic_write_text(out / "reports.jsonl", dumps_jsonl(records))
    atomic_write_text(out / "similarities.jsonl", dumps_jsonl(sims))
    for r in records:
        log.info("%s/%s %s = %s", r["task"], r["kind"], r["metric"], r["value"])
    return records


def cmd_analyze(rc: RunConfig, args) -> dict:
    sec = rc.section("analyze")
    out = Path(args.out) if args.out else rc.path(sec.get("out_dir", "analysis"))
    pairs_path = _require_file(Path(args.pairs) if args.pairs else rc.path(sec.get("pairs")), "analysis pair file")
    kinds = _kinds(args, sec)
    checkpoint = Path(args.checkpoint) if args.checkpoint else rc.path(sec.get("checkpoint"))
    _echo("analyze", {"out": out, "pairs": pairs_path, "kinds": kinds, "checkpoint": checkpoint})
    provider = make_provider(rc)
    pairs = read_labelled_pairs(pairs_path)
    sources = _sources(rc, provider, checkpoint, kinds)
    buckets = [{"kind": s.kind, **evalkit.bucketed_similarity(s, pairs)} for s in sources]
    model = next((s.model for s in sources if s.model is not None), None)
    targets = [(p.tokens1, i) for p in pairs for i in range(len(p.tokens1))]
    keys = [f"buckets:{n}:1" for n, p in enumerate(pairs) for _ in p.tokens1]
    matrix = evalkit.layerwise_similarity(model, provider, targets, keys)
    atomic_write_text(out / "buckets.jsonl", dumps_jsonl(buckets))
    rows = ["kind\t" + "\t".join(f"layer{i}" for i in range(matrix.shape[1]))]
    for kind, row in zip(evalkit.KINDS, matrix):
        rows.append(kind + "\t" + "\t".join(repr(float(v)) for v in row))
    atomic_write_text(out / "layer_similarity.tsv", "\n".join(rows) + "\n")
    return {"buckets": buckets, "layer_matrix": matrix.tolist()}


def cmd_selftest(rc: RunConfig, args) -> bool:
    from .selftest import run_selftest

    return run_selftest(quick=args.quick)


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="wicdistil", description=__doc__.split("\n\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    ap.add_argument("--threads", type=int, default=None, help="cap on numeric worker threads")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="override the config seed")
        return p

    p = common(sub.add_parser("build-corpus", help="align pairs and emit training triples"))
    p.add_argument("--pairs")
    p.add_argument("--embeddings")
    p = common(sub.add_parser("train", help="train the distillers"))
    p.add_argument("--triples", help="directory holding train.jsonl and validation.jsonl")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--no-negatives", action="store_true", help="drop every negative-sample loss term")
    p = common(sub.add_parser("evaluate", help="run word-pair and STS evaluations"))
    p.add_argument("--checkpoint")
    p.add_argument("--kinds", help="comma-separated subset of baseline,meaning,context")
    p = common(sub.add_parser("analyze", help="similarity buckets and layer-wise matrix"))
    p.add_argument("--checkpoint")
    p.add_argument("--pairs")
    p.add_argument("--kinds")
    p = common(sub.add_parser("selftest", help="gradient checks and oracle suites"))
    p.add_argument("--quick", action="store_true", help="fewer random instances")
    return ap


COMMANDS = {
    "build-corpus": cmd_build_corpus,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "analyze": cmd_analyze,
    "selftest": cmd_selftest,
}


def _thread_limit(n):
    if n is None:
        return contextlib.nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return contextlib.nullcontext()
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        rc = RunConfig.load(args.config)
        if args.seed is not None:
            rc.data["seed"] = args.seed
        with _thread_limit(args.threads):
            result = COMMANDS[args.command](rc, args)
    except UsageError as exc:
        log.error("%s", exc)
        return 2
    except (ConfigurationError, ValueError, LookupError, FloatingPointError, RuntimeError, OSError) as exc:
        log.error("%s failed: %s", args.command, exc)
        return 1
    if args.command == "selftest" and not result:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
