"""Training loop: AdamW, linear warmup, epoch-level early stopping."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import nncore, objective
from .corpus import TrainingTriple
from .distiller import DistillerModel, reconstruction_target
from .nncore import ConfigurationError, ParamStore
from .provider import pool_target_subwords, provider_shape, select_top_layers

log = logging.getLogger(__name__)

ROLES = ("original", "positive", "negative")


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    mode: str = objective.MONO
    batch_size: int = 128
    base_lr: float = 1e-4
    warmup_steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    patience: int = 15
    min_delta: float = 1e-5
    max_epochs: int = 100
    max_steps: int | None = None
    seed: int = 0
    use_negatives: bool = True

    def __post_init__(self):
        for name in ("batch_size", "base_lr", "warmup_steps", "patience", "min_delta", "max_epochs"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.mode not in (objective.MONO, objective.XL):
            raise ConfigurationError(f"unknown mode {self.mode!r}")

    @classmethod
    def for_mode(cls, mode: str, **kw) -> "TrainConfig":
        kw.setdefault("batch_size", 512 if mode == objective.XL else 128)
        return cls(mode=mode, **kw)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``base_lr`` over ``warmup_steps``, then constant."""
    if step < 1:
        raise ValueError("steps are counted from 1")
    return cfg.base_lr * min(1.0, step / cfg.warmup_steps)


class AdamW:
    """Adam with decoupled weight decay over a :class:`ParamStore`."""

    def __init__(self, params: ParamStore, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.params = params
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    @classmethod
    def from_config(cls, params: ParamStore, cfg: TrainConfig) -> "AdamW":
        return cls(params, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise NonFiniteGradientError(f"non-finite gradient in parameter {name!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p.data -= (lr * self.weight_decay) * p.data
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# --------------------------------------------------------------------------
# features
# --------------------------------------------------------------------------


@dataclass
class TripleFeatures:
    """Top-half layer rows, shape (3, L, d), for original/positive/negative."""

    top: np.ndarray


def sentence_top_layers(provider, tokens, target_index: int, key: str, num_layers: int) -> np.ndarray:
    stack = provider.encode_target(tokens, target_index, key)
    return select_top_layers(pool_target_subwords(stack), num_layers)


def triple_features(provider, triple: TrainingTriple) -> TripleFeatures:
    num_layers, _ = provider_shape(provider)
    rows = [
        sentence_top_layers(provider, rec.tokens, rec.target_index, f"{triple.id}:{role}", num_layers)
        for role, rec in zip(ROLES, (triple.original, triple.positive, triple.negative))
    ]
    return TripleFeatures(np.stack(rows).astype(np.float32))


def batch_loss(model: DistillerModel, feats: Sequence[TripleFeatures], mode: str, use_negatives: bool,
               training: bool = False, rng: np.random.Generator | None = None) -> nncore.Tensor:
    """Mean total loss over a batch of triples."""
    top = np.stack([f.top for f in feats]).astype(model.dtype)  # (B, 3, L, d)
    roles = 3 if use_negatives else 2
    x = top[:, :roles]
    targets = reconstruction_target(x)  # (B, roles, d)
    pair = model.distil(x, training=training, rng=rng)

    def part(i):
        return objective.DistilledPair(nncore.take(pair.meaning, (slice(None), i)),
                                       nncore.take(pair.context, (slice(None), i)))

    reps = objective.TripleRepresentations(
        y=targets[:, 0], h=part(0), p=targets[:, 1], pos=part(1),
        n=targets[:, 2] if use_negatives else None, neg=part(2) if use_negatives else None,
        mode=mode, use_negatives=use_negatives,
    )
    return objective.total_loss(reps)


def evaluate_loss(model: DistillerModel, feats: Sequence[TripleFeatures], cfg: TrainConfig,
                  chunk: int = 512) -> float:
    if not feats:
        return math.nan
    total = 0.0
    for s in range(0, len(feats), chunk):
        part = feats[s:s + chunk]
        total += float(batch_loss(model, part, cfg.mode, cfg.use_negatives).data) * len(part)
    return total / len(feats)


# --------------------------------------------------------------------------
# loop
# --------------------------------------------------------------------------


@dataclass
class EarlyStopping:
    patience: int
    min_delta: float
    best: float = math.inf
    best_epoch: int = 0
    bad_epochs: int = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record an epoch's validation loss; returns True when training should stop."""
        if value < self.best - self.min_delta:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class TrainResult:
    model: DistillerModel
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    steps: int = 0
    initial_train_loss: float = math.nan
    final_train_loss: float = math.nan  # eval-mode, last weights (before the best-validation restore)


def train(model: DistillerModel, train_triples: Sequence[TrainingTriple], val_triples: Sequence[TrainingTriple],
          provider, cfg: TrainConfig, features: dict | None = None,
          val_fn: Callable[[DistillerModel], float] | None = None) -> TrainResult:
    """Optimise ``model`` in place and leave it holding the best-validation weights.

    ``val_fn`` replaces the validation-loss computation (used to test the
    early-stopping arithmetic).
    """
    if not train_triples:
        raise ConfigurationError("training corpus is empty")
    if not val_triples and val_fn is None:
        raise ConfigurationError("validation split is empty")
    if features is None:
        features = {}
    for tr in list(train_triples) + list(val_triples):
        if tr.id not in features:
            features[tr.id] = triple_features(provider, tr)
    train_feats = [features[t.id] for t in train_triples]
    val_feats = [features[t.id] for t in val_triples]

    rng = np.random.default_rng(cfg.seed)
    opt = AdamW.from_config(model.params, cfg)
    stopper = EarlyStopping(cfg.patience, cfg.min_delta)
    result = TrainResult(model)
    result.initial_train_loss = evaluate_loss(model, train_feats, cfg)
    best_state = model.state()
    step = 0
    done = False
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_feats))
        losses = []
        lr = 0.0
        for s in range(0, len(order), cfg.batch_size):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                done = True
                break
            step += 1
            lr = lr_schedule(step, cfg)
            batch = [train_feats[i] for i in order[s:s + cfg.batch_size]]
            model.params.zero_grad()
            loss = batch_loss(model, batch, cfg.mode, cfg.use_negatives, training=True, rng=rng)
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"non-finite training loss at step {step}")
            loss.backward()
            opt.step(lr)
            losses.append(float(loss.data))
        if not losses:
            break
        val = val_fn(model) if val_fn is not None else evaluate_loss(model, val_feats, cfg)
        result.history.append({"epoch": epoch, "step": step, "train_loss": float(np.mean(losses)),
                               "val_loss": val, "lr": lr})
        log.info("epoch %d step %d train %.6g val %.6g lr %.3g", epoch, step, np.mean(losses), val, lr)
        stop = stopper.update(epoch, val)
        if stopper.best_epoch == epoch:
            best_state = model.state()
        if stop or done:
            break
    result.final_train_loss = evaluate_loss(model, train_feats, cfg)
    model.load_state(best_state)
    result.best_epoch, result.best_val_loss, result.steps = stopper.best_epoch, stopper.best, step
    return result
