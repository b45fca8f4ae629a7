"""Reconstruction and cross-reconstruction losses.

Every function accepts single triples (vectors of length d) or batches
(arrays of shape (B, d)); batch values are averaged over triples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nncore
from .distiller import DistilledPair, reconstruct
from .nncore import Tensor

MONO = "monolingual"
XL = "crosslingual"


class WrongVariantError(ValueError):
    pass


@dataclass
class TripleRepresentations:
    y: np.ndarray
    h: DistilledPair
    p: np.ndarray
    pos: DistilledPair
    n: np.ndarray | None = None
    neg: DistilledPair | None = None
    mode: str = MONO
    use_negatives: bool = True

    @property
    def dim(self) -> int:
        return np.shape(self.y)[-1]


def recon_loss(target, reconstructed, d: int | None = None) -> Tensor:
    """||target - reconstructed||^2 / d, averaged over any batch axis."""
    diff = nncore.sub(target, reconstructed)
    if d is None:
        d = diff.shape[-1]
    if diff.shape[-1] != d:
        raise nncore.DimensionError(f"vectors of width {diff.shape[-1]} but d={d}")
    per = nncore.scale(nncore.squared_norm(diff), 1.0 / d)
    return nncore.mean_all(per) if per.data.ndim else per


def _sum(terms) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = nncore.add(out, t)
    return out


def cross_loss_mono(reps: TripleRepresentations) -> Tensor:
    if reps.mode != MONO:
        raise WrongVariantError(f"cross_loss_mono called on {reps.mode} triples")
    h, ps, ng = reps.h, reps.pos, reps.neg
    d = reps.dim
    terms = [
        recon_loss(reps.p, reconstruct(h.meaning, ps.context), d),
        recon_loss(reps.y, reconstruct(ps.meaning, h.context), d),
    ]
    if reps.use_negatives:
        terms += [
            recon_loss(reps.n, reconstruct(ng.meaning, h.context), d),
            recon_loss(reps.y, reconstruct(h.meaning, ng.context), d),
        ]
    return _sum(terms)


def cross_loss_xl(reps: TripleRepresentations) -> Tensor:
    if reps.mode != XL:
        raise WrongVariantError(f"cross_loss_xl called on {reps.mode} triples")
    h, ps, ng = reps.h, reps.pos, reps.neg
    d = reps.dim
    terms = [
        recon_loss(reps.p, reconstruct(h.meaning, ps.context), d),
        recon_loss(reps.y, reconstruct(ps.meaning, h.context), d),
    ]
    if reps.use_negatives:
        terms += [
            recon_loss(reps.p, reconstruct(h.meaning, ng.context), d),
            recon_loss(reps.n, reconstruct(ng.meaning, ps.context), d),
        ]
    return _sum(terms)


def reconstruction_loss(reps: TripleRepresentations) -> Tensor:
    """Self-reconstruction summed over original, positive and (optionally) negative."""
    d = reps.dim
    terms = [
        recon_loss(reps.y, reconstruct(reps.h.meaning, reps.h.context), d),
        recon_loss(reps.p, reconstruct(reps.pos.meaning, reps.pos.context), d),
    ]
    if reps.use_negatives:
        terms.append(recon_loss(reps.n, reconstruct(reps.neg.meaning, reps.neg.context), d))
    return _sum(terms)


def cross_loss(reps: TripleRepresentations) -> Tensor:
    return cross_loss_xl(reps) if reps.mode == XL else cross_loss_mono(reps)


def total_loss(reps: TripleRepresentations) -> Tensor:
    return nncore.add(reconstruction_loss(reps), cross_loss(reps))
