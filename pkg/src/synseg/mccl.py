"""Multi-category contrastive objective.

Four terms per image, all on clipped cosine similarities:

* align: foreground feature vs its category's text embedding (pull together)
* cont:  foreground vs background of the same category (push apart)
* back:  backgrounds of every ordered category pair, diagonal included (pull together)
* sep:   foregrounds of every ordered category pair, diagonal included (push apart)

Pair terms are normalised by N^2. Diagonal pairs sit at the upper clip bound,
so they add a constant and carry no gradient.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import COS_MAX, COS_MIN, Tensor

TERMS = ("align", "cont", "back", "sep")


@dataclass(frozen=True)
class LossWeights:
    align: float = 1.0
    cont: float = 1.0
    back: float = 10.0
    sep: float = 1.0

    def __post_init__(self):
        for name in TERMS:
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return self.align, self.cont, self.back, self.sep

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(**d)

    def combine(self, terms: dict[str, float]) -> float:
        return sum(getattr(self, k) * terms[k] for k in TERMS)


@dataclass
class LossReport:
    align: float
    cont: float
    back: float
    sep: float
    total: float
    per_image: list[dict] = field(default_factory=list)
    n_categories: list[int] = field(default_factory=list)
    image_ids: list[str] = field(default_factory=list)

    def terms(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in TERMS}

    def to_dict(self) -> dict:
        return asdict(self)


def _rows(x) -> Tensor:
    x = ad.as_tensor(x)
    if x.ndim == 1:
        x = ad.reshape(x, (1, x.shape[0]))
    if x.ndim != 2:
        raise ad.ShapeError(f"expected an (N, d) stack of vectors, got {x.shape}")
    return x


def _aligned(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise ad.ShapeError(f"{name}: index-aligned stacks differ in shape {a.shape} vs {b.shape}")
    if a.shape[0] < 1:
        raise ValueError(f"{name}: need at least one category")


def loss_align(F, T) -> Tensor:
    F, T = _rows(F), _rows(T)
    _aligned(F, T, "loss_align")
    sim = ad.clip_cosine(ad.cosine_rows(F, T))
    return ad.scale(ad.mean(ad.log(sim)), -1.0)


def loss_cont(F, Fb) -> Tensor:
    F, Fb = _rows(F), _rows(Fb)
    _aligned(F, Fb, "loss_cont")
    sim = ad.clip_cosine(ad.cosine_rows(F, Fb))
    return ad.scale(ad.mean(ad.log(ad.sub(1.0, sim))), -1.0)


def loss_back(Fb) -> Tensor:
    Fb = _rows(Fb)
    sim = ad.clip_cosine(ad.cosine_matrix(Fb, Fb))
    return ad.scale(ad.mean(ad.log(sim)), -1.0)


def loss_sep(F) -> Tensor:
    F = _rows(F)
    sim = ad.clip_cosine(ad.cosine_matrix(F, F))
    return ad.scale(ad.mean(ad.log(ad.sub(1.0, sim))), -1.0)


def image_losses(F, Fb, T) -> dict[str, Tensor]:
    return {"align": loss_align(F, T), "cont": loss_cont(F, Fb), "back": loss_back(Fb), "sep": loss_sep(F)}


def weighted_total(terms: dict[str, Tensor], weights: LossWeights) -> Tensor:
    total = None
    for name in TERMS:
        w = getattr(weights, name)
        if w == 0:
            continue
        part = ad.scale(terms[name], w)
        total = part if total is None else ad.add(total, part)
    if total is None:
        total = ad.scale(terms["align"], 0.0)
    return total


def total_loss(batch: Sequence[tuple], weights: LossWeights = LossWeights(),
               image_ids: Sequence[str] | None = None) -> tuple[Tensor, LossReport]:
    """Average each term over the images of a batch and combine with ``weights``.

    ``batch`` holds one ``(F, Fb, T)`` triple per image. Returns the
    differentiable total and a plain-float report.
    """
    if not batch:
        raise ValueError("total_loss: empty batch")
    per_image = []
    totals = []
    sums = {k: 0.0 for k in TERMS}
    n_cats = []
    for F, Fb, T in batch:
        terms = image_losses(F, Fb, T)
        total_i = weighted_total(terms, weights)
        totals.append(total_i)
        values = {k: terms[k].item() for k in TERMS}
        values["total"] = total_i.item()
        per_image.append(values)
        for k in TERMS:
            sums[k] += values[k]
        n_cats.append(_rows(F).shape[0])
    batch_total = ad.scale(ad.sum_(ad.stack(totals)), 1.0 / len(batch))
    means = {k: sums[k] / len(batch) for k in TERMS}
    report = LossReport(**means, total=weights.combine(means), per_image=per_image, n_categories=n_cats,
                        image_ids=list(image_ids) if image_ids is not None else [])
    return batch_total, report


# ----------------------------------------------------------------------
# scalar-loop oracle (verification only)
# ----------------------------------------------------------------------

def _naive_cos(u, v) -> float:
    dot = nu = nv = 0.0
    for a, b in zip(u, v):
        dot += float(a) * float(b)
        nu += float(a) * float(a)
        nv += float(b) * float(b)
    if nu <= 1e-24 or nv <= 1e-24:
        raise ad.DegenerateFeatureError("zero-norm vector")
    c = dot / (math.sqrt(nu) * math.sqrt(nv))
    return min(max(c, COS_MIN), COS_MAX)


def naive_oracle_losses(F, Fb, T) -> dict[str, float]:
    """The four terms written as plain Python loops over lists of floats."""
    F = [list(map(float, row)) for row in np.atleast_2d(np.asarray(F, dtype=np.float64))]
    Fb = [list(map(float, row)) for row in np.atleast_2d(np.asarray(Fb, dtype=np.float64))]
    T = [list(map(float, row)) for row in np.atleast_2d(np.asarray(T, dtype=np.float64))]
    n = len(F)
    align = -sum(math.log(_naive_cos(F[i], T[i])) for i in range(n)) / n
    cont = -sum(math.log(1.0 - _naive_cos(F[i], Fb[i])) for i in range(n)) / n
    back = 0.0
    sep = 0.0
    for j in range(n):
        for k in range(n):
            back -= math.log(_naive_cos(Fb[j], Fb[k]))
            sep -= math.log(1.0 - _naive_cos(F[j], F[k]))
    return {"align": align, "cont": cont, "back": back / (n * n), "sep": sep / (n * n)}
