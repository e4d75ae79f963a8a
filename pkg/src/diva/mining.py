"""Batch construction and distance-weighted triplet mining on the hypersphere."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

logger = logging.getLogger(__name__)

D_MIN = 0.5
D_MAX = 2.0 - 1e-4


class BatchSpecError(ValueError):
    pass


class MiningError(ValueError):
    pass


@dataclass
class BatchSpec:
    n_classes: int = 8
    m_per_class: int = 4

    def validate(self, tasks) -> None:
        tasks = set(tasks)
        if self.n_classes < 1 or self.m_per_class < 1:
            raise BatchSpecError("batch spec sizes must be positive")
        if "intra" in tasks and self.m_per_class < 3:
            raise BatchSpecError("the intra-class task needs m_per_class >= 3")
        if "shared" in tasks and self.n_classes < 3:
            raise BatchSpecError("the shared task needs n_classes >= 3")
        if "disc" in tasks and self.n_classes < 2:
            raise BatchSpecError("the discriminative task needs n_classes >= 2")

    @property
    def size(self) -> int:
        return self.n_classes * self.m_per_class


class Triplet(NamedTuple):
    a: int
    p: int
    n: int
    kind: str


def build_batch(labels: np.ndarray, candidates: np.ndarray, spec: BatchSpec, rng: np.random.Generator) -> np.ndarray:
    """Draw ``m_per_class`` samples from each of ``n_classes`` distinct classes.

    ``candidates`` are the sample indices eligible for batching (the training
    split).  Returns the chosen indices grouped by class.
    """
    labels = np.asarray(labels)
    candidates = np.asarray(candidates)
    classes, counts = np.unique(labels[candidates], return_counts=True)
    eligible = classes[counts >= spec.m_per_class]
    if len(eligible) < spec.n_classes:
        raise BatchSpecError(
            f"need {spec.n_classes} classes with >= {spec.m_per_class} samples, found {len(eligible)}"
        )
    chosen = rng.choice(eligible, size=spec.n_classes, replace=False)
    out = []
    for c in chosen:
        members = candidates[labels[candidates] == c]
        out.append(rng.choice(members, size=spec.m_per_class, replace=False))
    return np.concatenate(out)


def log_q_density(d, D: int) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return (D - 2) * np.log(d) + 0.5 * (D - 3) * np.log1p(-0.25 * d * d)


def q_density(d, D: int):
    """Unnormalized density of pairwise distances between uniform points on S^{D-1}.

    ``q(d) = d^(D-2) (1 - d^2/4)^((D-3)/2)`` on ``[0, 2]``.
    """
    d_arr = np.asarray(d, dtype=np.float64)
    if D < 2:
        raise ValueError("dimension must be >= 2")
    if np.any((d_arr < 0) | (d_arr > 2)):
        raise ValueError("distance outside [0, 2]")
    out = np.power(d_arr, D - 2) * np.power(1.0 - 0.25 * d_arr * d_arr, 0.5 * (D - 3))
    return float(out) if np.ndim(d) == 0 else out


def log_sampling_weight(d, D: int, lam: float) -> np.ndarray:
    d = np.clip(np.asarray(d, dtype=np.float64), D_MIN, D_MAX)
    return np.minimum(np.log(lam), -log_q_density(d, D))


def sampling_weight(d, D: int, lam: float):
    """``min(lam, 1 / q(d))`` with ``d`` clamped to ``[D_MIN, D_MAX]``."""
    w = np.exp(log_sampling_weight(d, D, lam))
    return float(w) if np.ndim(d) == 0 else w


def sample_negative(anchor, candidates, mask, D: int, lam: float, rng: np.random.Generator) -> int:
    """Pick a candidate index with probability proportional to its sampling weight.

    ``mask`` marks the eligible candidates (True = eligible).
    """
    candidates = np.atleast_2d(candidates)
    mask = np.asarray(mask, dtype=bool)
    eligible = np.flatnonzero(mask)
    if eligible.size == 0:
        raise MiningError("no eligible candidate")
    if eligible.size == 1:
        return int(eligible[0])
    d = np.linalg.norm(candidates[eligible] - anchor, axis=1)
    logw = log_sampling_weight(d, D, lam)
    p = np.exp(logw - logw.max())
    return int(eligible[_draw(p, rng)])


def _draw(p: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(p)
    return min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), len(p) - 1)


def _draw_rows(w: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One index per row of the non-negative weight matrix ``w``."""
    cdf = np.cumsum(w, axis=1)
    u = rng.random(w.shape[0])[:, None] * cdf[:, -1:]
    idx = np.sum(cdf <= u, axis=1)
    return np.minimum(idx, w.shape[1] - 1)


def _row_weights(logw: np.ndarray, mask: np.ndarray) -> np.ndarray:
    masked = np.where(mask, logw, -np.inf)
    top = masked.max(axis=1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    return np.where(mask, np.exp(masked - top), 0.0)


def mine_triplets(kind: str, embeddings: np.ndarray, labels, lam: float, rng: np.random.Generator) -> list[Triplet]:
    """One triplet per valid anchor.

    disc: uniform positive of the anchor's class, distance-weighted negative
    from any other class.  shared: distance-weighted positive from another
    class, distance-weighted negative from a third class.  intra: uniform
    positive and distance-weighted negative, both from the anchor's class.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    n, D = emb.shape
    sq = np.sum(emb * emb, axis=1)
    dist = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2.0 * emb @ emb.T, 0.0))
    logw = log_sampling_weight(dist, D, lam)
    eye = np.eye(n, dtype=bool)
    same = (labels[:, None] == labels[None, :]) & ~eye
    other = labels[:, None] != labels[None, :]

    if kind == "disc":
        valid = same.any(axis=1) & other.any(axis=1)
        pos = _draw_rows(same.astype(float), rng)
        neg = _draw_rows(_row_weights(logw, other), rng)
    elif kind == "shared":
        n_other = np.array([len(np.unique(labels[other[a]])) for a in range(n)])
        valid = n_other >= 2
        pos = _draw_rows(_row_weights(logw, other), rng)
        third = other & (labels[None, :] != labels[pos][:, None])
        neg = _draw_rows(_row_weights(logw, third), rng)
    elif kind == "intra":
        valid = same.sum(axis=1) >= 2
        pos = _draw_rows(same.astype(float), rng)
        rest = same & (np.arange(n)[None, :] != pos[:, None])
        neg = _draw_rows(_row_weights(logw, rest), rng)
    else:
        raise ValueError(f"unknown ranking task {kind!r}")
    out = [Triplet(a, int(pos[a]), int(neg[a]), kind) for a in np.flatnonzero(valid)]
    if not out:
        logger.debug("no valid %s triplet in batch; task skipped", kind)
    return out


def triplet_is_valid(t: Triplet, labels) -> bool:
    ya, yp, yn = labels[t.a], labels[t.p], labels[t.n]
    if len({t.a, t.p, t.n}) != 3:
        return False
    if t.kind == "disc":
        return ya == yp and ya != yn
    if t.kind == "shared":
        return ya != yp and yp != yn and ya != yn
    if t.kind == "intra":
        return ya == yp == yn
    return False
