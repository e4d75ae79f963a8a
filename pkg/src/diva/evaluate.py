"""Retrieval and clustering metrics on held-out classes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ModelState, embed_all, ensemble_embed

KS = (1, 2, 4, 8)


def pairwise_sq_dists(x: np.ndarray) -> np.ndarray:
    sq = np.sum(x * x, axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def neighbor_order(x: np.ndarray) -> np.ndarray:
    """Per query, other samples sorted by distance, ties broken by index."""
    d = pairwise_sq_dists(np.asarray(x, dtype=np.float64))
    np.fill_diagonal(d, np.inf)
    order = np.argsort(d, axis=1, kind="stable")
    return order[:, :-1]  # self sits last at +inf


def recall_at_k(embeddings, labels, ks=KS) -> dict[int, float]:
    """Fraction of queries whose k nearest neighbours (self excluded) hold a same-label sample."""
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    n = x.shape[0]
    if n < 2:
        raise ValueError("recall needs at least two samples")
    ks = sorted(int(k) for k in ks)
    if ks[-1] >= n:
        raise ValueError(f"k={ks[-1]} must be smaller than the sample count {n}")
    order = neighbor_order(x)[:, : ks[-1]]
    hit = labels[order] == labels[:, None]
    first_hit = np.where(hit.any(axis=1), hit.argmax(axis=1), ks[-1])
    return {k: float(np.mean(first_hit < k)) for k in ks}


def kmeans(x, K: int, seed: int = 0, iters: int = 100, return_inertia: bool = False):
    """Lloyd iterations from k-means++ seeding; deterministic given ``seed``."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        raise ValueError("kmeans on empty input")
    if not 1 <= K <= n:
        raise ValueError(f"need 1 <= K <= {n}, got {K}")
    rng = np.random.default_rng(seed)

    centers = np.empty((K, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = np.sum((x - centers[0]) ** 2, axis=1)
    for i in range(1, K):
        total = closest.sum()
        if total <= 0:
            j = rng.integers(n)
        else:
            j = min(int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right")), n - 1)
        centers[i] = x[j]
        closest = np.minimum(closest, np.sum((x - centers[i]) ** 2, axis=1))

    inertia = []
    assign = None
    for _ in range(iters):
        d = np.sum(x * x, axis=1)[:, None] - 2 * x @ centers.T + np.sum(centers**2, axis=1)[None, :]
        new_assign = np.argmin(d, axis=1)
        inertia.append(float(np.sum((x - centers[new_assign]) ** 2)))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(K):
            members = x[assign == c]
            if len(members):
                centers[c] = members.mean(axis=0)
    if return_inertia:
        return assign, inertia
    return assign


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


def nmi(a, b) -> float:
    """``I(a;b) / sqrt(H(a) H(b))``; 1.0 when both partitions are trivial and equal."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError("partitions must have equal length")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1))
    np.add.at(table, (ia, ib), 1)
    ha, hb = _entropy(table.sum(axis=1)), _entropy(table.sum(axis=0))
    if ha == 0.0 or hb == 0.0:
        return 1.0 if ha == hb else 0.0
    pxy = table / table.sum()
    px, py = pxy.sum(axis=1, keepdims=True), pxy.sum(axis=0, keepdims=True)
    nz = pxy > 0
    mi = float(np.sum(pxy[nz] * np.log(pxy[nz] / (px @ py)[nz])))
    return float(np.clip(mi / np.sqrt(ha * hb), 0.0, 1.0))


def singular_spectrum(embeddings) -> np.ndarray:
    """Normalized singular values (sum 1) of the mean-centred sample matrix, descending."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.shape[0] < 2:
        raise ValueError("spectral decay needs at least two samples")
    s = np.linalg.svd(x - x.mean(axis=0), compute_uv=False)
    m = min(x.shape[1], x.shape[0] - 1)
    s = s[:m]
    if s.sum() <= 1e-12 * max(1.0, np.abs(x).max()):
        raise ValueError("rank-0 embeddings (all points identical)")
    return s / s.sum()


def spectral_decay(embeddings) -> float:
    """KL divergence of the normalized singular spectrum from the uniform distribution."""
    p = singular_spectrum(embeddings)
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] * len(p))))


@dataclass
class Metrics:
    recall: dict[int, float]
    nmi: float
    spectral_decay: float
    dim: int

    def to_dict(self) -> dict:
        out = {f"recall@{k}": v for k, v in self.recall.items()}
        out.update(nmi=self.nmi, spectral_decay=self.spectral_decay, dim=self.dim)
        return out


@dataclass
class EvalReport:
    n_samples: int
    n_classes: int
    heads: dict[str, Metrics] = field(default_factory=dict)
    ensemble: Metrics | None = None
    test_weights: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "n_classes": self.n_classes,
            "test_weights": dict(self.test_weights),
            "heads": {k: m.to_dict() for k, m in self.heads.items()},
            "ensemble": self.ensemble.to_dict() if self.ensemble else None,
        }

    @property
    def recall_at_1(self) -> float:
        return self.ensemble.recall[1]


def metrics_for(x: np.ndarray, labels: np.ndarray, K: int, ks=KS, seed: int = 0) -> Metrics:
    ks = [k for k in ks if k < len(labels)]
    clusters = kmeans(x, K, seed=seed)
    return Metrics(recall_at_k(x, labels, ks), nmi(labels, clusters), spectral_decay(x), x.shape[1])


def evaluate_embeddings(per_head: dict[str, np.ndarray], labels, weights=None, ks=KS, seed: int = 0) -> EvalReport:
    labels = np.asarray(labels)
    K = len(np.unique(labels))
    weights = {k: float((weights or {}).get(k, 1.0)) for k in per_head}
    report = EvalReport(len(labels), K, test_weights=weights)
    for kind, x in per_head.items():
        report.heads[kind] = metrics_for(x, labels, K, ks, seed)
    active = {k: v for k, v in per_head.items() if weights[k] != 0.0}
    report.ensemble = metrics_for(ensemble_embed(active, weights), labels, K, ks, seed)
    return report


def evaluate(model: ModelState, features, labels, weights=None, ks=KS, seed: int = 0) -> EvalReport:
    """Embed the held-out samples with every head and score heads and ensemble."""
    return evaluate_embeddings(embed_all(model, np.asarray(features)), labels, weights, ks, seed)

