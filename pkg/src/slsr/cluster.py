"""k-means over embeddings, silhouette diagnostics and per-cluster identity support."""
from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import DatasetBundle, ImageRecord


@dataclass
class ClusterModel:
    K: int
    centroids: np.ndarray
    assignments: np.ndarray
    objective: float
    history: list[float] = field(default_factory=list)
    support: list[frozenset[int]] = field(default_factory=list)

    @property
    def p_c(self) -> list[int]:
        return [len(s) for s in self.support]

    def recompute_objective(self, X: np.ndarray) -> float:
        return float(((np.asarray(X, dtype=np.float64) - self.centroids[self.assignments]) ** 2).sum())


def sq_distances(X: np.ndarray, C: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """Exact squared Euclidean distances, N x K (no expansion trick)."""
    out = np.empty((X.shape[0], C.shape[0]))
    for s in range(0, X.shape[0], chunk):
        d = X[s:s + chunk, None, :] - C[None, :, :]
        out[s:s + chunk] = np.einsum("nkm,nkm->nk", d, d)
    return out


def _kmeanspp(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    idx = [int(rng.integers(n))]
    d2 = sq_distances(X, X[idx])[:, 0]
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with chosen centers
            cand = [i for i in range(n) if i not in idx]
            nxt = int(rng.choice(cand))
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        idx.append(nxt)
        d2 = np.minimum(d2, sq_distances(X, X[[nxt]])[:, 0])
    return X[idx].copy()


def kmeans_fit(F, K: int, seed: int = 0, max_iter: int = 300, tol: float = 0.0,
               init: str = "k-means++", n_init: int = 10) -> ClusterModel:
    """Lloyd iteration on the rows of ``F`` (array or EmbeddingMatrix).

    Objective is ``sum_i min_k ||x_i - mu_k||^2``; it is checked to be
    nonincreasing after every assignment step. Ties go to the lowest
    centroid index. An empty cluster is re-seeded at the point farthest
    from its current centroid. Of ``n_init`` seeded restarts the lowest
    objective wins (earliest on ties).
    """
    X = np.asarray(getattr(F, "values", F), dtype=np.float64)
    n = X.shape[0]
    if K < 1:
        raise ValueError("K must be >= 1")
    if K > n:
        raise ValueError(f"K={K} exceeds number of points {n}")
    if max_iter < 1 or n_init < 1:
        raise ValueError("max_iter and n_init must be >= 1")
    if init not in ("k-means++", "random"):
        raise ValueError(f"unknown init {init!r}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        model = _lloyd(X, K, rng, max_iter, tol, init)
        if best is None or model.objective < best.objective:
            best = model
    return best


def _lloyd(X: np.ndarray, K: int, rng: np.random.Generator, max_iter: int, tol: float,
           init: str) -> ClusterModel:
    n = X.shape[0]
    if init == "k-means++":
        C = _kmeanspp(X, K, rng)
    else:
        C = X[rng.choice(n, size=K, replace=False)].copy()
    history: list[float] = []
    assign = None
    for _ in range(max_iter):
        D = sq_distances(X, C)
        new_assign = np.argmin(D, axis=1)
        obj = float(D[np.arange(n), new_assign].sum())
        if history and obj > history[-1] * (1 + 1e-12) + 1e-12:
            raise AssertionError(f"k-means objective increased: {history[-1]} -> {obj}")
        converged = assign is not None and (
            np.array_equal(new_assign, assign) or history[-1] - obj < tol)
        assign = new_assign
        history.append(obj)
        if converged:
            break
        C = _update(X, assign, C, K)
    model = ClusterModel(K=K, centroids=C, assignments=assign, objective=history[-1], history=history)
    model.objective = model.recompute_objective(X)
    return model


def _update(X: np.ndarray, assign: np.ndarray, C: np.ndarray, K: int) -> np.ndarray:
    new = np.zeros_like(C)
    counts = np.bincount(assign, minlength=K)
    np.add.at(new, assign, X)
    nonempty = counts > 0
    new[nonempty] /= counts[nonempty, None]
    if not nonempty.all():
        resid = ((X - C[assign]) ** 2).sum(1)
        taken: set[int] = set()
        for k in np.flatnonzero(~nonempty):
            order = np.argsort(-resid, kind="stable")
            i = next(int(j) for j in order if int(j) not in taken)
            taken.add(i)
            new[k] = X[i]
    return new


def silhouette(F, assignments) -> float:
    """Mean silhouette ``(b - a) / max(a, b)`` with Euclidean distances.

    Points in singleton clusters score 0.
    """
    X = np.asarray(getattr(F, "values", F), dtype=np.float64)
    labels = np.asarray(assignments)
    uniq, lab = np.unique(labels, return_inverse=True)
    if len(uniq) < 2:
        raise ValueError("silhouette needs at least two clusters")
    D = _pairwise(X)
    n, k = X.shape[0], len(uniq)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), lab] = 1.0
    sums = D @ onehot
    sizes = onehot.sum(0)
    own = sizes[lab]
    a = np.where(own > 1, sums[np.arange(n), lab] / np.maximum(own - 1, 1), 0.0)
    means = sums / sizes[None, :]
    means[np.arange(n), lab] = np.inf
    b = means.min(1)
    denom = np.maximum(a, b)
    s = np.where((own > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean())


def _pairwise(X: np.ndarray, exact_limit: int = 4000) -> np.ndarray:
    if X.shape[0] > exact_limit:
        sq = (X ** 2).sum(1)
        D = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2 * X @ X.T, 0.0))
        np.fill_diagonal(D, 0.0)
        return D
    out = np.empty((X.shape[0], X.shape[0]))
    for i in range(X.shape[0]):
        d = X - X[i]
        out[i] = np.sqrt(np.einsum("nm,nm->n", d, d))
    return out


def silhouette_report(F, ks: Sequence[int], seed: int = 0) -> list[dict]:
    out = []
    for k in ks:
        m = kmeans_fit(F, k, seed=seed)
        out.append({"K": int(k), "score": silhouette(F, m.assignments)})
    return out


def cluster_support(model: ClusterModel, bundle: DatasetBundle, records: Optional[Sequence[ImageRecord]] = None,
                    mode: str = "all") -> ClusterModel:
    """Attach per-cluster identity supports (class indices).

    ``mode="all"``: an identity belongs to every cluster holding one of its
    images. ``mode="dominant"``: only to the cluster holding most of them
    (ties to the lowest index).
    """
    records = list(bundle.train if records is None else records)
    if len(records) != len(model.assignments):
        raise ValueError("assignments must cover every training record")
    per_id: dict[int, Counter] = defaultdict(Counter)
    for r, c in zip(records, model.assignments):
        per_id[bundle.class_index[r.identity]][int(c)] += 1
    support: list[set[int]] = [set() for _ in range(model.K)]
    for cls, counts in per_id.items():
        if mode == "all":
            for c in counts:
                support[c].add(cls)
        elif mode == "dominant":
            best = max(counts.values())
            support[min(c for c, v in counts.items() if v == best)].add(cls)
        else:
            raise ValueError(f"unknown support mode {mode!r}")
    model.support = [frozenset(s) for s in support]
    return model
