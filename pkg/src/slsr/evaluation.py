"""Retrieval evaluation: L2 distances, CMC / mAP under the cross-camera
protocol, multi-query averaging and k-reciprocal re-ranking."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

REPORT_RANKS = (1, 5, 10, 20)


@dataclass
class RankingResult:
    distmat: np.ndarray
    cmc: np.ndarray
    mAP: float
    protocol: str = "market_single"
    n_queries: int = 0
    n_excluded: int = 0
    ap: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def rank(self, k: int) -> float:
        return float(self.cmc[min(k, len(self.cmc)) - 1])

    def report(self, ranks=REPORT_RANKS) -> dict:
        return {
            "protocol": self.protocol,
            "cmc": [self.rank(k) for k in ranks],
            "ranks": list(ranks),
            "mAP": float(self.mAP),
            "n_queries": int(self.n_queries),
            "n_excluded": int(self.n_excluded),
        }


def _values(x) -> np.ndarray:
    return np.asarray(getattr(x, "values", x), dtype=np.float64)


def pairwise_l2(Q, G) -> np.ndarray:
    """``||q_i - g_j||_2`` for every pair."""
    q, g = _values(Q), _values(G)
    if q.shape[1] != g.shape[1]:
        raise ValueError(f"feature width mismatch: {q.shape[1]} vs {g.shape[1]}")
    d2 = (q ** 2).sum(1)[:, None] + (g ** 2).sum(1)[None, :] - 2.0 * q @ g.T
    d = np.sqrt(np.maximum(d2, 0.0))
    if q.shape == g.shape and np.array_equal(q, g):
        np.fill_diagonal(d, 0.0)
        d = 0.5 * (d + d.T)
    return d


def evaluate_query(dist_row: np.ndarray, q_id: int, q_cam: int, g_ids: np.ndarray, g_cams: np.ndarray):
    """Return ``(hits along the filtered ranking, ap)`` or ``None`` when the query has no valid match.

    Gallery entries sharing both identity and camera with the query, and
    junk entries (identity -1), are removed before ranking.
    """
    order = np.argsort(dist_row, kind="stable")
    keep = ~(((g_ids[order] == q_id) & (g_cams[order] == q_cam)) | (g_ids[order] == -1))
    hits = (g_ids[order][keep] == q_id)
    if not hits.any():
        return None
    pos = np.flatnonzero(hits)
    # correctly rounded sums make the result independent of summation order
    ap = math.fsum(((np.arange(len(pos)) + 1) / (pos + 1)).tolist()) / len(pos)
    return hits, ap


def cmc_map(distmat, q_ids, q_cams, g_ids, g_cams, protocol: str = "market_single") -> RankingResult:
    distmat = np.asarray(distmat, dtype=np.float64)
    q_ids, q_cams = np.asarray(q_ids), np.asarray(q_cams)
    g_ids, g_cams = np.asarray(g_ids), np.asarray(g_cams)
    nq, ng = distmat.shape
    if len(q_ids) != nq or len(q_cams) != nq or len(g_ids) != ng or len(g_cams) != ng:
        raise ValueError("id/camera arrays must align with distmat axes")
    cmc = np.zeros(ng)
    aps = []
    excluded = 0
    for i in range(nq):
        res = evaluate_query(distmat[i], q_ids[i], q_cams[i], g_ids, g_cams)
        if res is None:
            excluded += 1
            continue
        hits, ap = res
        first = int(np.argmax(hits))
        cmc[first:] += 1
        aps.append(ap)
    valid = nq - excluded
    if valid:
        cmc /= valid
    return RankingResult(distmat=distmat, cmc=cmc, mAP=math.fsum(aps) / len(aps) if aps else 0.0, protocol=protocol,
                         n_queries=valid, n_excluded=excluded, ap=np.asarray(aps))


def average_multi_query(features, ids, cams):
    """Average query features per (identity, camera) group.

    Returns ``(features, ids, cams)`` with one row per group, in order of first
    appearance. With one query per group this is the identity map.
    """
    X = _values(features)
    ids, cams = np.asarray(ids), np.asarray(cams)
    keys: dict[tuple[int, int], list[int]] = {}
    for i, key in enumerate(zip(ids.tolist(), cams.tolist())):
        keys.setdefault(key, []).append(i)
    out = np.stack([X[idx].mean(0) for idx in keys.values()])
    k_ids = np.array([k[0] for k in keys])
    k_cams = np.array([k[1] for k in keys])
    return out, k_ids, k_cams


def _k_reciprocal(initial_rank: np.ndarray, i: int, k: int) -> np.ndarray:
    forward = initial_rank[i, :k + 1]
    backward = initial_rank[forward, :k + 1]
    return forward[np.any(backward == i, axis=1)]


def rerank_k_reciprocal(query, gallery, k1: int = 20, k2: int = 6, lambda_value: float = 0.3) -> np.ndarray:
    """k-reciprocal re-ranking of query-gallery distances (Zhong et al. 2017).

    Works on squared L2 distances over the joint query+gallery set,
    normalized per column. Returns ``lambda * original + (1 - lambda) * jaccard``
    for the query x gallery block.
    """
    q, g = _values(query), _values(gallery)
    if not k1 > k2 >= 1:
        raise ValueError("need k1 > k2 >= 1")
    if not 0.0 <= lambda_value <= 1.0:
        raise ValueError("lambda_value must lie in [0, 1]")
    if k1 >= g.shape[0]:
        raise ValueError(f"k1={k1} must be smaller than the gallery size {g.shape[0]}")
    nq = q.shape[0]
    feats = np.concatenate([q, g])
    n = feats.shape[0]
    sq = (feats ** 2).sum(1)
    original = np.maximum(sq[:, None] + sq[None, :] - 2.0 * feats @ feats.T, 0.0)
    np.fill_diagonal(original, 0.0)
    original = (original / np.max(original, axis=0)).T
    initial_rank = np.argsort(original, axis=1, kind="stable")
    half = int(np.around(k1 / 2.0))

    V = np.zeros((n, n))
    for i in range(n):
        recip = _k_reciprocal(initial_rank, i, k1)
        expansion = recip
        for cand in recip:
            cand_recip = _k_reciprocal(initial_rank, cand, half)
            if len(np.intersect1d(cand_recip, recip)) > 2.0 / 3.0 * len(cand_recip):
                expansion = np.append(expansion, cand_recip)
        expansion = np.unique(expansion)
        w = np.exp(-original[i, expansion])
        V[i, expansion] = w / w.sum()

    if k2 != 1:
        V = V[initial_rank[:, :k2]].mean(axis=1)

    jaccard = np.zeros((nq, n))
    for i in range(nq):
        nz = np.flatnonzero(V[i])
        mins = np.minimum(V[i, nz][None, :], V[:, nz]).sum(1)
        jaccard[i] = 1.0 - mins / (2.0 - mins)

    final = jaccard * (1.0 - lambda_value) + original[:nq] * lambda_value
    return final[:, nq:]


def write_report(result: RankingResult, path, extra: Optional[dict] = None) -> dict:
    rep = result.report()
    if extra:
        rep.update(extra)
    Path(path).write_text(json.dumps(rep, indent=2, sort_keys=True))
    return rep


def plot_cmc(results: dict[str, RankingResult], path, max_rank: int = 20) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for name, r in results.items():
        k = min(max_rank, len(r.cmc))
        ax.plot(np.arange(1, k + 1), r.cmc[:k], marker=".", label=f"{name} (mAP {r.mAP:.3f})")
    ax.set_xlabel("rank")
    ax.set_ylabel("matching rate")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
