"""Slow, loop-based reference implementations used to check the vectorized code."""
import itertools
import math

import numpy as np


def silhouette_brute(X, labels):
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(X)
    scores = []
    for i in range(n):
        own = [j for j in range(n) if labels[j] == labels[i] and j != i]
        if not own:
            scores.append(0.0)
            continue
        a = sum(math.dist(X[i], X[j]) for j in own) / len(own)
        b = math.inf
        for c in set(labels.tolist()) - {labels[i]}:
            members = [j for j in range(n) if labels[j] == c]
            b = min(b, sum(math.dist(X[i], X[j]) for j in members) / len(members))
        scores.append((b - a) / max(a, b) if max(a, b) > 0 else 0.0)
    return sum(scores) / n


def best_partition_objective(x, K):
    """Minimum k-means objective by enumerating every labeling (tiny inputs only)."""
    x = np.asarray(x, dtype=np.float64)
    best = math.inf
    for lab in itertools.product(range(K), repeat=len(x)):
        lab = np.array(lab)
        if len(set(lab.tolist())) < K:
            continue
        obj = sum(((x[lab == k] - x[lab == k].mean(0)) ** 2).sum() for k in range(K))
        best = min(best, obj)
    return best


def cmc_map_brute(dist, q_ids, q_cams, g_ids, g_cams):
    """Per-query loop: sort by (distance, gallery index), drop same id+camera and junk."""
    nq, ng = dist.shape
    cmc = np.zeros(ng)
    aps = []
    for i in range(nq):
        ranked = sorted(range(ng), key=lambda j: (dist[i, j], j))
        kept = [j for j in ranked
                if not (g_ids[j] == q_ids[i] and g_cams[j] == q_cams[i]) and g_ids[j] != -1]
        hits = [g_ids[j] == q_ids[i] for j in kept]
        if not any(hits):
            continue
        first = hits.index(True)
        for k in range(first, ng):
            cmc[k] += 1
        found, precisions = 0, []
        for pos, h in enumerate(hits):
            if h:
                found += 1
                precisions.append(found / (pos + 1))
        aps.append(math.fsum(precisions) / len(precisions))
    valid = len(aps)
    return (cmc / valid if valid else cmc), (math.fsum(aps) / valid if valid else 0.0), valid


def rerank_reference(qf, gf, k1, k2, lam):
    """Straight-line transcription of k-reciprocal re-ranking with explicit loops."""
    feats = np.concatenate([qf, gf]).astype(np.float64)
    n, nq = len(feats), len(qf)
    dist = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            dist[i, j] = ((feats[i] - feats[j]) ** 2).sum()
    col_max = dist.max(axis=0)
    orig = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            orig[i, j] = dist[j, i] / col_max[i]
    rank = [sorted(range(n), key=lambda j: (orig[i, j], j)) for i in range(n)]

    def recip(i, k):
        fwd = rank[i][:k + 1]
        return [c for c in fwd if i in rank[c][:k + 1]]

    V = np.zeros((n, n))
    for i in range(n):
        r = recip(i, k1)
        exp = list(r)
        for c in r:
            rc = recip(c, int(round(k1 / 2)))
            if len(set(rc) & set(r)) > 2 / 3 * len(rc):
                exp += rc
        exp = sorted(set(exp))
        w = [math.exp(-orig[i, j]) for j in exp]
        s = sum(w)
        for j, wj in zip(exp, w):
            V[i, j] = wj / s
    if k2 != 1:
        Vq = np.zeros_like(V)
        for i in range(n):
            for j in rank[i][:k2]:
                Vq[i] += V[j]
            Vq[i] /= k2
        V = Vq
    out = np.zeros((nq, n - nq))
    for i in range(nq):
        for g in range(nq, n):
            inter = sum(min(V[i, t], V[g, t]) for t in range(n))
            jac = 1 - inter / (2 - inter)
            out[i, g - nq] = (1 - lam) * jac + lam * orig[i, g]
    return out
