"""Label targets for real and generated samples.

Schemes: one-hot, LSR, LSRO (uniform), pseudo-label (argmax), all-in-one
(extra class) and SLSR (uniform over the identities of the sample's
cluster). Targets with a single nonzero value also carry that value as an
exact ``Fraction`` in ``weight``.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Optional

import numpy as np

SCHEMES = ("one_hot", "lsr", "lsro", "pseudo", "all_in_one", "slsr")


@dataclass
class LabelTarget:
    probs: np.ndarray
    provenance: str
    scheme: str
    cluster_id: Optional[int] = None
    weight: Optional[Fraction] = None

    def __post_init__(self):
        if self.provenance not in ("real", "generated"):
            raise ValueError(f"bad provenance {self.provenance!r}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"bad scheme {self.scheme!r}")

    @property
    def support(self) -> frozenset[int]:
        return frozenset(int(i) for i in np.flatnonzero(self.probs))

    def to_json(self) -> dict:
        idx = np.flatnonzero(self.probs)
        return {
            "indices": [int(i) for i in idx],
            "values": [float(v) for v in self.probs[idx]],
            "n": int(self.probs.shape[0]),
            "scheme": self.scheme,
            "provenance": self.provenance,
            "cluster": self.cluster_id,
        }

    @classmethod
    def from_json(cls, d: dict) -> "LabelTarget":
        probs = np.zeros(d["n"])
        probs[d["indices"]] = d["values"]
        return cls(probs=probs, provenance=d["provenance"], scheme=d["scheme"], cluster_id=d.get("cluster"))


def _uniform(indices: Iterable[int], n: int) -> tuple[np.ndarray, Fraction]:
    idx = sorted(set(int(i) for i in indices))
    w = Fraction(1, len(idx))
    probs = np.zeros(n)
    probs[idx] = float(w)
    return probs, w


def one_hot(y: int, n: int, provenance: str = "real") -> LabelTarget:
    if not 0 <= y < n:
        raise ValueError(f"class {y} out of range for {n} classes")
    probs, w = _uniform([y], n)
    return LabelTarget(probs, provenance, "one_hot", weight=w)


def lsr(y: int, n: int, eps: float, provenance: str = "real", normalized: bool = True) -> LabelTarget:
    """Smoothed one-hot: ``(1 - eps) * delta + eps / n``.

    ``normalized=False`` gives the variant with ``1 - eps`` on the true class
    and ``eps / n`` elsewhere, which does not sum to one.
    """
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"eps must lie in [0, 1], got {eps}")
    if not 0 <= y < n:
        raise ValueError(f"class {y} out of range for {n} classes")
    probs = np.full(n, eps / n)
    probs[y] = (1.0 - eps) + (eps / n if normalized else 0.0)
    return LabelTarget(probs, provenance, "lsr")


def lsro(n: int) -> LabelTarget:
    if n < 1:
        raise ValueError("n must be >= 1")
    probs, w = _uniform(range(n), n)
    return LabelTarget(probs, "generated", "lsro", weight=w)


def pseudo_label(scores) -> LabelTarget:
    """One-hot at the argmax of ``scores``; ties go to the lowest index."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("empty score vector")
    y = int(np.argmax(scores))
    probs, w = _uniform([y], scores.size)
    return LabelTarget(probs, "generated", "pseudo", weight=w)


def all_in_one(n: int, extra_class: bool = True) -> LabelTarget:
    """One-hot at index ``n``: the extra class shared by all generated samples."""
    if not extra_class:
        raise ValueError("all-in-one labels need a model with an extra class")
    if n < 1:
        raise ValueError("n must be >= 1")
    probs, w = _uniform([n], n + 1)
    return LabelTarget(probs, "generated", "all_in_one", weight=w)


def slsr_target(support: Iterable[int], n: int, cluster_id: Optional[int] = None) -> LabelTarget:
    """``1 / p_c`` on each identity of the cluster support, zero elsewhere."""
    support = set(int(k) for k in support)
    if not support:
        raise ValueError("empty cluster support")
    if min(support) < 0 or max(support) >= n:
        raise ValueError(f"cluster support not within [0, {n})")
    probs, w = _uniform(support, n)
    return LabelTarget(probs, "generated", "slsr", cluster_id=cluster_id, weight=w)


def target_matrix(targets: list[LabelTarget]) -> np.ndarray:
    return np.stack([t.probs for t in targets])
