"""Directional bias score and selection of the most biased category pairs.

The score for (b, z) is the mean predicted probability of b over samples
where z is present, divided by the mean over samples where z is absent
(both restricted to samples containing b). A score well above 1 means the
model leans on z to predict b. The relation is directional: a high (b, z)
score says nothing about (z, b).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BiasPair:
    biased: int
    context: int
    score: float


@dataclass
class BiasPairSet:
    pairs: list  # BiasPair, sorted by descending score
    freq_threshold: float
    shortfall: bool = False  # true when fewer valid pairs exist than requested

    def as_tuples(self):
        return [(p.biased, p.context) for p in self.pairs]


def bias_score(preds: np.ndarray, labels: np.ndarray, b: int, z: int) -> float:
    """Ratio of mean predicted probability for b with z present vs absent."""
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels)
    has_b = labels[:, b] == 1
    both = has_b & (labels[:, z] == 1)
    excl = has_b & (labels[:, z] == 0)
    if not both.any() or not excl.any():
        raise ValueError(
            f"bias({b},{z}) undefined: needs samples with and without {z}"
        )
    return float(preds[both, b].mean() / preds[excl, b].mean())


def select_biased_pairs(
    preds: np.ndarray,
    labels: np.ndarray,
    k: int = 20,
    freq_threshold: float = 0.2,
) -> BiasPairSet:
    """Top-k (biased, context) pairs.

    For each category b, context candidates are the z co-occurring with b in
    at least `freq_threshold` of b's samples (and for which the score is
    defined at all); the best-scoring candidate survives, ties going to the
    lowest category index. The per-category winners are then ranked globally
    by score. Fewer than k valid winners sets the shortfall flag.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    if not 0.0 < freq_threshold < 1.0:
        raise ValueError("freq_threshold must be in (0, 1)")
    labels = np.asarray(labels)
    n, m = labels.shape
    counts = labels.T @ labels
    winners = []
    for b in range(m):
        n_b = counts[b, b]
        if n_b == 0:
            continue
        best = None
        for z in range(m):
            if z == b:
                continue
            both = counts[b, z]
            excl = n_b - both
            if both < 1 or excl < 1:
                continue  # score undefined, pre-filtered
            if both / n_b < freq_threshold:
                continue
            s = bias_score(preds, labels, b, z)
            if best is None or s > best[0]:
                best = (s, z)
        if best is not None:
            winners.append(BiasPair(biased=b, context=best[1], score=best[0]))
    winners.sort(key=lambda p: (-p.score, p.biased))
    return BiasPairSet(
        pairs=winners[:k],
        freq_threshold=freq_threshold,
        shortfall=len(winners) < k,
    )


def audit_report(pair_set: BiasPairSet, labels: np.ndarray) -> list:
    """Rows for the audit JSON: score plus the raw counts behind it."""
    labels = np.asarray(labels)
    rows = []
    for p in pair_set.pairs:
        has_b = labels[:, p.biased] == 1
        both = int(np.sum(has_b & (labels[:, p.context] == 1)))
        rows.append(
            {
                "b": p.biased,
                "c": p.context,
                "score": p.score,
                "cooccur_count": both,
                "exclusive_count": int(has_b.sum()) - both,
            }
        )
    return rows
