"""Exclusive/co-occur evaluation protocol and ranking metrics.

Per biased pair, the test set is cut three ways: exclusive positives (b
without c), co-occurring positives (b with c), and a shared negative pool
(samples without b). AP over exclusive-plus-negatives vs co-occur-plus-
negatives isolates how much of b's score depends on c being in the image.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import data
from . import diffcore as dc
from . import model as mdl


@dataclass
class PairSplit:
    biased: int
    context: int
    exclusive_idx: np.ndarray
    cooccur_idx: np.ndarray
    negative_idx: np.ndarray
    valid: bool


def build_test_splits(manifest: data.DatasetManifest, pairs) -> list:
    """Row-index splits per pair; invalid (empty-side) pairs are flagged."""
    labels = manifest.label_matrix()
    out = []
    for b, c in pairs:
        has_b = labels[:, b] == 1
        has_c = labels[:, c] == 1
        excl = np.flatnonzero(has_b & ~has_c)
        co = np.flatnonzero(has_b & has_c)
        neg = np.flatnonzero(~has_b)
        valid = excl.size > 0 and co.size > 0
        if not valid:
            warnings.warn(
                f"pair ({b},{c}) has an empty split; excluded from aggregates"
            )
        out.append(PairSplit(b, c, excl, co, neg, valid))
    return out


def average_precision(scores, labels) -> float:
    """AP with stable tie handling: equal scores keep original sample order."""
    scores = dc.as_f64(scores).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have equal length")
    if not ((labels == 0) | (labels == 1)).all():
        raise ValueError("labels must be binary")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("average_precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    ranked = labels[order]
    hits = np.cumsum(ranked)
    ranks = np.arange(1, len(ranked) + 1)
    # fsum: exactly-rounded, so the value is independent of summation order
    return math.fsum(hits[ranked == 1] / ranks[ranked == 1]) / n_pos


def topk_recall(scores, labels, k: int) -> dict:
    """Per-class fraction of positives ranked in their sample's top k.

    Classes without positives are omitted entirely rather than reported as 0.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    scores = dc.as_f64(scores)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have equal shape")
    n, m = scores.shape
    in_top = np.zeros((n, m), dtype=bool)
    for i in range(n):
        top = np.argsort(-scores[i], kind="stable")[: min(k, m)]
        in_top[i, top] = True
    out = {}
    for j in range(m):
        pos = labels[:, j] == 1
        if not pos.any():
            continue
        out[j] = float(in_top[pos, j].mean())
    return out


def weight_cosine(params: mdl.ModelParams, pair) -> float:
    b, c = pair
    u, v = params.head[:, b], params.head[:, c]
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine undefined for a zero-norm weight column")
    return float(u @ v / (nu * nv))


def export_heatmap(heat, path):
    """Binary PGM (P5, maxval 255); v maps to round-half-up(255 v)."""
    heat = dc.as_f64(heat)
    if heat.ndim != 2:
        raise ValueError("heatmap must be 2-D")
    if heat.min() < 0.0 or heat.max() > 1.0:
        raise ValueError("heatmap values must lie in [0, 1]")
    quant = np.floor(255.0 * heat + 0.5).astype(np.uint8)
    h, w = heat.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(quant.tobytes())


# ---------------------------------------------------------------------------
# full-report evaluation


@dataclass
class EvalReport:
    method: str
    seed: int | None
    config_hash: str
    k: int
    pair_rows: list  # one dict per pair, in input order
    map_exclusive: float | None
    map_cooccur: float | None
    mean_cosine: float | None
    topk: dict  # class index -> recall

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "k": self.k,
            "pairs": self.pair_rows,
            "map_exclusive": self.map_exclusive,
            "map_cooccur": self.map_cooccur,
            "mean_cosine": self.mean_cosine,
            "topk_recall": {str(j): v for j, v in sorted(self.topk.items())},
        }


def adapted_scores(preds: np.ndarray, m: int, category_map=None) -> np.ndarray:
    """Scores over the original m categories.

    For a split-biased model the biased category is scored as the max of its
    two columns (with-context and solo), so both halves count as b.
    """
    scores = dc.as_f64(preds)[:, :m].copy()
    for b, solo in category_map or []:
        scores[:, b] = np.maximum(scores[:, b], dc.as_f64(preds)[:, solo])
    return scores


def evaluate(
    params: mdl.ModelParams,
    manifest: data.DatasetManifest,
    pairs,
    method: str = "",
    seed=None,
    config_hash: str = "",
    k: int = 3,
    category_map=None,
) -> EvalReport:
    """Score a checkpoint on the exclusive/co-occur protocol.

    `pairs` are (b, c) tuples over the ORIGINAL categories; for split-biased
    checkpoints pass the training category_map so b is scored as the max of
    its two split columns. Pure: identical inputs give identical reports.
    """
    feats, labels = data.load_arrays(manifest)
    m = len(manifest.categories)
    preds = mdl.predict(params, feats)
    scores = adapted_scores(preds, m, category_map)
    splits = build_test_splits(manifest, pairs)

    rows, ap_ex, ap_co, cosines = [], [], [], []
    for sp in splits:
        row = {"b": sp.biased, "c": sp.context, "valid": sp.valid}
        # the cosine only involves weights, so an invalid split still gets one
        row["cosine"] = weight_cosine(params, (sp.biased, sp.context))
        if sp.valid:
            s = scores[:, sp.biased]
            ex_idx = np.concatenate([sp.exclusive_idx, sp.negative_idx])
            co_idx = np.concatenate([sp.cooccur_idx, sp.negative_idx])
            row["ap_exclusive"] = average_precision(
                s[ex_idx], np.concatenate([np.ones(sp.exclusive_idx.size), np.zeros(sp.negative_idx.size)])
            )
            row["ap_cooccur"] = average_precision(
                s[co_idx], np.concatenate([np.ones(sp.cooccur_idx.size), np.zeros(sp.negative_idx.size)])
            )
            row["bias"] = float(s[sp.cooccur_idx].mean() / s[sp.exclusive_idx].mean())
            ap_ex.append(row["ap_exclusive"])
            ap_co.append(row["ap_cooccur"])
            cosines.append(row["cosine"])
        rows.append(row)

    topk = topk_recall(scores, labels[:, :m], k)
    return EvalReport(
        method=method,
        seed=seed,
        config_hash=config_hash,
        k=k,
        pair_rows=rows,
        map_exclusive=float(np.mean(ap_ex)) if ap_ex else None,
        map_cooccur=float(np.mean(ap_co)) if ap_co else None,
        mean_cosine=float(np.mean(cosines)) if cosines else None,
        topk=topk,
    )


def save_report(report: EvalReport, path):
    data.dump_json(report.to_dict(), path)


def write_comparison_csv(reports: dict, path):
    """One row per pair: bias plus each method's exclusive/co-occur AP.

    `reports` maps method name to EvalReport; the bias column comes from the
    standard method when present, else the alphabetically first.
    """
    if not reports:
        raise ValueError("no reports to tabulate")
    methods = sorted(reports)
    anchor = reports.get("standard", reports[methods[0]])
    header = ["biased", "cooccur", "bias"]
    for name in methods:
        header += [f"{name}_exclusive", f"{name}_cooccur"]
    lines = [",".join(header)]
    for i, row in enumerate(anchor.pair_rows):
        cells = [str(row["b"]), str(row["c"]), _fmt(row.get("bias"))]
        for name in methods:
            other = reports[name].pair_rows[i]
            if (other["b"], other["c"]) != (row["b"], row["c"]):
                raise ValueError("reports disagree on pair order")
            cells += [_fmt(other.get("ap_exclusive")), _fmt(other.get("ap_cooccur"))]
        lines.append(",".join(cells))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6f}"
