"""Training objectives and the selective-suppression forward rule.

Conventions: targets and per-sample weights enter the graph as constants;
only mixer and head leaves carry gradient. Sums over contributing samples,
pairs, and pixels are realized as means, so loss scale does not drift with
batch size and the published weighting defaults stay meaningful.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import model as mdl


def _check_binary(t) -> np.ndarray:
    t = dc.as_f64(t)
    if not ((t == 0.0) | (t == 1.0)).all():
        raise ValueError("targets must be binary")
    return t


# ---------------------------------------------------------------------------
# cross-entropy family


def bce_elements(logits: dc.DiffNode, targets) -> dc.DiffNode:
    """Per-element BCE terms (same shape as logits), guarded logs inside."""
    t = _check_binary(targets)
    if t.shape != logits.value.shape:
        raise ValueError(f"targets {t.shape} vs logits {logits.value.shape}")
    s = dc.sigmoid(logits)
    pos = dc.mul(dc.constant(t), dc.log(s))
    neg = dc.mul(dc.constant(1.0 - t), dc.log(dc.sub(dc.constant(np.ones_like(t)), s)))
    return dc.scale(dc.add(pos, neg), -1.0)


def bce(logits: dc.DiffNode, targets) -> dc.DiffNode:
    """Mean BCE over all categories (and samples, when batched)."""
    return dc.mean_all(bce_elements(logits, targets))


def weighted_bce(logits: dc.DiffNode, targets, alpha: float) -> dc.DiffNode:
    if alpha < 1.0:
        raise ValueError("alpha must be at least 1")
    return dc.scale(bce(logits, targets), float(alpha))


def weighted_bce_batch(logits: dc.DiffNode, targets, sample_weights) -> dc.DiffNode:
    """Mean of per-element BCE scaled by a per-sample weight column."""
    w = dc.as_f64(sample_weights)
    n, m = logits.value.shape
    if w.shape != (n,):
        raise ValueError("need one weight per sample")
    tile = np.broadcast_to(w[:, None], (n, m)).copy()
    return dc.mean_all(dc.mul(dc.constant(tile), bce_elements(logits, targets)))


def elementwise_weighted_bce(logits: dc.DiffNode, targets, weights) -> dc.DiffNode:
    """Mean of per-element BCE scaled by a full weight matrix."""
    w = dc.as_f64(weights)
    if w.shape != logits.value.shape:
        raise ValueError("weight matrix must match logits shape")
    return dc.mean_all(dc.mul(dc.constant(w), bce_elements(logits, targets)))


# ---------------------------------------------------------------------------
# loss weighting for skewed pairs


@dataclass(frozen=True)
class PairStats:
    biased: int
    context: int
    cooccur_count: int
    exclusive_count: int
    alpha: float


@dataclass
class AlphaTable:
    stats: list  # PairStats per tracked pair
    alpha_min: float


def build_alpha_table(labels, pairs, alpha_min: float = 3.0) -> AlphaTable:
    """Per-pair skew weights from training-set counts.

    alpha = max(sqrt(cooccur / exclusive), alpha_min), applied to samples
    where the biased category shows up without its context.
    """
    if alpha_min <= 1.0:
        raise ValueError("alpha_min must exceed 1")
    labels = np.asarray(labels)
    stats = []
    for b, c in pairs:
        has_b = labels[:, b] == 1
        co = int(np.sum(has_b & (labels[:, c] == 1)))
        ex = int(has_b.sum()) - co
        if ex == 0 or co == 0:
            raise ValueError(f"pair ({b},{c}) has empty co-occur or exclusive set")
        stats.append(
            PairStats(b, c, co, ex, max(math.sqrt(co / ex), float(alpha_min)))
        )
    return AlphaTable(stats=stats, alpha_min=float(alpha_min))


def alpha_for(labels_row, table: AlphaTable) -> float:
    """Weight for one sample: max alpha over pairs it is exclusive for, else 1."""
    row = np.asarray(labels_row)
    out = 1.0
    for st in table.stats:
        if row[st.biased] == 1 and row[st.context] == 0:
            out = max(out, st.alpha)
    return out


def alpha_vector(labels, table: AlphaTable) -> np.ndarray:
    labels = np.asarray(labels)
    return np.array([alpha_for(row, table) for row in labels])


def exclusive_mask(labels, pairs) -> np.ndarray:
    """True where a sample contains some biased category without its context.

    A sample exclusive for one pair counts as exclusive outright, even if it
    co-occurs for another pair: the context half must never train on context
    evidence for any biased category.
    """
    labels = np.asarray(labels)
    mask = np.zeros(len(labels), dtype=bool)
    for b, c in pairs:
        mask |= (labels[:, b] == 1) & (labels[:, c] == 0)
    return mask


# ---------------------------------------------------------------------------
# CAM losses


class CamSnapshot:
    """Normalized activation maps of the frozen stage-1 model.

    Computed lazily per (sample key, category) and cached; the underlying
    parameters are copied at construction so later training cannot leak in.
    """

    def __init__(self, params: mdl.ModelParams, pairs):
        self.params = mdl.ModelParams(
            mixer=params.mixer.copy(),
            head=params.head.copy(),
            own_rows=params.own_rows.copy(),
            context_rows=params.context_rows.copy(),
        )
        self.pairs = [tuple(p) for p in pairs]
        self._tracked = {k for p in self.pairs for k in p}
        self._cache = {}

    def rows(self, key, feat_rows: np.ndarray, category: int, normalized: bool = True) -> np.ndarray:
        if category not in self._tracked:
            raise ValueError(f"category {category} not covered by the snapshot")
        hit = self._cache.get((key, category, normalized))
        if hit is None:
            # (P, 1) column shape matches the graph's matmul exactly, so a
            # grounding loss against an unchanged model is zero to the bit
            raw = (dc.as_f64(feat_rows) @ self.params.mixer) @ self.params.head[:, [category]]
            hit = (mdl.normalize_cam(raw) if normalized else raw).ravel()
            self._cache[(key, category, normalized)] = hit
        return hit

    def normalized_rows(self, key, feat_rows: np.ndarray, category: int) -> np.ndarray:
        return self.rows(key, feat_rows, category, normalized=True)


def _gather_sample_rows(trace: mdl.ForwardTrace, sample_idx) -> dc.DiffNode:
    p = trace.pixels
    idx = np.asarray(sample_idx, dtype=np.intp)
    rows = (idx[:, None] * p + np.arange(p)).ravel()
    return dc.take(trace.feature_rows, rows, axis=0)


def _cam_node(trace: mdl.ForwardTrace, sub_rows, category, normalized=True) -> dc.DiffNode:
    col = dc.take(trace.head_node, [int(category)], axis=1)
    raw = dc.matmul(sub_rows, col)
    return mdl.normalize_cam_rows(raw, trace.pixels) if normalized else raw


def cam_overlap_terms(params, trace, b, c, sample_idx, normalized=True) -> dc.DiffNode:
    """Pixelwise product of the two activation maps for a sample subset."""
    sub = _gather_sample_rows(trace, sample_idx)
    return dc.mul(
        _cam_node(trace, sub, b, normalized), _cam_node(trace, sub, c, normalized)
    )


def cam_overlap_loss(params, trace, pairs_present, normalized=True) -> dc.DiffNode:
    """Mean overlap over the given pairs and all pixels.

    Callers must only list pairs whose two categories are both present in
    every sample the trace covers.
    """
    if not pairs_present:
        raise ValueError("cam_overlap_loss needs at least one present pair")
    parts = [
        cam_overlap_terms(params, trace, b, c, np.arange(trace.n), normalized)
        for b, c in pairs_present
    ]
    return dc.mean_all(dc.concat(parts, axis=0))


def cam_ground_terms(params, trace, b, c, sample_idx, pre_b, pre_c, normalized=True) -> dc.DiffNode:
    """|frozen map - live map| summed over the two categories, per pixel."""
    sub = _gather_sample_rows(trace, sample_idx)
    live_b = _cam_node(trace, sub, b, normalized)
    live_c = _cam_node(trace, sub, c, normalized)
    ref_b = dc.constant(dc.as_f64(pre_b).reshape(-1, 1))
    ref_c = dc.constant(dc.as_f64(pre_c).reshape(-1, 1))
    return dc.add(
        dc.absval(dc.sub(ref_b, live_b)), dc.absval(dc.sub(ref_c, live_c))
    )


def cam_ground_loss(params, trace, snapshot: CamSnapshot, pairs_present, sample_key, feat_rows, normalized=True) -> dc.DiffNode:
    """Single-sample grounding loss against the stage-1 snapshot."""
    if snapshot is None:
        raise ValueError("grounding needs a stage-1 snapshot")
    if trace.n != 1:
        raise ValueError("single-sample form; use cam_ground_terms for batches")
    if not pairs_present:
        raise ValueError("cam_ground_loss needs at least one present pair")
    parts = []
    for b, c in pairs_present:
        pre_b = snapshot.rows(sample_key, feat_rows, b, normalized)
        pre_c = snapshot.rows(sample_key, feat_rows, c, normalized)
        parts.append(cam_ground_terms(params, trace, b, c, [0], pre_b, pre_c, normalized))
    return dc.mean_all(dc.concat(parts, axis=0))


def cam_total_loss(params, trace, snapshot, pairs_present, targets, lam1, lam2, sample_key=None, feat_rows=None, normalized=True) -> dc.DiffNode:
    """lam1 * overlap + lam2 * grounding + BCE; plain BCE when no pair applies."""
    if lam1 < 0 or lam2 < 0:
        raise ValueError("loss weights must be nonnegative")
    total = bce(trace.logits, targets)
    if not pairs_present:
        return total
    if lam1 > 0:
        total = dc.add(total, dc.scale(cam_overlap_loss(params, trace, pairs_present, normalized), lam1))
    if lam2 > 0:
        total = dc.add(
            total,
            dc.scale(
                cam_ground_loss(params, trace, snapshot, pairs_present, sample_key, feat_rows, normalized),
                lam2,
            ),
        )
    return total


def overlap_values(params: mdl.ModelParams, feat_rows: np.ndarray, b: int, c: int) -> float:
    """Plain-numpy normalized-CAM overlap for one sample (P, D_in)."""
    mixed = dc.as_f64(feat_rows) @ params.mixer
    nb = mdl.normalize_cam(mixed @ params.head[:, [b]])
    nc = mdl.normalize_cam(mixed @ params.head[:, [c]])
    return float(np.mean(nb * nc))


# ---------------------------------------------------------------------------
# feature split with selective suppression


class RunningMeanBuffer:
    """Mean of the pooled context features over the last few minibatches."""

    def __init__(self, width: int, window: int = 10):
        if width <= 0 or window <= 0:
            raise ValueError("width and window must be positive")
        self.width = width
        self.entries = deque(maxlen=window)

    def mean(self) -> np.ndarray:
        if not self.entries:
            return np.zeros(self.width)
        return np.mean(np.stack(self.entries), axis=0)

    def snapshot(self) -> list:
        return [e.copy() for e in self.entries]


def update_running_mean(buffer: RunningMeanBuffer, batch_mean) -> RunningMeanBuffer:
    v = dc.as_f64(batch_mean)
    if v.shape != (buffer.width,):
        raise ValueError(f"expected vector of length {buffer.width}, got {v.shape}")
    buffer.entries.append(v.copy())
    return buffer


def suppressed_logits(params: mdl.ModelParams, trace: mdl.ForwardTrace, excl_mask, buffer: RunningMeanBuffer) -> dc.DiffNode:
    """Split-head forward for a batch.

    Non-exclusive samples use both halves with gradients everywhere.
    Exclusive samples keep the own half but get the running-mean context
    vector through a gradient-stopped copy of the context head rows, so
    nothing upstream of the context path learns from them.
    """
    mask = np.asarray(excl_mask, dtype=bool)
    if mask.shape != (trace.n,):
        raise ValueError("mask length must match batch size")
    head_own = dc.take(trace.head_node, params.own_rows, axis=0)
    head_ctx = dc.take(trace.head_node, params.context_rows, axis=0)
    idx_plain = np.flatnonzero(~mask)
    idx_excl = np.flatnonzero(mask)
    parts = []
    if idx_plain.size:
        own = dc.take(trace.pooled_own, idx_plain, axis=0)
        ctx = dc.take(trace.pooled_ctx, idx_plain, axis=0)
        parts.append(dc.add(dc.matmul(own, head_own), dc.matmul(ctx, head_ctx)))
    if idx_excl.size:
        own = dc.take(trace.pooled_own, idx_excl, axis=0)
        ctx_const = dc.constant(buffer.mean().reshape(1, -1))
        ctx_row = dc.matmul(ctx_const, dc.stop_gradient(head_ctx))  # (1, M)
        spread = dc.matmul(dc.constant(np.ones((idx_excl.size, 1))), ctx_row)
        parts.append(dc.add(dc.matmul(own, head_own), spread))
    out = parts[0] if len(parts) == 1 else dc.concat(parts, axis=0)
    order = np.concatenate([idx_plain, idx_excl])
    if np.array_equal(order, np.arange(trace.n)):
        return out
    return dc.take(out, np.argsort(order), axis=0)


def suppressed_forward(params, trace, buffer, is_exclusive: bool) -> dc.DiffNode:
    """Single-sample form of suppressed_logits."""
    if trace.n != 1:
        raise ValueError("single-sample form; use suppressed_logits for batches")
    return suppressed_logits(params, trace, [bool(is_exclusive)], buffer)
