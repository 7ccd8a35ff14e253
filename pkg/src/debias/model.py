"""The classifier and its activation maps.

Architecture: a trainable 1x1 channel mixer (D_in -> D linear map applied at
every spatial position), global average pooling, and a bias-free linear head
(D -> M). The head rows are split once, randomly, into an "own" half and a
"context" half; the context half is the part selective suppression freezes
during stage-2 training.

Everything is batched through a flat row layout: a batch of n feature maps
becomes an (n*P, D_in) matrix with P = H*W rows per sample, so pooling and
per-sample map normalization are grouped-row ops in the graph.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import data
from . import diffcore as dc


@dataclass
class ModelParams:
    mixer: np.ndarray  # (D_in, D)
    head: np.ndarray  # (D, M), no bias term
    own_rows: np.ndarray  # indices of head rows carrying category evidence
    context_rows: np.ndarray  # the suppressible half

    def __post_init__(self):
        self.mixer = dc.as_f64(self.mixer)
        self.head = dc.as_f64(self.head)
        self.own_rows = np.asarray(self.own_rows, dtype=np.intp)
        self.context_rows = np.asarray(self.context_rows, dtype=np.intp)
        d = self.head.shape[0]
        if self.mixer.shape[1] != d:
            raise ValueError("mixer output width must match head input")
        merged = np.sort(np.concatenate([self.own_rows, self.context_rows]))
        if d % 2 or len(self.own_rows) != d // 2 or not np.array_equal(merged, np.arange(d)):
            raise ValueError("own/context rows must partition 0..D-1 into equal halves")

    @property
    def d_in(self):
        return self.mixer.shape[0]

    @property
    def d(self):
        return self.head.shape[0]

    @property
    def m(self):
        return self.head.shape[1]


def split_weights(d: int, seed) -> tuple:
    """Uniform random equal partition of head row indices, fixed by seed."""
    if d % 2:
        raise ValueError("head width must be even to split")
    perm = np.random.default_rng(seed).permutation(d)
    return np.sort(perm[: d // 2]), np.sort(perm[d // 2 :])


def init_params(d_in: int, d: int, m: int, seed) -> ModelParams:
    ss = np.random.SeedSequence(seed)
    s_weights, s_split = ss.spawn(2)
    rng = np.random.default_rng(s_weights)
    mixer = rng.uniform(-1.0, 1.0, size=(d_in, d)) / np.sqrt(d_in)
    head = rng.uniform(-1.0, 1.0, size=(d, m)) / np.sqrt(d)
    own, ctx = split_weights(d, s_split)
    return ModelParams(mixer=mixer, head=head, own_rows=own, context_rows=ctx)


@dataclass
class ForwardTrace:
    """Graph handles for one batched forward pass."""

    h: int
    w: int
    n: int
    mixer_node: dc.DiffNode  # leaf
    head_node: dc.DiffNode  # leaf
    feature_rows: dc.DiffNode  # (n*P, D)
    pooled: dc.DiffNode  # (n, D)
    pooled_own: dc.DiffNode  # (n, D/2)
    pooled_ctx: dc.DiffNode  # (n, D/2)
    logits: dc.DiffNode  # (n, M)

    @property
    def pixels(self):
        return self.h * self.w


def forward_batch(params: ModelParams, feats: np.ndarray, h: int, w: int) -> ForwardTrace:
    """Forward a batch given as (n, P, D_in) or (n*P, D_in) with P = h*w."""
    p = h * w
    feats = dc.as_f64(feats)
    if feats.ndim == 3:
        feats = feats.reshape(-1, feats.shape[2])
    if feats.ndim != 2 or feats.shape[0] % p or feats.shape[1] != params.d_in:
        raise ValueError(f"bad feature shape {feats.shape} for {h}x{w}x{params.d_in}")
    n = feats.shape[0] // p
    mixer_node = dc.leaf(params.mixer, name="mixer")
    head_node = dc.leaf(params.head, name="head")
    feature_rows = dc.matmul(dc.constant(feats), mixer_node)
    pooled = dc.gap_rows(feature_rows, p)
    return ForwardTrace(
        h=h,
        w=w,
        n=n,
        mixer_node=mixer_node,
        head_node=head_node,
        feature_rows=feature_rows,
        pooled=pooled,
        pooled_own=dc.take(pooled, params.own_rows, axis=1),
        pooled_ctx=dc.take(pooled, params.context_rows, axis=1),
        logits=dc.matmul(pooled, head_node),
    )


def forward(params: ModelParams, feature_map: np.ndarray, h=None, w=None) -> ForwardTrace:
    """Single-sample forward; accepts an (H, W, D_in) map."""
    fm = dc.as_f64(feature_map)
    if fm.ndim != 3:
        raise ValueError("forward expects an H x W x D_in map")
    return forward_batch(params, fm.reshape(1, -1, fm.shape[2]), fm.shape[0], fm.shape[1])


def cam(params: ModelParams, trace: ForwardTrace, category: int) -> dc.DiffNode:
    """Raw class activation maps for one category, shape (n*P, 1).

    Each row block of P values is one sample's map; reshape the value to
    (n, H, W) for viewing. Differentiable in both mixer and head.
    """
    if not 0 <= category < params.m:
        raise ValueError(f"category {category} out of range")
    col = dc.take(trace.head_node, [category], axis=1)
    return dc.matmul(trace.feature_rows, col)


def cam_values(params: ModelParams, feats_one: np.ndarray, category: int) -> np.ndarray:
    """Plain-numpy CAM for one (H, W, D_in) map, no graph."""
    h_, w_, _ = feats_one.shape
    rows = dc.as_f64(feats_one).reshape(-1, params.d_in) @ params.mixer
    raw = rows @ params.head[:, category]
    return raw.reshape(h_, w_)


def normalize_cam(raw: np.ndarray) -> np.ndarray:
    """relu then scale by the max so values land in [0, 1]."""
    r = np.maximum(dc.as_f64(raw), 0.0)
    return r / (r.max() + 1e-8)


def normalize_cam_rows(raw: dc.DiffNode, block: int) -> dc.DiffNode:
    """Graph version of normalize_cam over per-sample row blocks.

    raw is (n*block, 1); each sample's block is scaled by its own max.
    """
    r = dc.relu(raw)
    peaks = dc.max_rows(r, block)
    denom = dc.add(peaks, dc.constant(np.full(peaks.value.shape, 1e-8)))
    return dc.div(r, dc.repeat_rows(denom, block))


def logit_values(params: ModelParams, feats: np.ndarray) -> np.ndarray:
    """Plain-numpy logits for (n, P, D_in) features."""
    feats = dc.as_f64(feats)
    n, p, _ = feats.shape
    rows = feats.reshape(n * p, -1) @ params.mixer
    pooled = rows.reshape(n, p, -1).mean(axis=1)
    return pooled @ params.head


def predict(params: ModelParams, feats: np.ndarray) -> np.ndarray:
    return dc.sigmoid_values(logit_values(params, feats))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str, params: ModelParams, buffer_window=None, meta=None):
    """JSON header next to a DBL1 tensor store.

    `buffer_window` is the running-mean window (list of (D/2,) vectors) so a
    feature-split run can be resumed with its context estimate intact.
    """
    buffer_window = [] if buffer_window is None else list(buffer_window)
    store_name = os.path.basename(path) + ".store"
    store_path = os.path.join(os.path.dirname(os.path.abspath(path)), store_name)
    tensors = [params.mixer, params.head] + buffer_window
    offsets = data.write_store(store_path, tensors)
    header = {
        "d_in": params.d_in,
        "d": params.d,
        "m": params.m,
        "own_rows": params.own_rows.tolist(),
        "context_rows": params.context_rows.tolist(),
        "store": store_name,
        "offsets": offsets,
        "buffer_len": len(buffer_window),
        "meta": meta or {},
    }
    data.dump_json(header, path)


def load_checkpoint(path: str):
    """Returns (params, buffer_window, meta). Values are float32-widened."""
    with open(path, "r", encoding="utf-8") as fh:
        header = json.load(fh)
    store = os.path.join(os.path.dirname(os.path.abspath(path)), header["store"])
    d_in, d, m = header["d_in"], header["d"], header["m"]
    offs = header["offsets"]
    mixer = data.read_tensor(store, offs[0], (d_in, d))
    head = data.read_tensor(store, offs[1], (d, m))
    window = [
        data.read_tensor(store, o, (d // 2,)) for o in offs[2 : 2 + header["buffer_len"]]
    ]
    params = ModelParams(
        mixer=mixer,
        head=head,
        own_rows=header["own_rows"],
        context_rows=header["context_rows"],
    )
    return params, window, header.get("meta", {})
