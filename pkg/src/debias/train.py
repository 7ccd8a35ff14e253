"""Two-stage training for the proposed methods and the designed baselines.

Stage 1 trains a standard classifier with BCE on an 80% slice of the
training data and picks the biased pairs on the held-out 20%. Stage 2
continues from those weights with the method-specific objective, on the full
(possibly transformed) training set. Every random draw comes from a seed tree
derived from the config seed, so a fixed config reproduces runs bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import bias as bias_mod
from . import data
from . import diffcore as dc
from . import losses
from . import model as mdl

METHODS = (
    "standard",
    "ours_cam",
    "ours_feature_split",
    "remove_cooccur_labels",
    "remove_cooccur_images",
    "weighted_loss",
    "negative_penalty",
    "split_biased",
)

TRANSFORM_METHODS = ("remove_cooccur_labels", "remove_cooccur_images", "split_biased")


@dataclass
class TrainConfig:
    method: str = "standard"
    stage1_epochs: int = 30
    stage2_epochs: int = 30
    batch_size: int = 64
    sgd_stage1: dc.SgdConfig = dc.SgdConfig(0.1, 0.1, 15)
    sgd_stage2: dc.SgdConfig = dc.SgdConfig(0.01, 0.1, 15)
    lambda1: float = 0.1
    lambda2: float = 0.01
    alpha_min: float = 3.0
    k: int = 20
    freq_threshold: float = 0.2
    seed: int = 0
    mixer_width: int = 64
    weighted_factor: float = 10.0
    negative_penalty_weight: float = 10.0
    remove_labels_globally: bool = False
    normalize_maps: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ValueError("epoch counts must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.mixer_width % 2:
            raise ValueError("mixer_width must be even (the head rows get halved)")

    def to_dict(self) -> dict:
        d = {
            k: getattr(self, k)
            for k in (
                "method",
                "stage1_epochs",
                "stage2_epochs",
                "batch_size",
                "lambda1",
                "lambda2",
                "alpha_min",
                "k",
                "freq_threshold",
                "seed",
                "mixer_width",
                "weighted_factor",
                "negative_penalty_weight",
                "remove_labels_globally",
                "normalize_maps",
            )
        }
        for name in ("sgd_stage1", "sgd_stage2"):
            sgd = getattr(self, name)
            d[name] = {
                "initial_lr": sgd.initial_lr,
                "decay_factor": sgd.decay_factor,
                "decay_every": sgd.decay_every,
            }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kwargs = dict(d)
        for name in ("sgd_stage1", "sgd_stage2"):
            if name in kwargs and isinstance(kwargs[name], dict):
                kwargs[name] = dc.SgdConfig(**kwargs[name])
        unknown = set(kwargs) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**kwargs)


@dataclass
class TrainArtifacts:
    params: mdl.ModelParams
    pairs: bias_mod.BiasPairSet | None = None
    snapshot: losses.CamSnapshot | None = None
    alpha_table: losses.AlphaTable | None = None
    buffer: losses.RunningMeanBuffer | None = None
    loss_curve: list = field(default_factory=list)
    step_log: list = field(default_factory=list)
    seeds: dict = field(default_factory=dict)
    category_map: list | None = None  # split_biased: (biased col, solo col) pairs

    def clone_params(self) -> mdl.ModelParams:
        p = self.params
        return mdl.ModelParams(
            p.mixer.copy(), p.head.copy(), p.own_rows.copy(), p.context_rows.copy()
        )

    def build_snapshot(self):
        """Freeze the current parameters as the grounding reference.

        Call between the stages; the snapshot copies the weights, so later
        updates cannot leak into it.
        """
        if self.pairs is None or not self.pairs.pairs:
            raise ValueError("no biased pairs to snapshot")
        self.snapshot = losses.CamSnapshot(self.params, self.pairs.as_tuples())
        return self.snapshot


def _derive_seeds(seed) -> dict:
    rng = np.random.default_rng(seed)
    names = ("init", "split", "shuffle1", "shuffle2", "extra")
    draws = rng.integers(0, 2**63, size=len(names))
    out = {k: int(v) for k, v in zip(names, draws)}
    out["root"] = int(seed)
    return out


def _apply_step(params, trace, gmap, lr) -> mdl.ModelParams:
    stepped = dc.sgd_step(
        {"mixer": params.mixer, "head": params.head},
        {"mixer": gmap[trace.mixer_node], "head": gmap[trace.head_node]},
        lr,
    )
    return mdl.ModelParams(
        stepped["mixer"], stepped["head"], params.own_rows, params.context_rows
    )


def train_stage1(manifest: data.DatasetManifest, cfg: TrainConfig) -> TrainArtifacts:
    """BCE training on the 80% slice, then bias-pair selection on the 20%."""
    if not manifest.samples:
        raise ValueError("empty dataset")
    feats, labels = data.load_arrays(manifest)
    seeds = _derive_seeds(cfg.seed)
    params = mdl.init_params(
        manifest.d_in, cfg.mixer_width, len(manifest.categories), seeds["init"]
    )
    part80, part20 = data.split_80_20(manifest, seeds["split"])
    row_of = {s.id: i for i, s in enumerate(manifest.samples)}
    rows80 = np.array([row_of[s.id] for s in part80.samples])
    rows20 = np.array([row_of[s.id] for s in part20.samples])
    f80, l80 = feats[rows80], labels[rows80]

    shuffle_rng = np.random.default_rng(seeds["shuffle1"])
    curve, step_log = [], []
    for epoch in range(cfg.stage1_epochs):
        lr = cfg.sgd_stage1.lr_at(epoch)
        order = shuffle_rng.permutation(len(rows80))
        batch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            trace = mdl.forward_batch(params, f80[idx], manifest.h, manifest.w)
            root = losses.bce(trace.logits, l80[idx])
            gmap = dc.eval_backward(root)
            params = _apply_step(params, trace, gmap, lr)
            batch_losses.append(float(root.value))
        curve.append(float(np.mean(batch_losses)))
        step_log.append({"stage": 1, "epoch": epoch, "lr": lr, "loss": curve[-1]})

    preds20 = mdl.predict(params, feats[rows20])
    pair_set = bias_mod.select_biased_pairs(
        preds20, labels[rows20], k=cfg.k, freq_threshold=cfg.freq_threshold
    )
    artifacts = TrainArtifacts(
        params=params,
        pairs=pair_set,
        loss_curve=curve,
        step_log=step_log,
        seeds=seeds,
    )
    if cfg.method == "ours_cam" and pair_set.pairs:
        artifacts.build_snapshot()
    if cfg.method == "ours_feature_split" and pair_set.pairs:
        artifacts.alpha_table = losses.build_alpha_table(
            labels, pair_set.as_tuples(), cfg.alpha_min
        )
    return artifacts


# ---------------------------------------------------------------------------
# dataset transforms for the designed baselines


def split_biased_map(pairs, m: int) -> list:
    """(original column, appended solo column) per pair."""
    return [(b, m + j) for j, (b, _) in enumerate(pairs)]


def transform_dataset(
    manifest: data.DatasetManifest,
    method: str,
    pairs,
    remove_labels_globally: bool = False,
) -> data.DatasetManifest:
    """Label/image surgery behind the removal and split baselines.

    remove_cooccur_labels clears the context label on samples containing the
    biased category (everywhere, if the global flag is set, dropping samples
    left without any positive). remove_cooccur_images drops co-occurring
    samples outright. split_biased appends one solo category per pair and
    moves exclusive samples' biased label there, turning the original column
    into "biased with its context".
    """
    pairs = [tuple(p) for p in pairs]
    if method == "remove_cooccur_labels":
        new_samples = []
        for s in manifest.samples:
            row = list(s.labels)
            for b, c in pairs:
                if row[c] == 1 and (remove_labels_globally or row[b] == 1):
                    row[c] = 0
            if sum(row) == 0:
                continue  # only reachable under the global flag
            new_samples.append(data.SampleRef(s.id, s.offset, row))
        return replace(manifest, samples=new_samples)

    if method == "remove_cooccur_images":
        keep = [
            s
            for s in manifest.samples
            if not any(s.labels[b] == 1 and s.labels[c] == 1 for b, c in pairs)
        ]
        return replace(manifest, samples=keep)

    if method == "split_biased":
        m = len(manifest.categories)
        col_of = dict(split_biased_map(pairs, m))
        cats = list(manifest.categories) + [
            f"{manifest.categories[b]}_solo" for b, _ in pairs
        ]
        new_samples = []
        for s in manifest.samples:
            row = list(s.labels) + [0] * len(pairs)
            for b, c in pairs:
                if row[b] == 1 and row[c] == 0:
                    row[b] = 0
                    row[col_of[b]] = 1
            new_samples.append(data.SampleRef(s.id, s.offset, row))
        return replace(manifest, categories=cats, samples=new_samples)

    raise ValueError(f"no dataset transform for method {method!r}")


# ---------------------------------------------------------------------------
# stage 2


def train_stage2(
    artifacts: TrainArtifacts, manifest: data.DatasetManifest, cfg: TrainConfig
) -> TrainArtifacts:
    """Continue from stage-1 weights with the method-specific objective."""
    pair_tuples = artifacts.pairs.as_tuples() if artifacts.pairs else []
    if cfg.method != "standard" and not pair_tuples:
        raise ValueError(f"{cfg.method} needs the stage-1 biased pairs")
    if cfg.method == "ours_cam" and artifacts.snapshot is None:
        raise ValueError("ours_cam needs the stage-1 snapshot; call build_snapshot first")

    params = artifacts.clone_params()
    work = manifest
    category_map = None
    if cfg.method in TRANSFORM_METHODS:
        work = transform_dataset(
            manifest, cfg.method, pair_tuples, cfg.remove_labels_globally
        )
    if cfg.method == "split_biased":
        category_map = split_biased_map(pair_tuples, len(manifest.categories))
        extra_rng = np.random.default_rng(artifacts.seeds["extra"])
        extra = extra_rng.uniform(
            -1.0, 1.0, size=(params.d, len(pair_tuples))
        ) / np.sqrt(params.d)
        params = mdl.ModelParams(
            params.mixer,
            np.concatenate([params.head, extra], axis=1),
            params.own_rows,
            params.context_rows,
        )

    feats, labels = data.load_arrays(work)
    ids = [s.id for s in work.samples]
    n = len(ids)
    half = params.d // 2

    alpha_table = artifacts.alpha_table
    buffer = None
    excl_all = None
    weights_all = None
    penalty_all = None
    if cfg.method == "ours_feature_split":
        if alpha_table is None:
            alpha_table = losses.build_alpha_table(labels, pair_tuples, cfg.alpha_min)
        buffer = losses.RunningMeanBuffer(width=half)
        excl_all = losses.exclusive_mask(labels, pair_tuples)
        weights_all = losses.alpha_vector(labels, alpha_table)
    elif cfg.method == "weighted_loss":
        excl_all = losses.exclusive_mask(labels, pair_tuples)
        weights_all = np.where(excl_all, float(cfg.weighted_factor), 1.0)
    elif cfg.method == "negative_penalty":
        penalty_all = np.ones((n, len(work.categories)))
        for b, c in pair_tuples:
            rows = (labels[:, b] == 1) & (labels[:, c] == 0)
            penalty_all[rows, c] = float(cfg.negative_penalty_weight)

    shuffle_rng = np.random.default_rng(artifacts.seeds["shuffle2"])
    curve = list(artifacts.loss_curve)
    step_log = list(artifacts.step_log)
    snapshot = artifacts.snapshot

    for epoch in range(cfg.stage2_epochs):
        lr = cfg.sgd_stage2.lr_at(epoch)
        order = shuffle_rng.permutation(n)
        batch_losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            t = labels[idx]
            trace = mdl.forward_batch(params, feats[idx], work.h, work.w)
            entry = {"stage": 2, "epoch": epoch, "lr": lr, "method": cfg.method}

            if cfg.method == "ours_cam":
                root = _cam_objective(
                    params, trace, t, idx, feats, ids, pair_tuples, snapshot, cfg
                )
            elif cfg.method == "ours_feature_split":
                mask = excl_all[idx]
                logits = losses.suppressed_logits(params, trace, mask, buffer)
                root = losses.weighted_bce_batch(logits, t, weights_all[idx])
                entry["n_exclusive"] = int(mask.sum())
                entry["all_exclusive"] = bool(mask.all())
                entry["max_weight"] = float(weights_all[idx].max())
            elif cfg.method == "weighted_loss":
                root = losses.weighted_bce_batch(trace.logits, t, weights_all[idx])
                entry["n_exclusive"] = int(excl_all[idx].sum())
                entry["max_weight"] = float(weights_all[idx].max())
            elif cfg.method == "negative_penalty":
                root = losses.elementwise_weighted_bce(trace.logits, t, penalty_all[idx])
                entry["max_weight"] = float(penalty_all[idx].max())
            else:  # standard objective, possibly on a transformed dataset
                root = losses.bce(trace.logits, t)

            gmap = dc.eval_backward(root)
            ctx_before = params.head[params.context_rows]
            params = _apply_step(params, trace, gmap, lr)
            entry["loss"] = float(root.value)
            if cfg.method == "ours_feature_split":
                entry["ctx_rows_delta"] = float(
                    np.linalg.norm(params.head[params.context_rows] - ctx_before)
                )
                plain = ~excl_all[idx]
                if plain.any():
                    losses.update_running_mean(
                        buffer, trace.pooled_ctx.value[plain].mean(axis=0)
                    )
            batch_losses.append(entry["loss"])
            step_log.append(entry)
        curve.append(float(np.mean(batch_losses)))

    return TrainArtifacts(
        params=params,
        pairs=artifacts.pairs,
        snapshot=snapshot,
        alpha_table=alpha_table,
        buffer=buffer,
        loss_curve=curve,
        step_log=step_log,
        seeds=artifacts.seeds,
        category_map=category_map,
    )


def _cam_objective(params, trace, t, idx, feats, ids, pair_tuples, snapshot, cfg):
    root = losses.bce(trace.logits, t)
    overlap_parts, ground_parts = [], []
    for b, c in pair_tuples:
        local = np.flatnonzero((t[:, b] == 1) & (t[:, c] == 1))
        if local.size == 0:
            continue
        if cfg.lambda1 > 0:
            overlap_parts.append(
                losses.cam_overlap_terms(
                    params, trace, b, c, local, normalized=cfg.normalize_maps
                )
            )
        if cfg.lambda2 > 0:
            pre_b = np.concatenate(
                [
                    snapshot.rows(ids[g], feats[g], b, normalized=cfg.normalize_maps)
                    for g in idx[local]
                ]
            )
            pre_c = np.concatenate(
                [
                    snapshot.rows(ids[g], feats[g], c, normalized=cfg.normalize_maps)
                    for g in idx[local]
                ]
            )
            ground_parts.append(
                losses.cam_ground_terms(
                    params, trace, b, c, local, pre_b, pre_c,
                    normalized=cfg.normalize_maps,
                )
            )
    if overlap_parts:
        root = dc.add(
            root, dc.scale(dc.mean_all(dc.concat(overlap_parts, axis=0)), cfg.lambda1)
        )
    if ground_parts:
        root = dc.add(
            root, dc.scale(dc.mean_all(dc.concat(ground_parts, axis=0)), cfg.lambda2)
        )
    return root


def run_training(manifest: data.DatasetManifest, cfg: TrainConfig) -> TrainArtifacts:
    """Both stages end to end, building whatever the method needs in between."""
    artifacts = train_stage1(manifest, cfg)
    if cfg.method == "ours_cam" and artifacts.snapshot is None and artifacts.pairs.pairs:
        artifacts.build_snapshot()
    return train_stage2(artifacts, manifest, cfg)
