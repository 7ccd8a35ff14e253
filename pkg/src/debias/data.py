"""Synthetic biased multi-label datasets, tensor stores, and manifests.

A dataset is a JSON manifest plus a flat binary tensor store. Each sample is
an H x W x D_in feature map (a planted rectangular region per present
category times that category's channel signature, plus Gaussian noise) and a
binary label vector. Co-occurrence skew is planted explicitly: each
(biased, context) pair gets `cooccur_count` samples labeled with both and
`exclusive_count` labeled with the biased category alone, so the skew is
countable after the fact.

Store format: 4-byte magic ``DBL1`` then raw little-endian float32 values,
row-major. Compute happens in float64; the in-memory values are the exact
widening of what is on disk.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, replace

import numpy as np

STORE_MAGIC = b"DBL1"
F32 = np.dtype("<f4")


# ---------------------------------------------------------------------------
# tensor store


class StoreWriter:
    """Appends float64 arrays to a store file as little-endian float32."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "wb")
        self._fh.write(STORE_MAGIC)
        self._pos = len(STORE_MAGIC)

    def append(self, arr) -> int:
        offset = self._pos
        raw = np.ascontiguousarray(arr, dtype=F32).tobytes()
        self._fh.write(raw)
        self._pos += len(raw)
        return offset

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_tensor(path, offset: int, shape) -> np.ndarray:
    """Read one tensor, widened to float64."""
    count = int(np.prod(shape))
    with open(path, "rb") as fh:
        magic = fh.read(len(STORE_MAGIC))
        if magic != STORE_MAGIC:
            raise ValueError(f"{path}: bad store magic {magic!r}")
        fh.seek(offset)
        raw = fh.read(count * F32.itemsize)
    if len(raw) != count * F32.itemsize:
        raise ValueError(f"{path}: truncated read at offset {offset}")
    return np.frombuffer(raw, dtype=F32).astype(np.float64).reshape(shape)


def write_store(path, arrays) -> list:
    with StoreWriter(path) as w:
        return [w.append(a) for a in arrays]


# ---------------------------------------------------------------------------
# manifest types


@dataclass
class SampleRef:
    id: str
    offset: int  # byte offset into the store, -1 when maps are absent
    labels: list


@dataclass
class DatasetManifest:
    categories: list
    h: int
    w: int
    d_in: int
    samples: list
    generator_config: dict | None = None
    split_tag: str = "train"
    store: str | None = None  # store filename, relative to the manifest dir
    root: str | None = None  # directory of the manifest file, never serialized

    def store_path(self):
        if self.store is None:
            raise ValueError("manifest has no tensor store")
        return os.path.join(self.root or ".", self.store)

    def label_matrix(self) -> np.ndarray:
        return np.array([s.labels for s in self.samples], dtype=np.int64)

    def to_dict(self) -> dict:
        return {
            "categories": list(self.categories),
            "h": self.h,
            "w": self.w,
            "d_in": self.d_in,
            "samples": [
                {"id": s.id, "offset": s.offset, "labels": list(map(int, s.labels))}
                for s in self.samples
            ],
            "generator_config": self.generator_config,
            "split_tag": self.split_tag,
            "store": self.store,
        }

    @classmethod
    def from_dict(cls, d: dict, root=None) -> "DatasetManifest":
        samples = [SampleRef(s["id"], s["offset"], s["labels"]) for s in d["samples"]]
        return cls(
            categories=d["categories"],
            h=d["h"],
            w=d["w"],
            d_in=d["d_in"],
            samples=samples,
            generator_config=d.get("generator_config"),
            split_tag=d.get("split_tag", "train"),
            store=d.get("store"),
            root=root,
        )


def dump_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def save_manifest(manifest: DatasetManifest, path):
    _check_manifest(manifest)
    dump_json(manifest.to_dict(), path)


def load_manifest(path) -> DatasetManifest:
    with open(path, "r", encoding="utf-8") as fh:
        d = json.load(fh)
    m = DatasetManifest.from_dict(d, root=os.path.dirname(os.path.abspath(path)))
    _check_manifest(m)
    return m


def _check_manifest(m: DatasetManifest):
    ids = [s.id for s in m.samples]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate sample ids in manifest")
    n_cat = len(m.categories)
    for s in m.samples:
        if len(s.labels) != n_cat:
            raise ValueError(f"sample {s.id}: {len(s.labels)} labels, expected {n_cat}")


def load_arrays(manifest: DatasetManifest):
    """All feature maps as (N, H*W, D_in) float64 plus the (N, M) label matrix."""
    path = manifest.store_path()
    p = manifest.h * manifest.w
    feats = np.empty((len(manifest.samples), p, manifest.d_in), dtype=np.float64)
    for i, s in enumerate(manifest.samples):
        feats[i] = read_tensor(path, s.offset, (p, manifest.d_in))
    return feats, manifest.label_matrix()


# ---------------------------------------------------------------------------
# generator config


@dataclass(frozen=True)
class PlantedPair:
    biased: int
    context: int
    exclusive_fraction: float
    cooccur_count: int
    exclusive_count: int


@dataclass
class GenConfig:
    m: int
    h: int
    w: int
    d_in: int
    planted_pairs: list
    regions: list  # per category: (r0, c0, r1, c1), half-open
    signatures: list  # per category: unit-norm vector of length d_in
    noise_std: float
    seed: int
    n_filler: int = 0
    filler_max_labels: int = 3
    # categories filler samples may draw labels from; None = every category
    # that is not the biased member of a planted pair. Restricting the pool
    # to categories outside all pairs keeps context categories from ever
    # appearing alone, which is what makes the planted shortcut attractive.
    filler_pool: list | None = None

    def to_dict(self) -> dict:
        return {
            "m": self.m,
            "h": self.h,
            "w": self.w,
            "d_in": self.d_in,
            "planted_pairs": [
                {
                    "biased": p.biased,
                    "context": p.context,
                    "exclusive_fraction": p.exclusive_fraction,
                    "cooccur_count": p.cooccur_count,
                    "exclusive_count": p.exclusive_count,
                }
                for p in self.planted_pairs
            ],
            "regions": [list(map(int, r)) for r in self.regions],
            "signatures": [[float(v) for v in s] for s in self.signatures],
            "noise_std": self.noise_std,
            "seed": self.seed,
            "n_filler": self.n_filler,
            "filler_max_labels": self.filler_max_labels,
            "filler_pool": None
            if self.filler_pool is None
            else [int(k) for k in self.filler_pool],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        pairs = [
            PlantedPair(
                p["biased"],
                p["context"],
                p["exclusive_fraction"],
                p["cooccur_count"],
                p["exclusive_count"],
            )
            for p in d["planted_pairs"]
        ]
        return cls(
            m=d["m"],
            h=d["h"],
            w=d["w"],
            d_in=d["d_in"],
            planted_pairs=pairs,
            regions=[tuple(r) for r in d["regions"]],
            signatures=d["signatures"],
            noise_std=d["noise_std"],
            seed=d["seed"],
            n_filler=d.get("n_filler", 0),
            filler_max_labels=d.get("filler_max_labels", 3),
            filler_pool=d.get("filler_pool"),
        )


def _check_config(cfg: GenConfig):
    if len(cfg.regions) != cfg.m or len(cfg.signatures) != cfg.m:
        raise ValueError("need one region and one signature per category")
    for k, (r0, c0, r1, c1) in enumerate(cfg.regions):
        if not (0 <= r0 < r1 <= cfg.h and 0 <= c0 < c1 <= cfg.w):
            raise ValueError(f"category {k}: region {(r0, c0, r1, c1)} out of bounds")
    for s in cfg.signatures:
        if len(s) != cfg.d_in:
            raise ValueError("signature length must equal d_in")
    biased_seen = set()
    for p in cfg.planted_pairs:
        if p.biased == p.context:
            raise ValueError("planted pair must use two distinct categories")
        if not (0 <= p.biased < cfg.m and 0 <= p.context < cfg.m):
            raise ValueError("planted pair category out of range")
        if p.biased in biased_seen:
            raise ValueError("a category may be the biased member of one pair only")
        biased_seen.add(p.biased)
        if p.cooccur_count < 1 or p.exclusive_count < 1:
            raise ValueError("planted pair needs at least one sample of each kind")
        if not 0.0 < p.exclusive_fraction < 1.0:
            raise ValueError("exclusive_fraction must be in (0, 1)")
        if _rects_overlap(cfg.regions[p.biased], cfg.regions[p.context]):
            raise ValueError("planted pair regions must be disjoint")
    if cfg.noise_std < 0:
        raise ValueError("noise_std must be nonnegative")
    if cfg.filler_pool is not None:
        pool = set(cfg.filler_pool)
        if not all(0 <= k < cfg.m for k in pool):
            raise ValueError("filler_pool category out of range")
        if pool & biased_seen:
            # filler adding biased labels would falsify the planted skew counts
            raise ValueError("filler_pool may not contain a biased category")


def _rects_overlap(a, b) -> bool:
    ar0, ac0, ar1, ac1 = a
    br0, bc0, br1, bc1 = b
    return ar0 < br1 and br0 < ar1 and ac0 < bc1 and bc0 < ac1


def build_layout(m, h, w, d_in, seed):
    """Disjoint per-category regions plus unit-norm channel signatures.

    The grid is cut into m equal blocks (largest, squarest blocks that fit)
    and every category fills one whole block. Equal evidence per category
    keeps the planted pairs symmetric in signal strength; the co-occurrence
    skew alone is what creates the bias.
    """
    best = None
    for nr in range(1, h + 1):
        for nc in range(1, w + 1):
            if nr * nc < m:
                continue
            bh, bw = h // nr, w // nc
            if bh < 1 or bw < 2:
                continue
            score = (bh * bw, -abs(bh - bw), -(nr * nc))
            if best is None or score > best[:3]:
                best = (*score, nr, nc)
    if best is None:
        raise ValueError(f"no block layout fits {m} categories on {h}x{w}")
    _, _, _, nr, nc = best
    bh, bw = h // nr, w // nc
    rng = np.random.default_rng(seed)
    chosen = rng.choice(nr * nc, size=m, replace=False)
    regions = []
    for t in chosen:
        r0, c0 = int(bh * (t // nc)), int(bw * (t % nc))
        regions.append((r0, c0, r0 + bh, c0 + bw))
    sigs = rng.normal(size=(m, d_in))
    sigs /= np.linalg.norm(sigs, axis=1, keepdims=True)
    return regions, [list(map(float, s)) for s in sigs]


# ---------------------------------------------------------------------------
# generation


def generate_dataset(cfg: GenConfig, out_dir, split_tag="train") -> DatasetManifest:
    """Write `<split_tag>.store` and `<split_tag>.manifest.json` under out_dir.

    Deterministic: identical cfg (seed included) gives byte-identical files.
    """
    _check_config(cfg)
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)

    # label plan first, then per-sample noise, so rng consumption is fixed
    label_sets = []
    for p in cfg.planted_pairs:
        label_sets += [{p.biased, p.context}] * p.cooccur_count
        label_sets += [{p.biased}] * p.exclusive_count
    if cfg.filler_pool is not None:
        allowed = sorted(set(cfg.filler_pool))
    else:
        blocked = {p.biased for p in cfg.planted_pairs}
        allowed = [k for k in range(cfg.m) if k not in blocked]
    if cfg.n_filler > 0 and not allowed:
        raise ValueError("filler samples need at least one non-biased category")
    for _ in range(cfg.n_filler):
        count = int(rng.integers(1, min(cfg.filler_max_labels, len(allowed)) + 1))
        label_sets.append(set(rng.choice(allowed, size=count, replace=False).tolist()))

    sigs = np.array(cfg.signatures, dtype=np.float64)
    store_name = f"{split_tag}.store"
    samples = []
    with StoreWriter(os.path.join(out_dir, store_name)) as store:
        for i, present in enumerate(label_sets):
            fmap = np.zeros((cfg.h, cfg.w, cfg.d_in), dtype=np.float64)
            for k in sorted(present):
                r0, c0, r1, c1 = cfg.regions[k]
                fmap[r0:r1, c0:c1, :] += sigs[k]
            if cfg.noise_std > 0:
                fmap += rng.normal(0.0, cfg.noise_std, size=fmap.shape)
            offset = store.append(fmap)
            labels = [1 if k in present else 0 for k in range(cfg.m)]
            samples.append(SampleRef(f"s{i:06d}", offset, labels))

    manifest = DatasetManifest(
        categories=[f"cat{k}" for k in range(cfg.m)],
        h=cfg.h,
        w=cfg.w,
        d_in=cfg.d_in,
        samples=samples,
        generator_config=cfg.to_dict(),
        split_tag=split_tag,
        store=store_name,
        root=os.path.abspath(out_dir),
    )
    save_manifest(manifest, os.path.join(out_dir, f"{split_tag}.manifest.json"))
    return manifest


# benchmark defaults: 8 categories, two planted pairs, 2000 train samples
BENCH_M = 8
BENCH_H = 8
BENCH_W = 8
BENCH_D_IN = 32
BENCH_PAIRS = ((0, 1), (2, 3))
BENCH_PER_PAIR = 500
BENCH_FILLER = 1000
BENCH_NOISE = 0.25
BENCH_TEST_EXCL = 200
BENCH_TEST_CO = 200
BENCH_TEST_FILLER = 400


def benchmark_configs(exclusive_fraction, layout_seed, train_seed, test_seed):
    """Paired train/test GenConfigs sharing one spatial layout.

    Train skew follows `exclusive_fraction` with the total per-pair sample
    count held fixed; the test set is balanced so both evaluation splits have
    equal support. Train filler draws only from categories outside every
    planted pair, so a context category never appears without its partner at
    train time and the co-occurrence shortcut stays attractive; test filler
    keeps context categories in the pool, which puts context-without-subject
    negatives in the ranking pool exactly where the shortcut misfires.
    """
    regions, sigs = build_layout(BENCH_M, BENCH_H, BENCH_W, BENCH_D_IN, layout_seed)
    excl = round(exclusive_fraction * BENCH_PER_PAIR)
    if not 0 < excl < BENCH_PER_PAIR:
        raise ValueError("exclusive_fraction leaves an empty split")
    train_pairs = [
        PlantedPair(b, c, exclusive_fraction, BENCH_PER_PAIR - excl, excl)
        for b, c in BENCH_PAIRS
    ]
    test_pairs = [
        PlantedPair(b, c, 0.5, BENCH_TEST_CO, BENCH_TEST_EXCL) for b, c in BENCH_PAIRS
    ]
    common = dict(
        m=BENCH_M,
        h=BENCH_H,
        w=BENCH_W,
        d_in=BENCH_D_IN,
        regions=regions,
        signatures=sigs,
        noise_std=BENCH_NOISE,
    )
    paired = {k for bc in BENCH_PAIRS for k in bc}
    train = GenConfig(
        planted_pairs=train_pairs,
        seed=train_seed,
        n_filler=BENCH_FILLER,
        filler_pool=[k for k in range(BENCH_M) if k not in paired],
        **common,
    )
    test = GenConfig(
        planted_pairs=test_pairs, seed=test_seed, n_filler=BENCH_TEST_FILLER, **common
    )
    return train, test


# ---------------------------------------------------------------------------
# statistics and splits


@dataclass
class CooccurrenceTable:
    counts: np.ndarray  # (M, M) symmetric, diagonal = marginals
    marginals: np.ndarray

    def exclusive(self, b, z) -> int:
        """|samples with b but not z|"""
        return int(self.marginals[b] - self.counts[b, z])


def cooccurrence_table(manifest: DatasetManifest) -> CooccurrenceTable:
    if not manifest.samples:
        raise ValueError("empty manifest")
    labels = manifest.label_matrix()
    counts = labels.T @ labels
    return CooccurrenceTable(counts=counts, marginals=counts.diagonal().copy())


def split_80_20(manifest: DatasetManifest, seed):
    """Disjoint 80/20 partition, uniform random, deterministic per seed."""
    n = len(manifest.samples)
    if n < 5:
        raise ValueError("need at least 5 samples to split")
    perm = np.random.default_rng(seed).permutation(n)
    cut = int(0.8 * n)
    big_idx = np.sort(perm[:cut])
    small_idx = np.sort(perm[cut:])

    def subset(idx, tag):
        return replace(
            manifest,
            samples=[manifest.samples[i] for i in idx],
            split_tag=tag,
            generator_config=manifest.generator_config,
        )

    return subset(big_idx, "train"), subset(small_idx, "val")


# ---------------------------------------------------------------------------
# external annotation files


def _read_csv_matrix(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        if len(header) < 2 or header[0] != "id":
            raise ValueError(f"{path}: header must be id,<cat1>,...")
        cats = header[1:]
        ids, rows = [], []
        for ln, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValueError(f"{path}: line {ln}: {len(row)} fields, expected {len(header)}")
            ids.append(row[0])
            try:
                rows.append([float(v) for v in row[1:]])
            except ValueError:
                raise ValueError(f"{path}: line {ln}: non-numeric value") from None
    return cats, ids, np.array(rows, dtype=np.float64).reshape(-1, len(cats))


def ingest_annotations(labels_path, predictions_path=None):
    """Parse annotation (and optional prediction) CSVs.

    Returns a manifest without feature maps plus the prediction matrix
    aligned to the manifest's sample order (or None).
    """
    cats, ids, mat = _read_csv_matrix(labels_path)
    binary = (mat == 0.0) | (mat == 1.0)
    if not binary.all():
        bad = np.argwhere(~binary)[0]
        raise ValueError(f"{labels_path}: label row {ids[bad[0]]!r} is not 0/1")
    samples = [
        SampleRef(i, -1, [int(v) for v in row]) for i, row in zip(ids, mat)
    ]
    manifest = DatasetManifest(
        categories=cats, h=0, w=0, d_in=0, samples=samples, split_tag="val"
    )
    _check_manifest(manifest)

    preds = None
    if predictions_path is not None:
        pcats, pids, pmat = _read_csv_matrix(predictions_path)
        if pcats != cats:
            raise ValueError("prediction categories do not match annotation categories")
        if np.any(pmat < 0.0) or np.any(pmat > 1.0):
            raise ValueError("prediction values must lie in [0, 1]")
        by_id = {i: k for k, i in enumerate(pids)}
        try:
            order = [by_id[s.id] for s in samples]
        except KeyError as e:
            raise ValueError(f"prediction file missing id {e.args[0]!r}") from None
        preds = pmat[order]
    return manifest, preds
