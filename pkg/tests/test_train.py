import numpy as np
import pytest

from debias import bias as bias_mod
from debias import data, losses, train
from debias import model as mdl


def tiny_benchmark(out_dir, seed=0, co=24, ex=8, filler=16, noise=0.15):
    """4 categories on a 4x4 grid, one planted pair (0, 1), ~48 samples."""
    regions, sigs = data.build_layout(4, 4, 4, 8, seed=seed)
    cfg = data.GenConfig(
        m=4,
        h=4,
        w=4,
        d_in=8,
        planted_pairs=[data.PlantedPair(0, 1, ex / (co + ex), co, ex)],
        regions=regions,
        signatures=sigs,
        noise_std=noise,
        seed=seed + 1,
        n_filler=filler,
    )
    return data.generate_dataset(cfg, str(out_dir))


def tiny_cfg(method="standard", **over):
    base = dict(
        method=method,
        stage1_epochs=3,
        stage2_epochs=3,
        batch_size=16,
        k=1,
        freq_threshold=0.1,
        mixer_width=8,
        seed=7,
    )
    base.update(over)
    return train.TrainConfig(**base)


def pin_pair(artifacts, b=0, c=1):
    artifacts.pairs = bias_mod.BiasPairSet(
        [bias_mod.BiasPair(b, c, 5.0)], freq_threshold=0.1
    )
    return artifacts


def test_config_roundtrip():
    cfg = tiny_cfg("weighted_loss", lambda1=0.3)
    again = train.TrainConfig.from_dict(cfg.to_dict())
    assert again == cfg

    with pytest.raises(ValueError):
        train.TrainConfig(method="dropout")
    with pytest.raises(ValueError):
        train.TrainConfig(mixer_width=7)
    with pytest.raises(ValueError):
        train.TrainConfig.from_dict({"methodd": "standard"})


def test_stage1_zero_epochs_is_seeded_init(tmp_path):
    manifest = tiny_benchmark(tmp_path)
    cfg = tiny_cfg(stage1_epochs=0)
    arts = train.train_stage1(manifest, cfg)
    expected = mdl.init_params(8, cfg.mixer_width, 4, arts.seeds["init"])
    assert np.array_equal(arts.params.mixer, expected.mixer)
    assert np.array_equal(arts.params.head, expected.head)
    assert arts.loss_curve == []


def test_stage2_zero_epochs_keeps_weights(tmp_path):
    manifest = tiny_benchmark(tmp_path)
    arts = train.train_stage1(manifest, tiny_cfg())
    out = train.train_stage2(arts, manifest, tiny_cfg(stage2_epochs=0))
    assert np.array_equal(out.params.mixer, arts.params.mixer)
    assert np.array_equal(out.params.head, arts.params.head)
    assert out.params.head is not arts.params.head  # input left intact


def test_bitwise_determinism(tmp_path):
    manifest = tiny_benchmark(tmp_path)
    a = train.run_training(manifest, tiny_cfg())
    b = train.run_training(manifest, tiny_cfg())
    assert np.array_equal(a.params.mixer, b.params.mixer)
    assert np.array_equal(a.params.head, b.params.head)
    assert a.loss_curve == b.loss_curve


def test_cam_with_zero_weights_matches_standard(tmp_path):
    # the ours_cam graph must collapse to plain BCE when both weights are off
    manifest = tiny_benchmark(tmp_path)
    std = train.run_training(manifest, tiny_cfg("standard"))
    cam = train.run_training(manifest, tiny_cfg("ours_cam", lambda1=0.0, lambda2=0.0))
    assert np.array_equal(std.params.mixer, cam.params.mixer)
    assert np.array_equal(std.params.head, cam.params.head)


def test_cam_objective_moves_weights(tmp_path):
    manifest = tiny_benchmark(tmp_path)
    std = train.run_training(manifest, tiny_cfg("standard"))
    cam = train.run_training(manifest, tiny_cfg("ours_cam"))
    assert not np.array_equal(std.params.head, cam.params.head)
    assert np.isfinite(cam.params.head).all()


def test_exclusive_batches_never_touch_context_rows(tmp_path):
    # batch size 1 makes every exclusive sample an all-exclusive batch
    manifest = tiny_benchmark(tmp_path)
    arts = pin_pair(train.train_stage1(manifest, tiny_cfg()))
    out = train.train_stage2(
        arts, manifest, tiny_cfg("ours_feature_split", stage2_epochs=2, batch_size=1)
    )
    steps = [e for e in out.step_log if e["stage"] == 2]
    excl = [e for e in steps if e["all_exclusive"]]
    plain = [e for e in steps if not e["all_exclusive"]]
    assert len(excl) == 2 * 8  # 8 exclusive samples, 2 epochs
    assert all(e["ctx_rows_delta"] == 0.0 for e in excl)
    assert any(e["ctx_rows_delta"] > 0.0 for e in plain)
    # skew weight: sqrt(24/8) < 3, so the floor applies
    assert max(e["max_weight"] for e in excl) == 3.0


def test_weighted_loss_factor_applied(tmp_path):
    manifest = tiny_benchmark(tmp_path)
    arts = pin_pair(train.train_stage1(manifest, tiny_cfg()))
    out = train.train_stage2(arts, manifest, tiny_cfg("weighted_loss"))
    steps = [e for e in out.step_log if e["stage"] == 2]
    assert max(e["max_weight"] for e in steps) == 10.0
    # every epoch touches all 8 exclusive samples exactly once
    per_epoch = sum(e["n_exclusive"] for e in steps) / 3
    assert per_epoch == 8


def test_negative_penalty_weight_applied(tmp_path):
    manifest = tiny_benchmark(tmp_path)
    arts = pin_pair(train.train_stage1(manifest, tiny_cfg()))
    out = train.train_stage2(
        arts, manifest, tiny_cfg("negative_penalty", negative_penalty_weight=10.0)
    )
    assert max(e["max_weight"] for e in out.step_log if e["stage"] == 2) == 10.0


def test_stage2_requires_pairs_and_snapshot(tmp_path):
    manifest = tiny_benchmark(tmp_path)
    arts = train.train_stage1(manifest, tiny_cfg())
    arts.pairs = bias_mod.BiasPairSet([], freq_threshold=0.1, shortfall=True)
    with pytest.raises(ValueError, match="biased pairs"):
        train.train_stage2(arts, manifest, tiny_cfg("weighted_loss"))

    arts2 = pin_pair(train.train_stage1(manifest, tiny_cfg()))
    arts2.snapshot = None
    with pytest.raises(ValueError, match="snapshot"):
        train.train_stage2(arts2, manifest, tiny_cfg("ours_cam"))


# ---------------------------------------------------------------------------
# dataset transforms


def labels_manifest(rows, m=8):
    samples = [
        data.SampleRef(f"s{i:04d}", -1, list(r)) for i, r in enumerate(rows)
    ]
    return data.DatasetManifest(
        categories=[f"cat{k}" for k in range(m)],
        h=2,
        w=2,
        d_in=2,
        samples=samples,
        generator_config={},
        split_tag="train",
        store=None,
        root=None,
    )


def transform_rows(n=100, co=37, m=8):
    # co samples with {0,1}, the rest alternate between {0} and {1, 2}
    rows = []
    for i in range(n):
        r = [0] * m
        if i < co:
            r[0] = r[1] = 1
        elif i % 2 == 0:
            r[0] = 1
        else:
            r[1] = r[2] = 1
        rows.append(r)
    return rows


def test_remove_cooccur_images_drops_exact_count():
    manifest = labels_manifest(transform_rows())
    out = train.transform_dataset(manifest, "remove_cooccur_images", [(0, 1)])
    assert len(out.samples) == 63
    matrix = out.label_matrix()
    assert not np.any((matrix[:, 0] == 1) & (matrix[:, 1] == 1))


def test_remove_cooccur_labels_clears_context_only_on_biased():
    manifest = labels_manifest(transform_rows())
    out = train.transform_dataset(manifest, "remove_cooccur_labels", [(0, 1)])
    assert len(out.samples) == 100
    matrix = out.label_matrix()
    before = manifest.label_matrix()
    assert matrix.sum() == before.sum() - 37  # one label cleared per co-occur row
    # samples with the context alone keep it
    solo_c = (before[:, 0] == 0) & (before[:, 1] == 1)
    assert np.array_equal(matrix[solo_c, 1], before[solo_c, 1])


def test_remove_cooccur_labels_global_drops_emptied_samples():
    rows = [[1, 1, 0], [0, 1, 0], [0, 1, 1]]
    manifest = labels_manifest(rows, m=3)
    out = train.transform_dataset(
        manifest, "remove_cooccur_labels", [(0, 1)], remove_labels_globally=True
    )
    # context cleared everywhere; the context-only sample vanishes
    assert [s.labels for s in out.samples] == [[1, 0, 0], [0, 0, 1]]


def test_split_biased_appends_solo_categories():
    rows = transform_rows()
    manifest = labels_manifest(rows)
    pairs = [(0, 1), (2, 3)]
    out = train.transform_dataset(manifest, "split_biased", pairs)
    assert len(out.categories) == 10
    assert out.categories[8] == "cat0_solo"
    matrix = out.label_matrix()
    before = manifest.label_matrix()
    # exclusive rows moved to the solo column, co-occur rows stayed put
    excl = (before[:, 0] == 1) & (before[:, 1] == 0)
    assert np.array_equal(matrix[excl, 8], np.ones(excl.sum()))
    assert not matrix[excl, 0].any()
    both = (before[:, 0] == 1) & (before[:, 1] == 1)
    assert matrix[both, 0].all()
    assert not matrix[both, 8].any()

    with pytest.raises(ValueError, match="transform"):
        train.transform_dataset(manifest, "standard", pairs)


def test_split_biased_training_widens_head(tmp_path):
    manifest = tiny_benchmark(tmp_path)
    arts = pin_pair(train.train_stage1(manifest, tiny_cfg()))
    out = train.train_stage2(arts, manifest, tiny_cfg("split_biased"))
    assert out.params.head.shape == (8, 5)  # 4 categories + 1 solo column
    assert out.category_map == [(0, 4)]


# ---------------------------------------------------------------------------
# learning behaviour


def test_loss_decreases(tmp_path):
    manifest = tiny_benchmark(tmp_path, noise=0.1)
    out = train.run_training(manifest, tiny_cfg(stage1_epochs=6, stage2_epochs=2))
    assert out.loss_curve[-1] < out.loss_curve[0]


def test_all_methods_run(tmp_path):
    manifest = tiny_benchmark(tmp_path)
    for method in train.METHODS:
        out = train.run_training(
            manifest, tiny_cfg(method, stage1_epochs=2, stage2_epochs=1)
        )
        assert np.isfinite(out.params.mixer).all(), method
        assert np.isfinite(out.params.head).all(), method
        assert len(out.loss_curve) == 3, method


def test_cam_localizes_planted_region(tmp_path):
    # a briefly trained model should already place its strongest CAM
    # activations inside the region the category was planted in
    regions, sigs = data.build_layout(4, 8, 8, 16, seed=3)
    gen = data.GenConfig(
        m=4,
        h=8,
        w=8,
        d_in=16,
        planted_pairs=[],
        regions=regions,
        signatures=sigs,
        noise_std=0.1,
        seed=11,
        n_filler=160,
        filler_max_labels=2,
    )
    manifest = data.generate_dataset(gen, str(tmp_path))
    cfg = tiny_cfg(stage1_epochs=10, batch_size=32, mixer_width=16)
    arts = train.train_stage1(manifest, cfg)

    probe = np.zeros((8, 8, 16))
    r0, c0, r1, c1 = regions[2]
    probe[r0:r1, c0:c1, :] = np.array(sigs[2])
    cam = mdl.cam_values(arts.params, probe, category=2)
    top = cam >= np.quantile(cam, 0.75)
    planted = np.zeros((8, 8), dtype=bool)
    planted[r0:r1, c0:c1] = True
    iou = (top & planted).sum() / (top | planted).sum()
    assert iou > 0.5
