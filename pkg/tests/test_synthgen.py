from dataclasses import replace

import numpy as np
import pytest

from codaseg.synthgen import (
    IGNORE, ConfigError, DomainPairDataset, channel_stats, default_config, generate_dataset,
    parse_manifest, statistics_transfer,
)


def test_same_seed_gives_identical_bytes():
    cfg = default_config()
    a = generate_dataset(cfg, 7, 6, 6)
    b = generate_dataset(cfg, 7, 6, 6, workers=3)
    for x, y in ((a.source_images, b.source_images), (a.source_labels, b.source_labels),
                 (a.target_images, b.target_images), (a._target_eval_labels, b._target_eval_labels)):
        assert x.tobytes() == y.tobytes()
    c = generate_dataset(cfg, 8, 6, 6)
    assert c.source_images.tobytes() != a.source_images.tobytes()


def test_rare_class_pixel_shares():
    cfg = default_config(rare_classes=(6,), rare_source_frequency=0.01, rare_target_frequency=0.2)
    ds = generate_dataset(cfg, 0, 200, 200)
    src = np.mean(ds.source_labels == 6)
    tgt = np.mean(ds.target_eval_labels == 6)
    assert src < 0.03
    assert tgt > 0.10


def test_zero_shift_control():
    cfg = default_config(palette_divergence=0.0, rare_target_frequency=0.01)
    cfg = replace(cfg, small_only_domains=("source", "target"))
    ds = generate_dataset(cfg, 1, 200, 200)
    diff = np.abs(ds.source_images.mean(axis=(0, 2, 3)) - ds.target_images.mean(axis=(0, 2, 3)))
    assert np.all(diff < 0.02), diff


def _class_colour_distance(ds, c):
    means = []
    for imgs, labs in ((ds.source_images, ds.source_labels), (ds.target_images, ds.target_eval_labels)):
        m = labs == c
        means.append(np.array([imgs[:, k][m].mean() for k in range(3)]))
    return np.linalg.norm(means[0] - means[1])


def test_shift_monotonicity():
    dists = []
    for div in (0.0, 0.5, 1.0):
        ds = generate_dataset(default_config(palette_divergence=div), 2, 40, 40)
        dists.append([_class_colour_distance(ds, c) for c in range(8)])
    dists = np.array(dists)
    assert np.all(np.diff(dists, axis=0) > 0), dists


def test_every_class_covered_in_target():
    ds = generate_dataset(default_config(), 3, 10, 100)
    assert set(np.unique(ds.target_eval_labels)) == set(range(8))


def test_coverage_patch_for_tiny_split():
    ds = generate_dataset(default_config(), 4, 1, 2)
    assert set(np.unique(ds.target_eval_labels)) == set(range(8))


def test_labels_in_legal_set_and_images_in_unit_range():
    ds = generate_dataset(default_config(), 5, 5, 5)
    for lab in (ds.source_labels, ds.target_eval_labels):
        assert lab.dtype == np.uint8
        assert set(np.unique(lab)) <= set(range(8)) | {IGNORE}
    assert ds.source_images.min() >= 0 and ds.source_images.max() <= 1


def test_impossible_config_rejected():
    cfg = default_config()
    freq = dict(cfg.class_frequency)
    for d in freq:
        f = np.array(freq[d], dtype=float)
        f[3] = 0.0
        freq[d] = f / f.sum()
    with pytest.raises(ConfigError):
        generate_dataset(replace(cfg, class_frequency=freq), 0, 1, 1)
    with pytest.raises(ConfigError):
        generate_dataset(cfg, 0, 0, 1)


def test_save_load_round_trip(tmp_path):
    ds = generate_dataset(default_config(), 6, 3, 3)
    ds.save(tmp_path)
    back = DomainPairDataset.load(tmp_path)
    assert back.source_images.tobytes() == ds.source_images.tobytes()
    assert back._target_eval_labels.tobytes() == ds._target_eval_labels.tobytes()
    m = parse_manifest((tmp_path / "manifest.txt").read_text())
    for key in ("seed", "image_size", "num_classes", "n_source", "n_target", "palette_divergence",
                "class_frequencies"):
        assert key in m
    assert m["seed"] == "6" and m["image_size"] == "64,64"


def test_adaptation_view_hides_eval_labels():
    ds = generate_dataset(default_config(), 0, 2, 2)
    view = ds.adaptation_view()
    assert not any("label" in k and "target" in k for k in vars(view))
    assert ds.eval_label_reads == 0


# --- statistics transfer -------------------------------------------------------


def test_transfer_to_own_stats_is_identity():
    img = np.random.default_rng(0).uniform(0.2, 0.8, (3, 8, 8))
    mu, sd = channel_stats(img)
    np.testing.assert_allclose(statistics_transfer(img, mu, sd, clamp=False), img, atol=1e-12)


def test_transfer_constant_image_is_shifted_only():
    img = np.full((3, 4, 4), 0.3)
    out = statistics_transfer(img, [0.5] * 3, [0.1] * 3)
    np.testing.assert_allclose(out, 0.5)


def test_transfer_matches_target_stats():
    rng = np.random.default_rng(1)
    img = rng.uniform(0, 1, (3, 16, 16))
    mu_t, sd_t = np.array([0.4, 0.5, 0.6]), np.array([0.1, 0.2, 0.05])
    out = statistics_transfer(img, mu_t, sd_t, clamp=False)
    mu, sd = channel_stats(out)
    np.testing.assert_allclose(mu, mu_t, atol=1e-6)
    np.testing.assert_allclose(sd, sd_t, atol=1e-6)


def test_transfer_with_split_reference_stats():
    rng = np.random.default_rng(2)
    stack = rng.uniform(0, 1, (5, 3, 8, 8))
    mu_s, sd_s = channel_stats(stack)
    out = np.stack([statistics_transfer(x, [0.5] * 3, [0.1] * 3, clamp=False, source_mean=mu_s, source_std=sd_s)
                    for x in stack])
    mu, sd = channel_stats(out)
    np.testing.assert_allclose(mu, 0.5, atol=1e-9)
    np.testing.assert_allclose(sd, 0.1, atol=1e-9)


def test_transfer_rejects_bad_stats():
    with pytest.raises(ValueError):
        statistics_transfer(np.zeros((3, 2, 2)), [0.5] * 3, [0.0, 0.1, 0.1])
