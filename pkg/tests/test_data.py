import gzip

import numpy as np
import pytest

from fedsim import data
from fedsim.data import IdxFormatError


def linear_probe(train_x, train_y, test_x, test_y, n_classes, steps=400, lr=0.5):
    """Test-local multinomial logistic regression (full-batch GD)."""
    x = train_x.reshape(len(train_x), -1).astype(np.float64)
    w = np.zeros((n_classes, x.shape[1]))
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[train_y]
    for _ in range(steps):
        z = x @ w.T + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / len(x)
        w -= lr * g.T @ x
        b -= lr * g.sum(axis=0)
    tx = test_x.reshape(len(test_x), -1)
    pred = (tx @ w.T + b).argmax(axis=1)
    return (pred == test_y).mean()


# ---------------------------------------------------------------------------
# IDX


def write_fixture(tmp_path, compress=False):
    imgs = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4)
    labs = np.array([7, 1], np.uint8)
    ip, lp = tmp_path / "imgs.idx", tmp_path / "labs.idx"
    data.write_idx(imgs, labs, ip, lp, compress=compress)
    return imgs, labs, ip, lp


@pytest.mark.parametrize("compress", [False, True])
def test_idx_roundtrip_exact(tmp_path, compress):
    imgs, labs, ip, lp = write_fixture(tmp_path, compress)
    ds = data.load_idx(ip, lp)
    assert ds.images.shape == (2, 1, 3, 4)
    assert np.array_equal(ds.images[:, 0], imgs.astype(np.float32) / 255.0)
    assert np.array_equal(ds.labels, labs.astype(np.int64))


def test_idx_rejects_image_magic_on_labels(tmp_path):
    imgs, labs, ip, lp = write_fixture(tmp_path)
    with pytest.raises(IdxFormatError, match="magic"):
        data.load_idx(ip, ip)  # labels path points at an images file


def test_idx_rejects_truncation(tmp_path):
    imgs, labs, ip, lp = write_fixture(tmp_path)
    blob = ip.read_bytes()
    ip.write_bytes(blob[:-3])
    with pytest.raises(IdxFormatError, match="bytes"):
        data.load_idx(ip, lp)


def test_idx_rejects_count_mismatch(tmp_path):
    imgs, labs, ip, lp = write_fixture(tmp_path)
    data.write_idx(np.zeros((3, 3, 4), np.uint8), np.array([1, 2, 3], np.uint8),
                   tmp_path / "i3.idx", tmp_path / "l3.idx")
    with pytest.raises(IdxFormatError, match="labels"):
        data.load_idx(ip, tmp_path / "l3.idx")


def test_idx_gzip_sniffing(tmp_path):
    imgs, labs, ip, lp = write_fixture(tmp_path, compress=True)
    assert ip.read_bytes()[:2] == b"\x1f\x8b"
    ds = data.load_idx(ip, lp)
    assert len(ds) == 2


# ---------------------------------------------------------------------------
# partitions


def assert_disjoint_cover(parts, n):
    allidx = np.concatenate(parts)
    assert len(allidx) == len(set(allidx.tolist())), "overlapping partitions"
    assert set(allidx.tolist()) == set(range(n)), "partition does not cover dataset"


def test_dirichlet_disjoint_cover_and_determinism():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 10, 2000)
    a = data.dirichlet_partition(labels, 10, alpha=0.2, seed=1)
    b = data.dirichlet_partition(labels, 10, alpha=0.2, seed=1)
    assert_disjoint_cover(a, 2000)
    assert all(len(p) > 0 for p in a)
    for pa, pb in zip(a, b):
        assert np.array_equal(pa, pb)


def test_dirichlet_huge_alpha_approaches_uniform():
    labels = np.tile(np.arange(10), 500)  # balanced, 5000 samples
    parts = data.dirichlet_partition(labels, 10, alpha=1e6, seed=0)
    global_hist = np.bincount(labels, minlength=10) / len(labels)
    for p in parts:
        hist = np.bincount(labels[p], minlength=10) / len(p)
        assert np.abs(hist - global_hist).max() < 0.05


def test_dirichlet_tiny_alpha_concentrates():
    labels = np.tile(np.arange(10), 200)
    for seed in range(5):
        parts = data.dirichlet_partition(labels, 10, alpha=0.01, seed=seed)
        top = max(
            np.bincount(labels[p], minlength=10).max() / len(p) for p in parts
        )
        assert top >= 0.8, f"seed {seed}: max single-class mass {top:.2f}"


def test_dirichlet_repairs_empty_clients():
    labels = np.zeros(12, np.int64)
    parts = data.dirichlet_partition(labels, 10, alpha=0.05, seed=3)
    assert all(len(p) > 0 for p in parts)
    assert_disjoint_cover(parts, 12)


def test_dirichlet_rejects_bad_args():
    with pytest.raises(ValueError):
        data.dirichlet_partition(np.zeros(5, np.int64), 10, alpha=0.2, seed=0)
    with pytest.raises(ValueError):
        data.dirichlet_partition(np.zeros(50, np.int64), 5, alpha=0.0, seed=0)


def test_iid_equal_sizes():
    labels = np.tile(np.arange(10), 10)
    parts = data.iid_partition(labels, 10, seed=0)
    assert [len(p) for p in parts] == [10] * 10
    assert_disjoint_cover(parts, 100)


def test_iid_remainder_rule():
    labels = np.zeros(101, np.int64)
    parts = data.iid_partition(labels, 10, seed=4)
    assert sorted(len(p) for p in parts) == [10] * 9 + [11]


def test_iid_class_histograms_within_one():
    labels = np.tile(np.arange(5), 40)  # 200 samples, 40 per class
    parts = data.iid_partition(labels, 8, seed=2)
    for c in range(5):
        counts = [int((labels[p] == c).sum()) for p in parts]
        assert max(counts) - min(counts) <= 1


# ---------------------------------------------------------------------------
# synthetic datasets


def test_synthetic_gaussian_separable_at_low_spread():
    ds = data.synthetic_gaussian(2, 8, 50, spread=0.1, seed=0)
    assert ds.images.shape == (100, 1, 8, 1)
    acc = linear_probe(ds.images, ds.labels, ds.images, ds.labels, 2)
    assert acc >= 0.99


def test_synthetic_gaussian_overlaps_at_high_spread():
    ds = data.synthetic_gaussian(2, 8, 200, spread=10.0, seed=0)
    train, test = np.arange(0, 300), np.arange(300, 400)
    acc = linear_probe(
        ds.images[train], ds.labels[train], ds.images[test], ds.labels[test], 2
    )
    assert acc <= 0.65


def test_synthetic_gaussian_deterministic_and_validated():
    a = data.synthetic_gaussian(3, 6, 10, 0.5, seed=9)
    b = data.synthetic_gaussian(3, 6, 10, 0.5, seed=9)
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.labels, b.labels)
    assert a.images.min() >= 0.0 and a.images.max() <= 1.0
    with pytest.raises(ValueError):
        data.synthetic_gaussian(2, 8, 10, spread=0.0, seed=0)
    with pytest.raises(ValueError):
        data.synthetic_gaussian(9, 4, 10, spread=1.0, seed=0)


def test_glyphs_deterministic_balanced_and_learnable():
    a = data.synthetic_glyphs(500, seed=1)
    b = data.synthetic_glyphs(500, seed=1)
    assert np.array_equal(a.images, b.images)
    assert a.images.shape == (500, 1, 28, 28)
    assert a.n_classes == 10
    counts = np.bincount(a.labels, minlength=10)
    assert counts.min() >= 45  # n % 10 keeps classes balanced
    acc = linear_probe(a.images, a.labels, a.images, a.labels, 10, steps=200, lr=0.2)
    assert acc >= 0.9


def test_write_glyph_idx_roundtrip(tmp_path):
    paths = data.write_glyph_idx(tmp_path, n_train=60, n_test=30, seed=0)
    train = data.load_idx(paths["train_images"], paths["train_labels"])
    test = data.load_idx(paths["test_images"], paths["test_labels"])
    assert len(train) == 60 and len(test) == 30
    assert train.images.shape[2:] == (28, 28)


# ---------------------------------------------------------------------------
# backdoor sample


def test_backdoor_sample_comes_from_source_class():
    ds = data.synthetic_glyphs(200, seed=0)
    img, label = data.make_backdoor_sample(ds, source_class=0, target_label=2, seed=5)
    assert label == 2
    matches = np.flatnonzero(ds.labels == 0)
    assert any(np.array_equal(img, ds.images[i]) for i in matches)


def test_backdoor_sample_rejects_same_class_and_is_deterministic():
    ds = data.synthetic_glyphs(100, seed=0)
    with pytest.raises(ValueError):
        data.make_backdoor_sample(ds, 3, 3, seed=0)
    with pytest.raises(ValueError):
        data.make_backdoor_sample(ds, 0, 99, seed=0)
    a, _ = data.make_backdoor_sample(ds, 1, 4, seed=8)
    b, _ = data.make_backdoor_sample(ds, 1, 4, seed=8)
    assert np.array_equal(a, b)


def test_backdoor_sample_empty_source_errors():
    ds = data.Dataset(np.zeros((4, 1, 2, 2), np.float32), np.zeros(4, np.int64), 3)
    with pytest.raises(ValueError, match="no samples"):
        data.make_backdoor_sample(ds, 1, 2, seed=0)
