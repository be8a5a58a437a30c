import gzip
import struct

import numpy as np
import pytest

from dynloss import data as D


def _write_pair(tmp_path, images, labels, gz=False):
    suffix = ".gz" if gz else ""
    ip, lp = tmp_path / f"img{suffix}", tmp_path / f"lab{suffix}"
    D.write_idx(ip, images)
    D.write_idx(lp, labels)
    return ip, lp


@pytest.mark.parametrize("gz", [False, True])
def test_idx_round_trip(tmp_path, rng, gz):
    images = rng.integers(0, 256, (7, 4, 5), dtype=np.uint8)
    labels = np.array([0, 1, 2, 1, 0, 2, 1], dtype=np.uint8)
    ip, lp = _write_pair(tmp_path, images, labels, gz)
    np.testing.assert_array_equal(D.read_idx(ip, D.IMAGE_MAGIC), images)
    ds = D.load_mnist_idx(ip, lp)
    assert ds.features.shape == (7, 20) and ds.n_classes == 10
    np.testing.assert_array_equal(ds.features, images.reshape(7, -1) / 255.0)
    if gz:
        assert ip.read_bytes()[:2] == b"\x1f\x8b"


def test_header_layout(tmp_path):
    D.write_idx(tmp_path / "a", np.zeros((2, 3), dtype=np.uint8))
    raw = (tmp_path / "a").read_bytes()
    assert struct.unpack(">III", raw[:12]) == (0x802, 2, 3) and len(raw) == 18


def test_bad_magic_truncation_and_count_mismatch(tmp_path, rng):
    images = rng.integers(0, 256, (3, 2, 2), dtype=np.uint8)
    ip, lp = _write_pair(tmp_path, images, np.array([0, 1, 0], dtype=np.uint8))
    with pytest.raises(D.IdxFormatError, match="magic"):
        D.load_mnist_idx(lp, lp)
    raw = ip.read_bytes()
    (tmp_path / "short").write_bytes(raw[:-1])
    with pytest.raises(D.IdxFormatError):
        D.read_idx(tmp_path / "short", D.IMAGE_MAGIC)
    (tmp_path / "hdr").write_bytes(raw[:6])
    with pytest.raises(D.IdxFormatError):
        D.read_idx(tmp_path / "hdr", D.IMAGE_MAGIC)
    D.write_idx(tmp_path / "lab2", np.array([0, 1], dtype=np.uint8))
    with pytest.raises(D.IdxFormatError):
        D.load_mnist_idx(ip, tmp_path / "lab2")


def test_class_filter_renumbers(tmp_path, rng):
    images = rng.integers(0, 256, (6, 2, 2), dtype=np.uint8)
    ip, lp = _write_pair(tmp_path, images, np.array([3, 7, 1, 7, 3, 5], dtype=np.uint8))
    ds = D.load_mnist_idx(ip, lp, classes=(7, 3))
    assert ds.n_classes == 2 and ds.labels.tolist() == [0, 1, 1, 0]
    np.testing.assert_array_equal(ds.features, images[[0, 1, 3, 4]].reshape(4, -1) / 255.0)


def test_bundled_mnist_subset(mnist_dir):
    train = D.load_mnist_dir(mnist_dir, "train", classes=(0, 1))
    test = D.load_mnist_dir(mnist_dir, "test", classes=(0, 1))
    assert (len(train), len(test)) == (800, 200)
    assert train.input_dim == 784 and set(np.unique(train.labels)) == {0, 1}
    assert 0.0 <= train.features.min() and train.features.max() <= 1.0
    assert np.bincount(test.labels).tolist() == [100, 100]


def test_loaded_subset_round_trips(tmp_path, mnist_dir):
    test = D.load_mnist_dir(mnist_dir, "test", classes=(0, 1)).subset(np.arange(30))
    images = np.rint(test.features * 255).astype(np.uint8).reshape(-1, 28, 28)
    ip, lp = _write_pair(tmp_path, images, test.labels.astype(np.uint8), gz=True)
    again = D.load_mnist_idx(ip, lp, classes=(0, 1))
    np.testing.assert_array_equal(again.features, test.features)
    np.testing.assert_array_equal(again.labels, test.labels)


def test_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        D.load_mnist_dir(tmp_path)


# -- synthetic -------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["moons", "blobs"])
def test_synthetic_is_seeded(kind):
    a, b = D.make_synthetic(kind, 50, 0.2, seed=3), D.make_synthetic(kind, 50, 0.2, seed=3)
    assert a.features.tobytes() == b.features.tobytes() and a.labels.tobytes() == b.labels.tobytes()
    c = D.make_synthetic(kind, 50, 0.2, seed=4)
    assert c.features.tobytes() != a.features.tobytes()
    assert a.features.min() >= 0.0 and a.features.max() <= 1.0
    assert a.provenance == f"synthetic-{kind}"


def test_noiseless_blobs_are_separable_by_a_fixed_line():
    ds = D.make_synthetic("blobs", 40, noise=0.0, seed=0, n_classes=2)
    # centres sit at opposite ends of the x0 axis, so x0 = 0.5 splits them
    pred = (ds.features[:, 0] < 0.5).astype(int)
    assert np.mean(pred == ds.labels) == 1.0


def test_two_points_one_per_class():
    for kind in ("moons", "blobs"):
        assert sorted(D.make_synthetic(kind, 2, seed=1).labels.tolist()) == [0, 1]


def test_synthetic_errors():
    with pytest.raises(ValueError):
        D.make_synthetic("spirals", 10)
    with pytest.raises(ValueError):
        D.make_synthetic("moons", 1)
    with pytest.raises(ValueError):
        D.make_synthetic("moons", 10, noise=-1.0)


def test_csv_dump(tmp_path):
    ds = D.make_synthetic("moons", 5, seed=0)
    D.write_csv(tmp_path / "m.csv", ds)
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "x0,x1,label" and len(lines) == 6
    assert float(lines[1].split(",")[0]) == ds.features[0, 0]


# -- split protocol --------------------------------------------------------------


def test_half_split_of_hundred():
    train, val, nxt = D.redivide(100, D.SplitState(seed=0, val_ratio=0.5))
    assert len(train) == len(val) == 50 and nxt.epoch == 1


def test_split_is_a_partition_that_changes_each_epoch():
    state = D.SplitState(seed=5, val_ratio=0.3)
    seen = []
    for _ in range(4):
        train, val, state = D.redivide(90, state)
        assert not set(train) & set(val) and sorted(np.concatenate([train, val])) == list(range(90))
        assert len(val) == 27
        seen.append(tuple(val))
    assert len(set(seen)) == 4
    again = D.redivide(90, D.SplitState(seed=5, val_ratio=0.3))[1]
    assert tuple(again) == seen[0]


@pytest.mark.parametrize("ratio", [0.0, 1.0, -0.1, 1.5])
def test_ratio_out_of_range(ratio):
    with pytest.raises(ValueError):
        D.SplitState(seed=0, val_ratio=ratio)


def test_batches_draw_without_replacement_within_a_pass(rng):
    index = np.arange(100, 150)
    stream = D.BatchStream(index, 10, rng)
    first_pass = np.concatenate(stream.take(5))
    assert sorted(first_pass.tolist()) == list(range(100, 150))
    assert len(stream.next()) == 10
