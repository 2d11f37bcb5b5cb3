import pickle

import numpy as np
import pytest
from PIL import Image
from scipy.io import savemat

from splitdp.data import (DatasetSpec, ImageDataset, LabeledExample, load_dataset, partition,
                          read_cache, resize, synthetic_dataset, write_cache)
from splitdp.errors import ConfigurationError, IngestionError, InputError


def _pool(n, seed=0):
    rng = np.random.default_rng(seed)
    return ImageDataset(rng.uniform(0, 255, (n, 32, 32, 3)), rng.integers(0, 10, n),
                        [f"p/{i}" for i in range(n)])


def test_resize_examples():
    img = np.random.default_rng(0).uniform(0, 255, (32, 32, 3))
    np.testing.assert_array_equal(resize(img), img)
    const = resize(np.full((96, 96, 3), 77.25))
    assert const.shape == (32, 32, 3)
    np.testing.assert_allclose(const, 77.25, rtol=0, atol=1e-12)
    checker = np.zeros((2, 2, 3))
    checker[0, 0] = checker[1, 1] = 255.0
    np.testing.assert_allclose(resize(checker, (1, 1)), 127.5, atol=1e-12)
    with pytest.raises(InputError):
        resize(np.zeros((4, 4)))


def test_spec_sizes():
    s = DatasetSpec("svhn", desk_scale=0.1)
    assert (s.train_size, s.test_size) == (7320, 2600)
    c = DatasetSpec("CIFAR-10")
    assert (c.name, c.train_size, c.test_size, c.n_classes) == ("cifar10", 50000, 10000, 10)
    assert DatasetSpec("cifar100").n_classes == 100
    assert DatasetSpec("svhn", seed=1).key() != DatasetSpec("svhn", seed=2).key()
    for kw in (dict(name="mnist"), dict(name="svhn", desk_scale=0),
               dict(name="svhn", class_filter=(1, 2))):
        with pytest.raises(ConfigurationError):
            DatasetSpec(**kw)


def test_partition_contract():
    pool = _pool(50)
    tr, te = partition(pool, (30, 15), seed=4)
    assert (len(tr), len(te)) == (30, 15)
    assert not set(tr.source_ids) & set(te.source_ids)
    tr2, te2 = partition(pool, (30, 15), seed=4)
    assert tr2.source_ids == tr.source_ids and te2.source_ids == te.source_ids
    empty, rest = partition(pool, (0, 50), seed=1)
    assert len(empty) == 0 and len(rest) == 50
    with pytest.raises(ConfigurationError):
        partition(pool, (40, 11))


def test_dataset_validation_and_examples():
    with pytest.raises(InputError):
        ImageDataset(np.zeros((2, 32, 32, 3)), [0, 10], ["a", "b"])
    with pytest.raises(InputError):
        ImageDataset(np.zeros((2, 32, 32, 3)), [0], ["a", "b"])
    pool = _pool(3)
    back = ImageDataset.from_examples(list(pool))
    np.testing.assert_array_equal(back.images, pool.images)
    assert isinstance(next(iter(pool)), LabeledExample)
    assert len(ImageDataset.from_examples([])) == 0


def test_cache_round_trip(tmp_path):
    pool = _pool(5)
    pool.name = "svhn"
    write_cache(pool, tmp_path / "c", key="abc")
    back = read_cache(tmp_path / "c", key="abc")
    np.testing.assert_array_equal(back.images, pool.images)
    np.testing.assert_array_equal(back.labels, pool.labels)
    assert back.source_ids == pool.source_ids and back.name == "svhn"
    assert read_cache(tmp_path / "c", key="other") is None
    assert read_cache(tmp_path / "missing") is None


def test_cache_truncation_detected(tmp_path):
    write_cache(_pool(3), tmp_path, key="k")
    raw = (tmp_path / "images.f32").read_bytes()
    (tmp_path / "images.f32").write_bytes(raw[:100])
    with pytest.raises(IngestionError):
        read_cache(tmp_path, key="k")


def test_missing_raw_files(tmp_path):
    with pytest.raises(IngestionError, match="missing dataset file"):
        load_dataset(DatasetSpec("svhn", train_size=10, test_size=5), tmp_path)
    with pytest.raises(IngestionError):
        load_dataset(DatasetSpec("cifar10", train_size=10, test_size=5), tmp_path)


def test_synthetic_dataset():
    tr, te = synthetic_dataset(40, 10, seed=2)
    assert tr.images.shape == (40, 32, 32, 3) and len(te) == 10
    assert tr.images.min() >= 0 and tr.images.max() <= 255
    assert set(np.unique(tr.labels)) <= set(range(10))
    assert not set(tr.source_ids) & set(te.source_ids)
    tr2, _ = synthetic_dataset(40, 10, seed=2)
    np.testing.assert_array_equal(tr.images, tr2.images)


def test_synthetic_through_load_dataset(tmp_path):
    spec = DatasetSpec("synthetic", train_size=20, test_size=6, seed=9)
    tr, te = load_dataset(spec, tmp_path)
    assert (tmp_path / "synthetic" / "train" / "manifest.tsv").exists()
    tr2, te2 = load_dataset(spec, tmp_path)
    np.testing.assert_array_equal(tr.images, tr2.images)
    assert te.source_ids == te2.source_ids


def test_svhn_reader(tmp_path):
    raw = tmp_path / "raw" / "svhn"
    raw.mkdir(parents=True)
    rng = np.random.default_rng(0)
    for split, n in (("train", 12), ("test", 8)):
        x = rng.integers(0, 256, (32, 32, 3, n), dtype=np.uint8)
        y = np.arange(1, n + 1).reshape(-1, 1) % 10 + 1  # labels 1..10
        savemat(raw / f"{split}_32x32.mat", {"X": x, "y": y})
    spec = DatasetSpec("svhn", train_size=10, test_size=4, seed=3)
    tr, te = load_dataset(spec, tmp_path)
    assert len(tr) == 10 and len(te) == 4
    assert tr.labels.min() >= 0 and tr.labels.max() <= 9
    again, _ = load_dataset(spec, tmp_path)
    assert again.source_ids == tr.source_ids


def test_cifar10_reader(tmp_path):
    base = tmp_path / "raw" / "cifar10" / "cifar-10-batches-py"
    base.mkdir(parents=True)
    rng = np.random.default_rng(1)
    for b in [f"data_batch_{i}" for i in range(1, 6)] + ["test_batch"]:
        data = rng.integers(0, 256, (4, 3072), dtype=np.uint8)
        with open(base / b, "wb") as fh:
            pickle.dump({"data": data, "labels": list(rng.integers(0, 10, 4))}, fh)
    tr, te = load_dataset(DatasetSpec("cifar10", train_size=20, test_size=4), tmp_path)
    assert tr.images.shape == (20, 32, 32, 3) and len(te) == 4
    first = pickle.load(open(base / "test_batch", "rb"))
    planes = first["data"][0].reshape(3, 32, 32).transpose(1, 2, 0)
    idx = [int(s.split("/")[-1]) for s in te.source_ids].index(0)
    np.testing.assert_array_equal(te.images[idx], planes)


def test_stl10_reader_resizes(tmp_path):
    base = tmp_path / "raw" / "stl10" / "stl10_binary"
    base.mkdir(parents=True)
    for split, n in (("train", 6), ("test", 4)):
        x = np.full((n, 3, 96, 96), 40, dtype=np.uint8)
        x.tofile(base / f"{split}_X.bin")
        np.arange(1, n + 1, dtype=np.uint8).tofile(base / f"{split}_y.bin")
    tr, te = load_dataset(DatasetSpec("stl10", train_size=7, test_size=3), tmp_path)
    assert tr.images.shape == (7, 32, 32, 3)
    np.testing.assert_allclose(tr.images, 40.0)
    (base / "test_X.bin").write_bytes(b"\0" * 10)
    with pytest.raises(IngestionError):
        load_dataset(DatasetSpec("stl10", train_size=7, test_size=3, seed=5), tmp_path)


def test_gtsrb_reader_keeps_most_populous_classes(tmp_path):
    img_root = tmp_path / "raw" / "gtsrb" / "GTSRB" / "Final_Training" / "Images"
    counts = {c: 2 + (c % 5) for c in range(12)}
    for c, n in counts.items():
        d = img_root / f"{c:05d}"
        d.mkdir(parents=True)
        for i in range(n):
            Image.new("RGB", (40 + i, 45), (c * 10, 0, 0)).save(d / f"{i:05d}.ppm")
    spec = DatasetSpec("gtsrb", train_size=30, test_size=10)
    tr, te = load_dataset(spec, tmp_path)
    kept = sorted({s.split("/")[1] for s in tr.source_ids + te.source_ids})
    expected = sorted(c for c in sorted(counts, key=lambda c: (-counts[c], c))[:10])
    assert kept == [f"{c:05d}" for c in expected]
    assert tr.images.shape[1:] == (32, 32, 3)
    assert set(np.unique(np.concatenate([tr.labels, te.labels]))) <= set(range(10))
