import struct

import numpy as np
import pytest

from ctt.data import (IMAGE_MAGIC, LABEL_MAGIC, IDXFormatError, default_data_dir, load_dataset,
                      load_idx, make_batches, synthetic_fixture)


def write_idx(path, magic, arr):
    arr = np.asarray(arr, dtype=np.uint8)
    path.write_bytes(struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape)
                     + arr.tobytes())
    return path


@pytest.fixture
def idx_dir(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (5, 28, 28))
    imgs[0, 0, 0] = 255
    imgs[0, 0, 1] = 0
    write_idx(tmp_path / "train-images-idx3-ubyte", IMAGE_MAGIC, imgs)
    write_idx(tmp_path / "train-labels-idx1-ubyte", LABEL_MAGIC, [3, 1, 4, 1, 5])
    write_idx(tmp_path / "t10k-images-idx3-ubyte", IMAGE_MAGIC, imgs[:2])
    write_idx(tmp_path / "t10k-labels-idx1-ubyte", LABEL_MAGIC, [9, 2])
    return tmp_path, imgs


def test_load_idx_scales_and_shapes(idx_dir):
    path, imgs = idx_dir
    ds = load_dataset(path, "train")
    assert ds.images.shape == (5, 1, 28, 28) and ds.images.dtype == np.float32
    assert ds.images[0, 0, 0, 0] == 1.0 and ds.images[0, 0, 0, 1] == 0.0
    np.testing.assert_allclose(ds.images[:, 0], imgs / 255.0, rtol=1e-6)
    np.testing.assert_array_equal(ds.labels, [3, 1, 4, 1, 5])
    assert len(load_dataset(path, "test")) == 2


def test_bad_magic(tmp_path):
    img = write_idx(tmp_path / "i", LABEL_MAGIC, np.zeros((2, 2, 2)))
    lbl = write_idx(tmp_path / "l", LABEL_MAGIC, [0, 1])
    with pytest.raises(IDXFormatError, match="magic"):
        load_idx(img, lbl)


def test_truncated_payload(tmp_path):
    img = write_idx(tmp_path / "i", IMAGE_MAGIC, np.zeros((2, 3, 3)))
    img.write_bytes(img.read_bytes()[:-4])
    lbl = write_idx(tmp_path / "l", LABEL_MAGIC, [0, 1])
    with pytest.raises(IDXFormatError, match="payload"):
        load_idx(img, lbl)


def test_count_mismatch(tmp_path):
    img = write_idx(tmp_path / "i", IMAGE_MAGIC, np.zeros((2, 3, 3)))
    lbl = write_idx(tmp_path / "l", LABEL_MAGIC, [0, 1, 2])
    with pytest.raises(IDXFormatError, match="labels"):
        load_idx(img, lbl)


def test_missing_files_and_gzip_hint(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path, "train")
    (tmp_path / "train-images-idx3-ubyte.gz").write_bytes(b"")
    with pytest.raises(FileNotFoundError, match="gzip"):
        load_dataset(tmp_path, "train")


def test_data_dir_from_environment(idx_dir, monkeypatch):
    path, _ = idx_dir
    monkeypatch.setenv("CTT_DATA_DIR", str(path))
    assert default_data_dir() == path
    assert len(load_dataset(split="train")) == 5
    monkeypatch.delenv("CTT_DATA_DIR")
    with pytest.raises(FileNotFoundError, match="CTT_DATA_DIR"):
        load_dataset(split="train")


def test_batches_cover_every_sample_once():
    ds = synthetic_fixture("separable", 23, seed=0, shape=(1, 2, 2))
    ds.labels = np.arange(23)
    seen = np.concatenate([y for _, y in make_batches(ds, 5, seed=3)])
    assert sorted(seen) == list(range(23))
    again = np.concatenate([y for _, y in make_batches(ds, 5, seed=3)])
    assert np.array_equal(seen, again)
    ordered = np.concatenate([y for _, y in make_batches(ds, 5, shuffle=False)])
    assert np.array_equal(ordered, np.arange(23))
    with pytest.raises(ValueError):
        next(make_batches(ds, 0))


def test_sample_is_seeded_and_validated():
    ds = synthetic_fixture("separable", 50, seed=0, shape=(1, 2, 2))
    a, b = ds.sample(10, seed=4), ds.sample(10, seed=4)
    assert np.array_equal(a.images, b.images) and len(a) == 10
    assert ds.sample(None) is ds
    with pytest.raises(ValueError):
        ds.sample(0)


def test_fixtures():
    assert np.all(synthetic_fixture("constant", 3).images[0] == synthetic_fixture("constant", 3).images[2])
    corner = synthetic_fixture("corner", 4)
    assert corner.images[0].max() == 0 and corner.images[1].min() == 1
    with pytest.raises(ValueError):
        synthetic_fixture("nope", 3)


def test_real_mnist_files(mnist_path):
    tr = load_dataset(mnist_path, "train")
    te = load_dataset(mnist_path, "test")
    assert tr.images.shape == (60000, 1, 28, 28) and te.images.shape == (10000, 1, 28, 28)
    assert tr.images.min() >= 0 and tr.images.max() <= 1
    assert set(np.unique(te.labels)) == set(range(10))
