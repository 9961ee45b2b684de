import gzip
import struct

import numpy as np
import pytest

from conftest import TINY_MNIST, full_mnist_dir
from sparse_split.data import RawMnist, batches, epoch_permutation, load_idx, load_mnist, preprocess
from sparse_split.errors import BadDimensions, BadMagic, CountMismatch, DataError, TargetTooSmall, TruncatedFile


def write_idx(path, magic, dims, payload, compress=False):
    data = struct.pack(f">I{len(dims)}I", magic, *dims) + bytes(payload)
    path.write_bytes(gzip.compress(data) if compress else data)
    return path


@pytest.fixture
def pair(tmp_path):
    imgs = np.arange(3 * 784, dtype=np.uint32) % 256
    write_idx(tmp_path / "img", 0x803, (3, 28, 28), imgs.astype(np.uint8).tobytes())
    write_idx(tmp_path / "lbl", 0x801, (3,), [1, 2, 3])
    return tmp_path / "img", tmp_path / "lbl"


def test_load_plain(pair):
    raw = load_idx(*pair)
    assert raw.images.shape == (3, 28, 28)
    assert raw.labels.tolist() == [1, 2, 3]


def test_load_gzip_detected_by_prefix(tmp_path, pair):
    img = write_idx(tmp_path / "img.bin", 0x803, (3, 28, 28), pair[0].read_bytes()[16:], compress=True)
    raw = load_idx(img, pair[1])
    assert np.array_equal(raw.images, load_idx(*pair).images)


def test_labels_with_image_magic(tmp_path, pair):
    bad = write_idx(tmp_path / "bad", 0x803, (3,), [1, 2, 3])
    with pytest.raises(BadMagic):
        load_idx(pair[0], bad)


def test_count_mismatch(tmp_path, pair):
    short = write_idx(tmp_path / "short", 0x801, (2,), [1, 2])
    with pytest.raises(CountMismatch):
        load_idx(pair[0], short)


def test_truncated(tmp_path, pair):
    cut = tmp_path / "cut"
    cut.write_bytes(pair[0].read_bytes()[:-10])
    with pytest.raises(TruncatedFile):
        load_idx(cut, pair[1])
    tiny = tmp_path / "tiny"
    tiny.write_bytes(b"\x00\x00")
    with pytest.raises(TruncatedFile):
        load_idx(tiny, pair[1])


def test_wrong_dimensions(tmp_path, pair):
    img = write_idx(tmp_path / "img27", 0x803, (3, 27, 27), bytes(3 * 27 * 27))
    with pytest.raises(BadDimensions):
        load_idx(img, pair[1])


def test_preprocess_blank_and_white():
    raw = RawMnist(np.stack([np.zeros((28, 28), np.uint8), np.full((28, 28), 255, np.uint8)]),
                   np.array([0, 1], np.uint8))
    ds = preprocess(raw)
    assert ds.images.shape == (2, 800) and ds.images.dtype == np.float32
    assert not ds.images[0].any()
    assert np.all(ds.images[1, :784] == 1.0) and not ds.images[1, 784:].any()


def test_preprocess_target_too_small(pair):
    with pytest.raises(TargetTooSmall):
        preprocess(load_idx(*pair), 783)


def test_preprocess_row_major_and_label_preserving(pair):
    raw = load_idx(*pair)
    ds = preprocess(raw, 784)
    assert np.array_equal(ds.images[1] * 255, raw.images[1].reshape(-1).astype(np.float32))
    assert ds.labels.tolist() == [1, 2, 3]
    again = preprocess(raw, 784)
    assert np.array_equal(ds.images, again.images)


def test_fixture_subset(tiny_train, tiny_test):
    assert tiny_train.images.shape == (600, 800)
    assert len(tiny_test) == 200
    assert 0 <= tiny_train.images.min() and tiny_train.images.max() <= 1
    assert not tiny_train.images[:, 784:].any()
    assert set(tiny_train.labels.tolist()) == set(range(10))


def test_missing_directory(tmp_path):
    with pytest.raises(DataError):
        load_mnist(tmp_path, "train")


def test_env_fallback(monkeypatch):
    monkeypatch.setenv("SPARSE_SPLIT_DATA", str(TINY_MNIST))
    assert len(load_mnist(None, "test")) == 200


def test_batches_sizes(tiny_train):
    ds = tiny_train.subset(10)
    assert [len(y) for _, y in batches(ds, 3, 0, 0)] == [3, 3, 3, 1]


def test_batches_cover_each_sample_once(tiny_train):
    seen = np.concatenate([y for _, y in batches(tiny_train, 64, 5, 2)])
    assert sorted(seen.tolist()) == sorted(tiny_train.labels.tolist())
    perm = epoch_permutation(len(tiny_train), 5, 2)
    assert sorted(perm.tolist()) == list(range(len(tiny_train)))


def test_permutation_pure_and_epoch_dependent():
    assert np.array_equal(epoch_permutation(100, 9, 4), epoch_permutation(100, 9, 4))
    perms = {tuple(epoch_permutation(100, 9, e)) for e in range(50)}
    assert len(perms) == 50


@pytest.mark.skipif(full_mnist_dir() is None, reason="full MNIST not available")
def test_canonical_mnist_counts_and_mean():
    train = load_mnist(full_mnist_dir(), "train")
    test = load_mnist(full_mnist_dir(), "test")
    assert len(train) == 60000 and len(test) == 10000
    assert 0.12 <= float(train.images[:, :784].mean()) <= 0.14
