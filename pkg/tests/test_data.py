import gzip
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays, array_shapes

from memsnn.data import (EventDataset, ImageDataset, load_events, load_idx, load_mnist,
                         make_batches, make_toy_dataset, parse_idx, read_events,
                         write_event_dataset, write_events, write_idx)
from memsnn.errors import (BadLabel, BadMagic, DataError, MissingLabel, ShapeMismatch,
                           TruncatedFile, UnsupportedDtype)

SUBSET = Path(__file__).resolve().parents[1] / "data" / "mnist-subset"

u8_arrays = arrays(np.uint8, array_shapes(min_dims=1, max_dims=4, max_side=6))


@settings(max_examples=50, deadline=None)
@given(a=u8_arrays, gz=st.booleans())
def test_idx_round_trip(tmp_path_factory, a, gz):
    path = tmp_path_factory.mktemp("idx") / ("x.idx.gz" if gz else "x.idx")
    write_idx(path, a)
    b = load_idx(path)
    assert b.dtype == np.uint8 and b.shape == a.shape and np.array_equal(a, b)


def test_idx_header_layout(tmp_path):
    write_idx(tmp_path / "x", np.arange(6, dtype=np.uint8).reshape(2, 3))
    raw = (tmp_path / "x").read_bytes()
    assert raw[:4] == b"\x00\x00\x08\x02"
    assert struct.unpack(">II", raw[4:12]) == (2, 3)
    assert raw[12:] == bytes(range(6))


def test_idx_gzip_is_reproducible(tmp_path):
    a = np.arange(100, dtype=np.uint8)
    write_idx(tmp_path / "a.gz", a)
    write_idx(tmp_path / "b.gz", a)
    assert (tmp_path / "a.gz").read_bytes() == (tmp_path / "b.gz").read_bytes()


@pytest.mark.parametrize("buf,err", [
    (b"\x01\x00\x08\x01\x00\x00\x00\x01\x05", BadMagic),
    (b"\x00\x00\x0d\x01\x00\x00\x00\x01\x05", UnsupportedDtype),
    (b"\x00\x00", TruncatedFile),
    (b"\x00\x00\x08\x02\x00\x00\x00\x01", TruncatedFile),
    (b"\x00\x00\x08\x01\x00\x00\x00\x03\x05", TruncatedFile),
    (b"\x00\x00\x08\x01\x00\x00\x00\x01\x05\x06", DataError),
])
def test_idx_corruption(buf, err):
    with pytest.raises(err):
        parse_idx(buf)


def test_write_idx_rejects_float():
    with pytest.raises(UnsupportedDtype):
        write_idx("unused", np.zeros(3))


def test_truncated_gz_file(tmp_path):
    raw = bytes([0, 0, 8, 1]) + struct.pack(">I", 10) + bytes(4)
    (tmp_path / "x.gz").write_bytes(gzip.compress(raw))
    with pytest.raises(TruncatedFile):
        load_idx(tmp_path / "x.gz")


@settings(max_examples=30, deadline=None)
@given(counts=arrays(np.uint8, st.tuples(st.integers(1, 4), st.integers(1, 2), st.integers(1, 5),
                                          st.integers(1, 5))))
def test_events_round_trip(tmp_path_factory, counts):
    path = tmp_path_factory.mktemp("evt") / "s.evt"
    write_events(path, counts)
    assert np.array_equal(read_events(path), counts)


def test_events_clip_at_255(tmp_path):
    write_events(tmp_path / "s.evt", np.array([[[[300, -2]]]]))
    assert read_events(tmp_path / "s.evt").ravel().tolist() == [255, 0]


def test_events_header_layout(tmp_path):
    write_events(tmp_path / "s.evt", np.zeros((3, 2, 1, 1), dtype=np.uint8))
    raw = (tmp_path / "s.evt").read_bytes()
    assert raw[:4] == b"EVT0"
    assert struct.unpack("<4I", raw[4:20]) == (3, 2, 1, 1)


@pytest.mark.parametrize("buf,err", [
    (b"EVT1" + struct.pack("<4I", 1, 1, 1, 1) + b"\x00", BadMagic),
    (b"EVT0" + b"\x00" * 8, TruncatedFile),
    (b"EVT0" + struct.pack("<4I", 2, 1, 1, 1) + b"\x00", TruncatedFile),
])
def test_events_corruption(tmp_path, buf, err):
    (tmp_path / "bad.evt").write_bytes(buf)
    with pytest.raises(err):
        read_events(tmp_path / "bad.evt")


def event_samples(n=3, steps=4, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.integers(0, 3, size=(steps, 2, 32, 32)).astype(np.uint8) for _ in range(n)]


def test_event_dataset_round_trip(tmp_path):
    samples = event_samples()
    write_event_dataset(tmp_path, samples, [0, 10, 4])
    ds = load_events(tmp_path)
    assert isinstance(ds, EventDataset)
    assert ds.labels.tolist() == [0, 10, 4] and ds.steps == 4
    assert np.array_equal(ds.samples, np.stack(samples))
    assert ds.inputs.shape == (3, 4, 2048)
    assert len(ds.subset([0, 2])) == 2


def test_event_dataset_errors(tmp_path):
    with pytest.raises(MissingLabel):
        load_events(tmp_path)
    write_event_dataset(tmp_path, event_samples(2), [1, 2])
    manifest = tmp_path / "labels.csv"
    manifest.write_text("sample00000.evt,1\nsample00001.evt,\n")
    with pytest.raises(MissingLabel):
        load_events(tmp_path)
    manifest.write_text("sample00000.evt,11\n")
    with pytest.raises(BadLabel):
        load_events(tmp_path)
    manifest.write_text("sample00000.evt,x\n")
    with pytest.raises(BadLabel):
        load_events(tmp_path)
    manifest.write_text("sample00000.evt,1\n")
    with pytest.raises(ShapeMismatch):
        load_events(tmp_path, steps=5)
    write_events(tmp_path / "odd.evt", np.zeros((4, 2, 16, 16), dtype=np.uint8))
    manifest.write_text("odd.evt,1\n")
    with pytest.raises(ShapeMismatch):
        load_events(tmp_path)


def test_image_dataset_validation():
    with pytest.raises(ShapeMismatch):
        ImageDataset(np.zeros((2, 28, 28)), np.zeros(3, dtype=int))
    with pytest.raises(DataError):
        ImageDataset(np.full((1, 28, 28), 2.0), np.zeros(1, dtype=int))


def test_bundled_mnist_subset():
    train, test = load_mnist(SUBSET, "train"), load_mnist(SUBSET, "test")
    assert train.images.shape == (2000, 28, 28) and test.images.shape == (1000, 28, 28)
    assert np.bincount(train.labels).tolist() == [200] * 10
    assert np.bincount(test.labels).tolist() == [100] * 10
    assert 0.0 <= train.images.min() and train.images.max() == 1.0
    assert train.inputs.shape == (2000, 784)
    # no image appears in both splits
    seen = {row.tobytes() for row in train.inputs}
    assert not any(row.tobytes() in seen for row in test.inputs)


def test_missing_mnist_files(tmp_path):
    with pytest.raises(DataError):
        load_mnist(tmp_path, "train")


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 60), batch=st.integers(1, 20), seed=st.integers(0, 2**32 - 1))
def test_batches_partition_the_dataset(n, batch, seed):
    x, y = np.arange(n * 2.0).reshape(n, 2), np.arange(n)
    batches = make_batches((x, y), batch, seed)
    idx = np.concatenate([b.indices for b in batches])
    assert sorted(idx.tolist()) == list(range(n))
    assert all(len(b.labels) == batch for b in batches[:-1])
    for b in batches:
        assert np.array_equal(b.labels, y[b.indices])
    again = make_batches((x, y), batch, seed)
    assert all(np.array_equal(a.indices, b.indices) for a, b in zip(batches, again))


def test_unshuffled_batches_keep_order():
    batches = make_batches((np.zeros((5, 1)), np.arange(5)), 2, shuffle=False)
    assert [b.labels.tolist() for b in batches] == [[0, 1], [2, 3], [4]]


def test_batch_size_must_be_positive():
    with pytest.raises(ValueError):
        make_batches((np.zeros((2, 1)), np.zeros(2)), 0)


def test_toy_dataset_is_linearly_separable():
    ds = make_toy_dataset()
    assert len(ds) == 40 and ds.inputs.shape == (40, 64)
    img = ds.images
    left, right = img[:, :, :4].mean(axis=(1, 2)), img[:, :, 4:].mean(axis=(1, 2))
    assert np.all((left > right) == (ds.labels == 0))
    assert np.array_equal(make_toy_dataset(seed=3).images, make_toy_dataset(seed=3).images)
