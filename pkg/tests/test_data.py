import struct

import numpy as np
import pytest

from opsearch.data import DatasetError, load_dataset, make_splits, read_csv, read_idx, write_idx


def test_blobs_split_sizes():
    d = load_dataset("synthetic:blobs?classes=3&samples=600", seed=7)
    assert d.sizes() == (480, 60, 60)
    assert d.sample_shape == (1, 8, 8)
    assert d.classes == 3


def test_synthetic_deterministic():
    a = load_dataset("synthetic:blobs", seed=3)
    b = load_dataset("synthetic:blobs", seed=3)
    c = load_dataset("synthetic:blobs", seed=4)
    assert np.array_equal(a.x_train, b.x_train) and np.array_equal(a.y_test, b.y_test)
    assert not np.array_equal(a.x_train, c.x_train)


def test_rings_and_digits():
    r = load_dataset("synthetic:rings?classes=3&samples=300", seed=0)
    assert r.sample_shape == (2,) and r.classes == 3 and sum(r.sizes()) == 300
    d = load_dataset("builtin:digits", seed=0)
    assert d.sample_shape == (1, 8, 8) and d.classes == 10
    assert sum(d.sizes()) == 1797


def test_splits_disjoint_and_complete():
    x = np.arange(100, dtype=float).reshape(100, 1) * 10
    d = make_splits(x, np.arange(100) % 2, seed=1)
    back = [np.round(s * d.std + d.mean).astype(int).ravel() for s in (d.x_train, d.x_val, d.x_test)]
    allv = np.concatenate(back)
    assert len(set(allv)) == 100
    assert sorted(allv) == list(range(0, 1000, 10))


def test_normalization_from_train_only():
    d = load_dataset("synthetic:blobs", seed=2)
    assert np.allclose(d.x_train.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    assert np.allclose(d.x_train.std(axis=(0, 2, 3)), 1.0, atol=1e-12)
    # val/test use train statistics, so their moments are not forced to 0/1
    assert abs(d.x_val.mean()) > 1e-9


def test_idx_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(5, 3, 4), dtype=np.uint8)
    p = tmp_path / "train-images-idx3-ubyte"
    write_idx(p, img)
    raw = p.read_bytes()
    assert raw[:4] == b"\x00\x00\x08\x03"
    assert struct.unpack(">3I", raw[4:16]) == (5, 3, 4)
    back = read_idx(p)
    assert back.shape == (5, 3, 4) and np.array_equal(back, img)


def test_idx_handwritten_bytes(tmp_path):
    # magic 0x00000803, dims 2x2x2, body 0..7
    raw = bytes([0, 0, 8, 3]) + (2).to_bytes(4, "big") * 3 + bytes(range(8))
    p = tmp_path / "a.idx"
    p.write_bytes(raw)
    arr = read_idx(p)
    assert arr.shape == (2, 2, 2)
    assert arr[1, 0, 1] == 5


def test_idx_dataset_source(tmp_path):
    rng = np.random.default_rng(1)
    write_idx(tmp_path / "t-images.idx", rng.integers(0, 256, size=(20, 6, 6), dtype=np.uint8))
    write_idx(tmp_path / "t-labels.idx", (np.arange(20) % 4).astype(np.uint8))
    d = load_dataset(f"idx:{tmp_path / 't-images.idx'}", seed=0)
    assert d.sample_shape == (1, 6, 6) and d.classes == 4 and sum(d.sizes()) == 20


@pytest.mark.parametrize(
    "raw,needle",
    [
        (b"\x00\x00", "offset 2"),
        (b"\x01\x00\x08\x01" + b"\x00" * 8, "offset 0"),
        (b"\x00\x00\x08\x02\x00\x00\x00\x02", "offset 8"),
        (b"\x00\x00\x08\x01\x00\x00\x00\x04\x01\x02", "offset 8"),
    ],
)
def test_idx_errors_name_offset(tmp_path, raw, needle):
    p = tmp_path / "bad.idx"
    p.write_bytes(raw)
    with pytest.raises(DatasetError, match=needle):
        read_idx(p)


def test_csv_loading(tmp_path):
    p = tmp_path / "d.csv"
    rows = ["label,f0,f1"] + [f"{i % 2},{i},{-i}" for i in range(10)]
    p.write_text("\n".join(rows) + "\n")
    x, y = read_csv(p)
    assert x.shape == (10, 2) and list(y[:3]) == [0, 1, 0]
    d = load_dataset(f"csv:{p}?classes=2", seed=0)
    assert d.classes == 2 and sum(d.sizes()) == 10


def test_csv_shape_option(tmp_path):
    p = tmp_path / "img.csv"
    rows = ["label," + ",".join(f"f{i}" for i in range(16))]
    rows += [f"{i % 2}," + ",".join(str(i + j) for j in range(16)) for i in range(10)]
    p.write_text("\n".join(rows))
    d = load_dataset(f"csv:{p}?shape=1,4,4", seed=0)
    assert d.sample_shape == (1, 4, 4)


@pytest.mark.parametrize(
    "body,needle",
    [
        ("label,f0\n0,1\n5,2\n", "line 3"),
        ("label,f0,f1\n0,1,2\n1,2\n", "line 3"),
        ("label,f0\n0,1\n1,x\n0,2\n", "line 3"),
        ("x,f0\n0,1\n", "line 1"),
    ],
)
def test_csv_errors_name_line(tmp_path, body, needle):
    p = tmp_path / "bad.csv"
    p.write_text(body)
    with pytest.raises(DatasetError, match=needle):
        read_csv(p, classes=2)


@pytest.mark.parametrize("src", ["blobs", "synthetic:moons", "builtin:mnist", "ftp:x"])
def test_bad_sources(src):
    with pytest.raises(DatasetError):
        load_dataset(src)


def test_unknown_split():
    d = load_dataset("synthetic:rings", seed=0)
    with pytest.raises(ValueError, match="holdout"):
        d.split("holdout")
