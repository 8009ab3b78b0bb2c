"""Desk-scale datasets: synthetic blobs and rings, bundled 8x8 digits, IDX and CSV files."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from urllib.parse import parse_qsl

import numpy as np


class DatasetError(ValueError):
    """Malformed dataset source or file."""


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    classes: int
    mean: np.ndarray
    std: np.ndarray
    source: str = ""

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.x_train.shape[1:])

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        try:
            return {
                "train": (self.x_train, self.y_train),
                "val": (self.x_val, self.y_val),
                "test": (self.x_test, self.y_test),
            }[name]
        except KeyError:
            raise ValueError(f"unknown split {name!r}") from None

    def sizes(self) -> tuple[int, int, int]:
        return len(self.y_train), len(self.y_val), len(self.y_test)


def make_splits(
    x: np.ndarray,
    y: np.ndarray,
    seed: int,
    classes: int | None = None,
    fractions: tuple[float, float] = (0.8, 0.1),
    source: str = "",
) -> Dataset:
    """Shuffle, split 80/10/10 and standardize with per-channel train statistics."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(x) != len(y):
        raise DatasetError(f"{len(x)} samples but {len(y)} labels")
    classes = int(y.max()) + 1 if classes is None else classes
    if y.min() < 0 or y.max() >= classes:
        raise DatasetError(f"labels outside [0, {classes})")
    n = len(y)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(n * fractions[0])
    n_val = int(n * fractions[1])
    tr, va, te = order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :]
    axes = (0,) + tuple(range(2, x.ndim)) if x.ndim > 2 else (0,)
    mean = x[tr].mean(axis=axes, keepdims=True)[0]
    std = x[tr].std(axis=axes, keepdims=True)[0]
    std = np.where(std > 1e-12, std, 1.0)

    def norm(a):
        return (a - mean) / std

    return Dataset(norm(x[tr]), y[tr], norm(x[va]), y[va], norm(x[te]), y[te], classes, mean, std, source)


# ---------------------------------------------------------------- synthetic


def make_blobs(classes: int = 3, samples: int = 600, side: int = 8, noise: float = 1.0, separation: float = 2.0, seed: int = 0):
    """Gaussian blobs rendered as 1 x side x side images: a random class template plus noise."""
    rng = np.random.default_rng(seed)
    templates = rng.normal(0.0, separation, size=(classes, side * side))
    y = np.arange(samples) % classes
    x = templates[y] + rng.normal(0.0, noise, size=(samples, side * side))
    return x.reshape(samples, 1, side, side), y


def make_rings(classes: int = 2, samples: int = 600, noise: float = 0.1, seed: int = 0):
    """Concentric rings in 2-D; ring ``c`` has radius ``c + 1``."""
    rng = np.random.default_rng(seed)
    y = np.arange(samples) % classes
    theta = rng.uniform(0, 2 * np.pi, samples)
    r = y + 1.0 + rng.normal(0.0, noise, samples)
    return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1), y


def load_digits_8x8():
    from sklearn.datasets import load_digits

    d = load_digits()
    return d.images.reshape(-1, 1, 8, 8).astype(np.float64), d.target.astype(np.int64)


# ---------------------------------------------------------------- IDX


_IDX_DTYPES = {
    0x08: (">u1", 1),
    0x09: (">i1", 1),
    0x0B: (">i2", 2),
    0x0C: (">i4", 4),
    0x0D: (">f4", 4),
    0x0E: (">f8", 8),
}


def read_idx(path: str | Path) -> np.ndarray:
    """Parse an IDX file (big-endian magic 0x0000TTNN, then NN uint32 dims)."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DatasetError(f"{path}: truncated IDX header at byte offset {len(raw)}")
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code not in _IDX_DTYPES:
        raise DatasetError(f"{path}: bad IDX magic 0x{raw[:4].hex()} at byte offset 0")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise DatasetError(f"{path}: truncated IDX dimensions at byte offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    fmt, width = _IDX_DTYPES[dtype_code]
    expected = int(np.prod(dims)) * width
    body = raw[header_end:]
    if len(body) != expected:
        raise DatasetError(
            f"{path}: IDX body has {len(body)} bytes, dims {dims} need {expected} (data starts at byte offset {header_end})"
        )
    return np.frombuffer(body, dtype=fmt).reshape(dims)


def write_idx(path: str | Path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    codes = {np.dtype("uint8"): 0x08, np.dtype("int8"): 0x09, np.dtype("int16"): 0x0B,
             np.dtype("int32"): 0x0C, np.dtype("float32"): 0x0D, np.dtype("float64"): 0x0E}
    if arr.dtype not in codes:
        raise DatasetError(f"cannot store dtype {arr.dtype} in IDX")
    code = codes[arr.dtype]
    header = struct.pack(">HBB", 0, code, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.astype(_IDX_DTYPES[code][0]).tobytes())


def _idx_label_path(images: Path) -> Path:
    name = images.name
    for a, b in (("images", "labels"), ("-idx3-", "-idx1-")):
        if a in name:
            return images.with_name(name.replace(a, b))
    raise DatasetError(f"{images}: cannot infer the label file; pass idx:<images>,<labels>")


# ---------------------------------------------------------------- CSV


def read_csv(path: str | Path, classes: int | None = None):
    """``label,f0,f1,...`` with a header row; errors name the offending line."""
    rows, labels = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "label":
            raise DatasetError(f"{path}: line 1: header must start with 'label'")
        width = len(header)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise DatasetError(f"{path}: line {lineno}: expected {width} fields, got {len(row)}")
            try:
                label = int(row[0])
                feats = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise DatasetError(f"{path}: line {lineno}: {exc}") from None
            if label < 0 or (classes is not None and label >= classes):
                raise DatasetError(f"{path}: line {lineno}: label {label} out of range")
            labels.append(label)
            rows.append(feats)
    if not rows:
        raise DatasetError(f"{path}: no data rows")
    return np.array(rows), np.array(labels, dtype=np.int64)


# ---------------------------------------------------------------- dispatch


def _options(query: str) -> dict[str, str]:
    return dict(parse_qsl(query, strict_parsing=False)) if query else {}


def load_dataset(source: str, seed: int = 0) -> Dataset:
    """Load a dataset from a source string.

    ``synthetic:blobs``, ``synthetic:rings`` and ``builtin:digits`` take
    ``?key=value&...`` options (``classes``, ``samples``, ``noise``,
    ``separation``, ``side``). File sources are ``idx:<images>[,<labels>]``
    and ``csv:<path>`` (``?classes=K`` to bound labels, ``?shape=C,H,W`` to
    reshape features).
    """
    scheme, _, rest = source.partition(":")
    if not rest:
        raise DatasetError(f"dataset source {source!r} must look like scheme:name")
    target, _, query = rest.partition("?")
    opts = _options(query)
    classes = int(opts["classes"]) if "classes" in opts else None
    if scheme == "synthetic":
        if target == "blobs":
            kw = {k: (int if k in ("classes", "samples", "side") else float)(v) for k, v in opts.items()}
            x, y = make_blobs(seed=seed, **kw)
        elif target == "rings":
            kw = {k: (int if k in ("classes", "samples") else float)(v) for k, v in opts.items()}
            x, y = make_rings(seed=seed, **kw)
        else:
            raise DatasetError(f"unknown synthetic dataset {target!r}")
    elif scheme == "builtin":
        if target != "digits":
            raise DatasetError(f"unknown builtin dataset {target!r}")
        x, y = load_digits_8x8()
    elif scheme == "idx":
        parts = target.split(",")
        images = Path(parts[0])
        labels = Path(parts[1]) if len(parts) > 1 else _idx_label_path(images)
        x = read_idx(images).astype(np.float64)
        y = read_idx(labels).astype(np.int64).reshape(-1)
        if x.ndim == 3:
            x = x[:, None, :, :]
        if len(x) != len(y):
            raise DatasetError(f"{images}: {len(x)} images but {len(y)} labels")
    elif scheme == "csv":
        x, y = read_csv(target, classes)
        if "shape" in opts:
            shape = tuple(int(v) for v in opts["shape"].split(","))
            x = x.reshape((len(x),) + shape)
    else:
        raise DatasetError(f"unknown dataset scheme {scheme!r}")
    return make_splits(x, y, seed, classes=classes, source=source)
