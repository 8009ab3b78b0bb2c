"""Correlation operators and fixed-point quantization.

Each operator maps an input vector ``x`` and a weight vector ``w`` to a scalar:

* typical (``T``):             sum x_i * w_i
* multiplication-free (``MF``): sum sign(x_i)*|w_i| + sign(w_i)*|x_i|
* binary (``B``):              sum x_i * binarize(w_i)

For layers the same operators act on every (input window, filter) pair. After
an im2col gather this is a matrix product, and MF splits into two of them:
``sign(X) @ |W| + |X| @ sign(W)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable

import numpy as np

from .tensor import (
    DEFAULT_STEEPNESS,
    ShapeError,
    Tensor,
    as_tensor,
    im2col,
    matmul,
    reshape,
    ste_binarize,
    surrogate_abs,
    surrogate_sign,
    transpose,
)


class OperatorKind(str, Enum):
    TYPICAL = "T"
    MULFREE = "MF"
    BINARY = "B"

    @property
    def long_name(self) -> str:
        return _LONG_NAMES[self]

    @classmethod
    def parse(cls, token: str) -> "OperatorKind":
        key = token.strip()
        for kind in cls:
            if key.upper() == kind.value or key.lower() == kind.long_name.lower():
                return kind
        if key.lower() in ("multiplicationfree", "multiplication-free", "mulfree"):
            return cls.MULFREE
        raise ValueError(f"unknown operator {token!r}")


_LONG_NAMES = {
    OperatorKind.TYPICAL: "Typical",
    OperatorKind.MULFREE: "MF",
    OperatorKind.BINARY: "Binary",
}


# ---------------------------------------------------------------- vector forms


def _pair(x, w) -> tuple[Tensor, Tensor]:
    x, w = as_tensor(x), as_tensor(w)
    if x.shape != w.shape or x.ndim != 1:
        raise ShapeError(f"operator needs two equal-length vectors, got {x.shape} and {w.shape}")
    return x, w


def op_typical(x, w) -> Tensor:
    x, w = _pair(x, w)
    return (x * w).sum()


def op_mulfree(x, w, k: float = DEFAULT_STEEPNESS) -> Tensor:
    x, w = _pair(x, w)
    return (surrogate_sign(x, k) * surrogate_abs(w, k) + surrogate_sign(w, k) * surrogate_abs(x, k)).sum()


def op_binary(x, w) -> Tensor:
    x, w = _pair(x, w)
    return (x * ste_binarize(w)).sum()


# ---------------------------------------------------------------- batched forms
#
# cols: [rows, K] input windows, wmat: [K, out] filters -> [rows, out]


def _corr_typical(cols: Tensor, wmat: Tensor, k: float) -> Tensor:
    return matmul(cols, wmat)


def _corr_mulfree(cols: Tensor, wmat: Tensor, k: float) -> Tensor:
    return matmul(surrogate_sign(cols, k), surrogate_abs(wmat, k)) + matmul(
        surrogate_abs(cols, k), surrogate_sign(wmat, k)
    )


def _corr_binary(cols: Tensor, wmat: Tensor, k: float) -> Tensor:
    return matmul(cols, ste_binarize(wmat))


CORRELATORS: dict[str, Callable[[Tensor, Tensor, float], Tensor]] = {
    OperatorKind.TYPICAL.value: _corr_typical,
    OperatorKind.MULFREE.value: _corr_mulfree,
    OperatorKind.BINARY.value: _corr_binary,
}


def register_correlator(name: str, fn: Callable[[Tensor, Tensor, float], Tensor]) -> None:
    """Add a batched correlation ``fn(cols, wmat, k) -> [rows, out]`` under ``name``."""
    if name in CORRELATORS:
        raise ValueError(f"correlator {name!r} already registered")
    CORRELATORS[name] = fn


def correlate(kind, cols, wmat, k: float = DEFAULT_STEEPNESS) -> Tensor:
    key = kind.value if isinstance(kind, OperatorKind) else str(kind)
    return CORRELATORS[key](as_tensor(cols), as_tensor(wmat), k)


@dataclass(frozen=True)
class ConvGeometry:
    kernel: tuple[int, int]
    stride: int = 1
    padding: int = 0


def conv_windows(x: Tensor, weights: Tensor, geometry: ConvGeometry) -> tuple[Tensor, Tensor, tuple[int, int, int]]:
    """Gather input windows and flatten filters for a conv2d correlation.

    Returns ``(cols, wmat, (n, oh, ow))`` with ``cols`` [n*oh*ow, C*kh*kw] and
    ``wmat`` [C*kh*kw, out_channels].
    """
    x, weights = as_tensor(x), as_tensor(weights)
    if x.ndim != 4 or weights.ndim != 4:
        raise ShapeError(f"conv2d expects [N,C,H,W] input and [O,C,kh,kw] weights, got {x.shape}, {weights.shape}")
    kh, kw = geometry.kernel
    oc, ic, wkh, wkw = weights.shape
    if ic != x.shape[1] or (wkh, wkw) != (kh, kw):
        raise ShapeError(
            f"conv2d geometry mismatch: input channels {x.shape[1]}, weights {weights.shape}, kernel {kh}x{kw}"
        )
    n, _, h, w = x.shape
    oh = (h + 2 * geometry.padding - kh) // geometry.stride + 1
    ow = (w + 2 * geometry.padding - kw) // geometry.stride + 1
    cols = im2col(x, kh, kw, geometry.stride, geometry.padding)
    wmat = transpose(reshape(weights, (oc, ic * kh * kw)), (1, 0))
    return cols, wmat, (n, oh, ow)


def fold_conv_output(y: Tensor, n: int, oh: int, ow: int) -> Tensor:
    """[n*oh*ow, O] -> [n, O, oh, ow]."""
    return transpose(reshape(y, (n, oh, ow, y.shape[1])), (0, 3, 1, 2))


def apply_operator(
    kind,
    layer_kind: str,
    x,
    weights,
    bias=None,
    geometry: ConvGeometry | None = None,
    k: float = DEFAULT_STEEPNESS,
) -> Tensor:
    """Run one correlation operator as a dense or conv2d layer.

    Dense weights are [fan_in, fan_out] (a 1-D vector is a single output);
    conv2d weights are [out_channels, in_channels, kh, kw]. The bias is added
    after the correlation in full precision.
    """
    x, weights = as_tensor(x), as_tensor(weights)
    if layer_kind == "dense":
        squeeze_in = x.ndim == 1
        if squeeze_in:
            x = reshape(x, (1, x.shape[0]))
        if weights.ndim == 1:
            weights = reshape(weights, (weights.shape[0], 1))
        if x.ndim != 2 or x.shape[1] != weights.shape[0]:
            raise ShapeError(f"dense geometry mismatch: input {x.shape}, weights {weights.shape}")
        y = correlate(kind, x, weights, k)
        if bias is not None:
            y = y + bias
        if squeeze_in:
            y = reshape(y, (y.shape[1],)) if y.shape[1] > 1 else reshape(y, ())
        return y
    if layer_kind == "conv2d":
        if geometry is None:
            raise ValueError("conv2d needs a ConvGeometry")
        cols, wmat, (n, oh, ow) = conv_windows(x, weights, geometry)
        y = correlate(kind, cols, wmat, k)
        if bias is not None:
            y = y + bias
        return fold_conv_output(y, n, oh, ow)
    raise ValueError(f"unsupported layer kind {layer_kind!r}")


# ---------------------------------------------------------------- quantization


@dataclass(frozen=True)
class QuantSpec:
    bits: int
    scale: float
    symmetric: bool = True

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1


def round_half_away(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def quantize(t, bits: int) -> tuple[np.ndarray, QuantSpec]:
    """Per-tensor symmetric quantization: scale = max|t| / (2^(bits-1) - 1)."""
    if bits < 2:
        raise ValueError(f"need at least 2 bits, got {bits}")
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("cannot quantize a tensor with NaN or Inf")
    qmax = 2 ** (bits - 1) - 1
    peak = float(np.max(np.abs(arr))) if arr.size else 0.0
    if peak == 0.0:
        return np.zeros(arr.shape, dtype=np.int64), QuantSpec(bits, 1.0)
    scale = peak / qmax
    ints = np.clip(round_half_away(arr / scale), -qmax, qmax).astype(np.int64)
    return ints, QuantSpec(bits, scale)


def dequantize(ints: np.ndarray, spec: QuantSpec) -> np.ndarray:
    return np.asarray(ints, dtype=np.float64) * spec.scale


def fake_quantize(arr: np.ndarray, bits: int) -> np.ndarray:
    ints, spec = quantize(arr, bits)
    return dequantize(ints, spec)
