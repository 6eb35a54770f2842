"""Dense tensor primitives shared by every other module.

A tensor here is a plain C-contiguous numpy array: row major, last axis
fastest.  Model code runs in float32; verification harnesses pass float64
and every routine follows the dtype of its inputs.
"""

import os

import numpy as np

TensorShape = tuple[int, ...]

_EW_OPS = {"add": np.add, "sub": np.subtract, "mul": np.multiply}

# When true, finite_check() scans results for NaN/Inf.  The test suite turns
# it on; it is off by default because the scan costs a full pass per op.
DEBUG_FINITE = os.environ.get("SEQVESSEL_DEBUG_FINITE", "") not in ("", "0")


def validate_shape(dims) -> TensorShape:
    shape = tuple(int(d) for d in dims)
    if len(shape) == 0:
        raise ValueError("tensor rank must be >= 1")
    if any(d < 1 for d in shape):
        raise ValueError(f"axis lengths must be >= 1, got {shape}")
    return shape


def element_count(shape) -> int:
    n = 1
    for d in shape:
        n *= int(d)
    return n


def tensor_from(shape, values, dtype=np.float32) -> np.ndarray:
    """Build a tensor from a flat value sequence in row-major order."""
    shape = validate_shape(shape)
    flat = np.asarray(values, dtype=dtype).reshape(-1)
    n = element_count(shape)
    if flat.size != n:
        raise ValueError(
            f"size mismatch {n}!={flat.size}: shape {shape} needs {n} values,"
            f" got {flat.size}"
        )
    return flat.reshape(shape).copy()


def zeros(shape, dtype=np.float32) -> np.ndarray:
    return np.zeros(validate_shape(shape), dtype=dtype)


def _trailing_singleton_ok(a_shape, b_shape) -> bool:
    # b must equal a, or equal a with some trailing run of axes replaced by 1
    if len(a_shape) != len(b_shape):
        return False
    k = len(b_shape)
    while k > 0 and b_shape[k - 1] == 1:
        k -= 1
    return b_shape[:k] == a_shape[:k]


def ew_binary(kind: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise add/sub/mul; b may broadcast over a trailing-singleton suffix.

    Accepts b shaped like a, or like a with any suffix of axes replaced by 1
    (e.g. per-channel [C, 1, 1] against [C, H, W]).
    """
    if kind not in _EW_OPS:
        raise ValueError(f"unknown elementwise op {kind!r}")
    a = np.asarray(a)
    b = np.asarray(b)
    if not _trailing_singleton_ok(a.shape, b.shape):
        raise ValueError(f"incompatible shapes {a.shape} vs {b.shape}")
    out = _EW_OPS[kind](a, b)
    finite_check(kind, out)
    return out


def reduce_sum(t: np.ndarray, axes, keep: bool = False) -> np.ndarray:
    """Sum over `axes`, accumulating each output in ascending flat-index order.

    The strictly sequential accumulation (via cumsum over the gathered
    contributors) makes results independent of how callers partition work
    over output elements, which the reproducibility guarantees rely on.
    """
    t = np.asarray(t)
    axes = sorted({int(ax) for ax in axes})
    for ax in axes:
        if ax < 0 or ax >= t.ndim:
            raise ValueError(f"axis {ax} out of range for rank {t.ndim}")
    if not axes:
        return t.copy()
    axset = set(axes)
    kept = [i for i in range(t.ndim) if i not in axset]
    moved = np.moveaxis(t, axes, range(len(kept), t.ndim))
    flat = moved.reshape(tuple(t.shape[i] for i in kept) + (-1,))
    out = np.cumsum(flat, axis=-1, dtype=t.dtype)[..., -1]
    if keep:
        out = out.reshape(tuple(1 if i in axset else t.shape[i] for i in range(t.ndim)))
    return out


def finite_check(label: str, *arrays) -> None:
    if not DEBUG_FINITE:
        return
    for arr in arrays:
        if arr is not None and not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite values after {label}")
