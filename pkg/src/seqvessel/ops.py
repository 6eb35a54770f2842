"""Differentiable layer primitives.

Every operation is a `*_forward` returning `(output, cache)` plus a
`*_backward(cache, grad_out)` returning gradients for the inputs and
parameters in declaration order.  Forward passes never mutate their inputs,
caches hold exactly what the backward pass needs, and all routines follow
the dtype of their inputs so the gradient checker can rerun them in float64.

Convolutions are direct cross-correlations (no kernel flip) with symmetric
zero padding, computed by decomposition over kernel offsets: for each tap a
strided slice of the padded input is contracted against the corresponding
weight plane.  That keeps the inner loops in BLAS, needs no im2col buffer,
and makes the backward pass an exact transpose of the forward arithmetic.
"""

import itertools

import numpy as np

from .tensor import finite_check

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1


# ---------------------------------------------------------------------------
# convolution (shared n-dimensional core, 2d and 3d wrappers)

def _conv_geometry(x_shape, w_shape, stride, padding):
    n_spatial = len(x_shape) - 2
    if len(w_shape) != n_spatial + 2:
        raise ValueError(f"kernel rank {len(w_shape)} does not match input rank {len(x_shape)}")
    if w_shape[1] != x_shape[1]:
        raise ValueError(f"channel mismatch: input has {x_shape[1]}, kernel expects {w_shape[1]}")
    stride = tuple(int(s) for s in stride)
    padding = tuple(int(p) for p in padding)
    if len(stride) != n_spatial or len(padding) != n_spatial:
        raise ValueError("stride/padding arity does not match spatial rank")
    if any(s < 1 for s in stride) or any(k < 1 for k in w_shape[2:]) or any(p < 0 for p in padding):
        raise ValueError(f"invalid stride {stride} / kernel {w_shape[2:]} / padding {padding}")
    out = []
    for axis, (n, k, s, p) in enumerate(zip(x_shape[2:], w_shape[2:], stride, padding)):
        extent = (n + 2 * p - k) // s + 1
        if extent < 1:
            raise ValueError(
                f"spatial axis {axis}: extent {n} with kernel {k}, stride {s}, pad {p}"
                " leaves no output"
            )
        out.append(extent)
    return tuple(out), stride, padding


def _tap_slices(offsets, stride, out_extent):
    return tuple(
        slice(off, off + s * (o - 1) + 1, s)
        for off, s, o in zip(offsets, stride, out_extent)
    )


def conv_forward(x, w, b, stride, padding):
    """Cross-correlation plus bias over any number of spatial axes."""
    out_extent, stride, padding = _conv_geometry(x.shape, w.shape, stride, padding)
    if b.shape != (w.shape[0],):
        raise ValueError(f"bias shape {b.shape} does not match {w.shape[0]} output channels")
    pad_width = ((0, 0), (0, 0)) + tuple((p, p) for p in padding)
    xp = np.pad(x, pad_width) if any(padding) else x
    lead = (slice(None), slice(None))
    acc = None
    for offsets in itertools.product(*[range(k) for k in w.shape[2:]]):
        xs = xp[lead + _tap_slices(offsets, stride, out_extent)]
        term = np.tensordot(w[lead + offsets], xs, axes=([1], [1]))  # [Cout, N, *out]
        acc = term if acc is None else acc + term
    y = np.moveaxis(acc, 0, 1) + b.reshape((1, -1) + (1,) * len(out_extent))
    finite_check("conv", y)
    cache = (xp, w, stride, padding, x.shape, out_extent)
    return y, cache


def conv_backward(cache, gy):
    xp, w, stride, padding, x_shape, out_extent = cache
    n_spatial = len(out_extent)
    reduce_axes = (0,) + tuple(range(2, 2 + n_spatial))
    gb = gy.sum(axis=reduce_axes)
    gw = np.empty_like(w)
    gxp = np.zeros_like(xp)
    lead = (slice(None), slice(None))
    td_axes = ([0] + list(range(2, 2 + n_spatial)), [0] + list(range(2, 2 + n_spatial)))
    for offsets in itertools.product(*[range(k) for k in w.shape[2:]]):
        sl = _tap_slices(offsets, stride, out_extent)
        xs = xp[lead + sl]
        gw[lead + offsets] = np.tensordot(gy, xs, axes=td_axes)
        spread = np.tensordot(gy, w[lead + offsets], axes=([1], [0]))  # [N, *out, Cin]
        gxp[lead + sl] += np.moveaxis(spread, -1, 1)
    if any(padding):
        crop = (slice(None), slice(None)) + tuple(
            slice(p, p + n) for p, n in zip(padding, x_shape[2:])
        )
        gx = gxp[crop].copy()
    else:
        gx = gxp
    finite_check("conv_backward", gx, gw, gb)
    return gx, gw, gb


def conv2d_forward(x, w, b, stride=(1, 1), padding=(0, 0)):
    if x.ndim != 4:
        raise ValueError(f"conv2d expects [N, C, H, W], got rank {x.ndim}")
    return conv_forward(x, w, b, stride, padding)


def conv2d_backward(cache, gy):
    return conv_backward(cache, gy)


def conv3d_forward(x, w, b, stride=(1, 1, 1), padding=(0, 0, 0)):
    if x.ndim != 5:
        raise ValueError(f"conv3d expects [N, C, T, H, W], got rank {x.ndim}")
    return conv_forward(x, w, b, stride, padding)


def conv3d_backward(cache, gy):
    return conv_backward(cache, gy)


# ---------------------------------------------------------------------------
# batch normalization

def batch_norm_forward(x, gamma, beta, mode, running=None,
                       momentum=BN_MOMENTUM, eps=BN_EPSILON):
    """Normalize per channel over all non-channel axes.

    Train mode uses biased batch statistics and returns the updated running
    pair `(1 - momentum) * running + momentum * batch`; infer mode requires
    an initialised running pair and raises otherwise.  The update is returned
    rather than applied so the caller decides when to commit it.
    """
    if x.ndim not in (4, 5):
        raise ValueError(f"batch_norm expects rank 4 or 5 input, got {x.ndim}")
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    if mode == "train":
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        new_running = None
        if running is not None:
            rm, rv = running
            new_running = ((1.0 - momentum) * rm + momentum * mean,
                           (1.0 - momentum) * rv + momentum * var)
    else:
        if running is None:
            raise ValueError("batch_norm inference requires initialised running statistics")
        mean, var = running
        new_running = running
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(bshape)) * inv.reshape(bshape)
    y = gamma.reshape(bshape) * xhat + beta.reshape(bshape)
    finite_check("batch_norm", y)
    cache = (xhat, inv, gamma, axes, bshape, mode)
    return y, cache, new_running


def batch_norm_backward(cache, gy):
    xhat, inv, gamma, axes, bshape, mode = cache
    dbeta = gy.sum(axis=axes)
    dgamma = (gy * xhat).sum(axis=axes)
    dxhat = gy * gamma.reshape(bshape)
    if mode == "infer":
        dx = dxhat * inv.reshape(bshape)
    else:
        m = 1
        for ax in axes:
            m *= xhat.shape[ax]
        dx = (inv.reshape(bshape) / m) * (
            m * dxhat
            - dxhat.sum(axis=axes, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
        )
    finite_check("batch_norm_backward", dx, dgamma, dbeta)
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# activations

def relu_forward(x):
    # derivative at exactly 0 is defined as 0 (strict > in the mask)
    return np.maximum(x, 0), x > 0


def relu_backward(cache, gy):
    return gy * cache


def sigmoid_forward(x):
    """Numerically stable logistic function; no overflow for any finite x."""
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    finite_check("sigmoid", y)
    return y, y


def sigmoid_backward(cache, gy):
    y = cache
    return gy * y * (1.0 - y)


# ---------------------------------------------------------------------------
# pooling / resampling

def global_avg_pool_forward(x):
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects [N, C, H, W], got rank {x.ndim}")
    return x.mean(axis=(2, 3), keepdims=True), x.shape


def global_avg_pool_backward(cache, gy):
    shape = cache
    return np.broadcast_to(gy / (shape[2] * shape[3]), shape).copy()


def _upsample2x_matrix(n, dtype):
    # half-pixel centers: output i samples input at (i + 0.5)/2 - 0.5, edge clamped
    src = (np.arange(2 * n, dtype=np.float64) + 0.5) / 2.0 - 0.5
    i0 = np.floor(src).astype(int)
    frac = src - i0
    lo = np.clip(i0, 0, n - 1)
    hi = np.clip(i0 + 1, 0, n - 1)
    a = np.zeros((2 * n, n), dtype=np.float64)
    rows = np.arange(2 * n)
    np.add.at(a, (rows, lo), 1.0 - frac)
    np.add.at(a, (rows, hi), frac)
    return a.astype(dtype)


def bilinear_upsample2x_forward(x):
    """Double both spatial extents with half-pixel-center bilinear sampling."""
    if x.ndim != 4:
        raise ValueError(f"bilinear_upsample2x expects [N, C, H, W], got rank {x.ndim}")
    ah = _upsample2x_matrix(x.shape[2], x.dtype)
    aw = _upsample2x_matrix(x.shape[3], x.dtype)
    y = np.einsum("ph,nchw,qw->ncpq", ah, x, aw, optimize=True)
    finite_check("bilinear_upsample2x", y)
    return y, (ah, aw)


def bilinear_upsample2x_backward(cache, gy):
    ah, aw = cache
    return np.einsum("ph,ncpq,qw->nchw", ah, gy, aw, optimize=True)


# ---------------------------------------------------------------------------
# regularization / structure

def spatial_dropout_forward(x, rate, mode, rng=None):
    """Zero whole channels with probability `rate`, scaling survivors (inverted)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "infer" or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("train-mode dropout needs an explicit generator")
    keep = rng.random(x.shape[:2]) >= rate
    mask = keep.astype(x.dtype) / np.asarray(1.0 - rate, dtype=x.dtype)
    mask = mask.reshape(x.shape[:2] + (1,) * (x.ndim - 2))
    return x * mask, mask


def spatial_dropout_backward(cache, gy):
    return gy if cache is None else gy * cache


def concat_channels_forward(a, b):
    if a.ndim != b.ndim or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat mismatch: {a.shape} vs {b.shape}")
    if a.shape[1] < 1 or b.shape[1] < 1:
        raise ValueError("concat requires at least one channel on each side")
    return np.concatenate([a, b], axis=1), a.shape[1]


def concat_channels_backward(cache, gy):
    c1 = cache
    return gy[:, :c1].copy(), gy[:, c1:].copy()
