"""Finite-difference verification of every analytic backward pass.

For each registered target the harness samples a small random configuration
(dims <= 6, channels <= 3), evaluates the analytic gradient of a scalar
objective, and compares against central differences in double precision
with h = 1e-3 relative to parameter scale.  A target PASSes when the worst
relative error across trials stays below 1e-4.

The scalar objective for layer ops is sum(r * output) with a fixed random r,
which keeps gradients well scaled; losses are checked directly.  The
end-to-end target differentiates dice(forward(window)) through a small
network, re-seeding the forward generator per evaluation so dropout masks
(if any) stay fixed under perturbation.

Finite differences are only valid where the function is smooth, so a
coordinate is skipped when perturbing it flips any ReLU activation pattern
(the masks are fingerprinted from the op caches).  The piecewise-linear
kink would otherwise make the two-sided difference meaningless there; the
analytic side deliberately defines the derivative at exactly 0 as 0.
"""

from dataclasses import dataclass

import numpy as np

from . import ops
from .losses import ce_loss, dice_loss
from .network import (NetworkConfig, build, channel_attention_forward,
                      channel_attention_backward, residual_block_forward,
                      residual_block_backward, temporal_fusion_forward,
                      temporal_fusion_backward)
from .rng import derive

TOLERANCE = 1e-4
H_REL = 1e-3
# Composite graphs route batch-normalized values into ReLUs, so every
# coordinate couples to every pre-activation; a smaller step keeps the
# differencing on one side of the kinks while staying far above float64
# noise (truncation ~1e-10, roundoff ~1e-11 at unit loss scale).
H_REL_COMPOSITE = 1e-5


def _mask_fingerprint(obj) -> bytes:
    """Concatenate every boolean array (ReLU mask) found in an op cache."""
    if isinstance(obj, np.ndarray):
        return np.packbits(obj).tobytes() if obj.dtype == np.bool_ else b""
    if isinstance(obj, (tuple, list)):
        return b"".join(_mask_fingerprint(o) for o in obj)
    if isinstance(obj, dict):
        return b"".join(_mask_fingerprint(obj[k]) for k in sorted(obj))
    return b""


def numeric_grad(f, arr, h_rel=H_REL):
    """Central-difference gradient of f() w.r.t. every entry of arr.

    f() returns (value, fingerprint); entries whose perturbation changes the
    fingerprint (an activation-pattern flip) are unusable for differencing
    and come back as NaN, to be excluded from the comparison.
    """
    g = np.zeros(arr.shape, dtype=np.float64)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = arr[idx]
        h = h_rel * max(1.0, abs(float(orig)))
        arr[idx] = orig + h
        fp, pp = f()
        arr[idx] = orig - h
        fm, pm = f()
        arr[idx] = orig
        g[idx] = (fp - fm) / (2.0 * h) if pp == pm else np.nan
    return g


def max_rel_error(analytic, numeric):
    """Worst |a - n| / max(|a|, |n|, 1e-2); the floor makes near-zero pairs
    compare at an effective absolute tolerance of 1e-6.  NaNs in the numeric
    side mark kink-invalidated entries and are ignored; at least 80% of the
    entries must remain comparable."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    valid = ~np.isnan(numeric)
    if np.count_nonzero(valid) < 0.8 * numeric.size:
        raise RuntimeError("too many kink-invalidated coordinates to compare")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-2)
    err = np.abs(analytic - numeric) / denom
    return float(np.max(err[valid])) if valid.any() else 0.0


def _check_op(forward, arrays, rng=None, h_rel=H_REL):
    """Compare analytic grads of sum(r * forward(arrays)) against FD."""
    y, cache, backward = forward()
    r = rng.uniform(-1.0, 1.0, size=y.shape)

    def objective():
        out, cache_now, _ = forward()
        return float((r * out).sum()), _mask_fingerprint(cache_now)

    analytic = backward(cache, r)
    worst = 0.0
    for arr, grad in zip(arrays, analytic):
        worst = max(worst, max_rel_error(grad, numeric_grad(objective, arr, h_rel)))
    return worst


def _rand(rng, *shape):
    return rng.uniform(-1.0, 1.0, size=shape)


def _dims(rng, lo=1, hi=6):
    return int(rng.integers(lo, hi + 1))


# ---------------------------------------------------------------------------
# per-target trial functions: each returns the worst relative error

def _trial_conv(rng, spatial):
    cin, cout = _dims(rng, 1, 3), _dims(rng, 1, 3)
    k = int(rng.integers(1, 4))
    stride = (int(rng.integers(1, 3)),) * spatial
    pad = (int(rng.integers(0, 2)),) * spatial
    extent = tuple(max(_dims(rng, 2, 6), k) for _ in range(spatial))
    n = _dims(rng, 1, 2)
    x = _rand(rng, n, cin, *extent)
    w = _rand(rng, cout, cin, *((k,) * spatial))
    b = _rand(rng, cout)

    def forward():
        y, cache = ops.conv_forward(x, w, b, stride, pad)
        return y, cache, ops.conv_backward
    return _check_op(forward, [x, w, b], rng=rng)


def _trial_batch_norm(rng):
    rank = int(rng.integers(4, 6))
    c = _dims(rng, 1, 3)
    shape = (_dims(rng, 2, 3), c) + tuple(_dims(rng, 2, 5) for _ in range(rank - 2))
    x = _rand(rng, *shape)
    gamma = 0.5 + rng.random(c)
    beta = _rand(rng, c)
    mode = "train" if rng.random() < 0.7 else "infer"
    running = (rng.random(c) * 0.5, 0.5 + rng.random(c))

    def forward():
        y, cache, _ = ops.batch_norm_forward(x, gamma, beta, mode, running)
        return y, cache, ops.batch_norm_backward
    return _check_op(forward, [x, gamma, beta], rng=rng)


def _trial_relu(rng):
    x = _rand(rng, _dims(rng, 1, 2), _dims(rng, 1, 3), _dims(rng), _dims(rng))
    x = np.where(np.abs(x) < 0.05, x + 0.1 * np.sign(x) + 0.05, x)  # stay off the kink

    def forward():
        y, cache = ops.relu_forward(x)
        return y, cache, lambda c, g: (ops.relu_backward(c, g),)
    return _check_op(forward, [x], rng=rng)


def _trial_sigmoid(rng):
    x = 3.0 * _rand(rng, _dims(rng, 1, 2), _dims(rng, 1, 3), _dims(rng), _dims(rng))

    def forward():
        y, cache = ops.sigmoid_forward(x)
        return y, cache, lambda c, g: (ops.sigmoid_backward(c, g),)
    return _check_op(forward, [x], rng=rng)


def _trial_gap(rng):
    x = _rand(rng, _dims(rng, 1, 2), _dims(rng, 1, 3), _dims(rng), _dims(rng))

    def forward():
        y, cache = ops.global_avg_pool_forward(x)
        return y, cache, lambda c, g: (ops.global_avg_pool_backward(c, g),)
    return _check_op(forward, [x], rng=rng)


def _trial_upsample(rng):
    x = _rand(rng, _dims(rng, 1, 2), _dims(rng, 1, 3), _dims(rng), _dims(rng))

    def forward():
        y, cache = ops.bilinear_upsample2x_forward(x)
        return y, cache, lambda c, g: (ops.bilinear_upsample2x_backward(c, g),)
    return _check_op(forward, [x], rng=rng)


def _trial_residual_block(rng, spatial):
    c = _dims(rng, 1, 3)
    extent = tuple(_dims(rng, 3, 5) for _ in range(spatial))
    x = _rand(rng, _dims(rng, 1, 2), c, *extent)
    kshape = (3,) * spatial
    p = {
        "w1": 0.4 * _rand(rng, c, c, *kshape), "b1": 0.2 * _rand(rng, c),
        "gamma1": 0.5 + rng.random(c), "beta1": 0.2 * _rand(rng, c),
        "w2": 0.4 * _rand(rng, c, c, *kshape), "b2": 0.2 * _rand(rng, c),
        "gamma2": 0.5 + rng.random(c), "beta2": 0.2 * _rand(rng, c),
    }
    keys = sorted(p)

    def forward():
        y, cache, _ = residual_block_forward(x, p, "train")
        def backward(cache, g):
            gx, grads = residual_block_backward(cache, g)
            return (gx,) + tuple(grads[k] for k in keys)
        return y, cache, backward
    return _check_op(forward, [x] + [p[k] for k in keys], rng=rng, h_rel=H_REL_COMPOSITE)


def _trial_temporal_fusion(rng):
    c = _dims(rng, 1, 3)
    t = 4
    hw = (_dims(rng, 2, 5), _dims(rng, 2, 5))
    x = _rand(rng, _dims(rng, 1, 2), c, t, *hw)
    depthwise = rng.random() < 0.3
    w = _rand(rng, c, t) if depthwise else _rand(rng, c, c, t, 1, 1)
    b = 0.2 * _rand(rng, c)

    def forward():
        y, cache = temporal_fusion_forward(x, w, b, depthwise)
        return y, cache, temporal_fusion_backward
    return _check_op(forward, [x, w, b], rng=rng)


def _trial_channel_attention(rng):
    c = _dims(rng, 1, 3)
    hw = (_dims(rng, 2, 5), _dims(rng, 2, 5))
    n = _dims(rng, 1, 2)
    low = _rand(rng, n, c, *hw)
    high = _rand(rng, n, c, *hw)
    w1 = _rand(rng, c, 2 * c, 1, 1)
    b1 = 0.2 * _rand(rng, c)
    w2 = _rand(rng, c, c, 1, 1)
    b2 = 0.2 * _rand(rng, c)

    def forward():
        y, _, cache = channel_attention_forward(low, high, w1, b1, w2, b2)
        return y, cache, channel_attention_backward
    return _check_op(forward, [low, high, w1, b1, w2, b2], rng=rng)


def _trial_loss(rng, fn):
    n = int(rng.integers(8, 65))
    p = rng.uniform(0.05, 0.95, size=n)
    y = (rng.random(n) < 0.4).astype(np.float64)
    _, analytic = fn(p, y)
    numeric = numeric_grad(lambda: (fn(p, y)[0], b""), p, h_rel=1e-5)
    return max_rel_error(analytic, numeric)


def _trial_end_to_end(rng):
    config = NetworkConfig(stages=2, base_channels=2, window=4, input_hw=(16, 16),
                           dropout_rate=0.0)
    seed = int(rng.integers(0, 2 ** 31))
    net, store = build(config, seed, dtype=np.float64)
    x = rng.random((1, 1, 4, 16, 16))
    y = (rng.random((16, 16)) < 0.3).astype(np.float64)

    def loss_value():
        probs, cache = net.forward_batch(x, store, "train", derive(seed, "gc"))
        return dice_loss(probs[0, 0], y)[0], _mask_fingerprint(cache)

    probs, cache = net.forward_batch(x, store, "train", derive(seed, "gc"))
    _, gp = dice_loss(probs[0, 0], y)
    store.zero_grads()
    net.backward(cache, store, gp[None, None])

    names = store.names()
    worst = 0.0
    checked = 0
    while checked < 25:
        name = names[int(rng.integers(0, len(names)))]
        p = store.get(name)
        flat = int(rng.integers(0, p.value.size))
        idx = np.unravel_index(flat, p.value.shape)
        analytic = float(p.grad[idx])
        orig = p.value[idx]
        h = H_REL_COMPOSITE * max(1.0, abs(float(orig)))
        p.value[idx] = orig + h
        fp, patp = loss_value()
        p.value[idx] = orig - h
        fm, patm = loss_value()
        p.value[idx] = orig
        if patp != patm:
            continue  # kink crossed; this coordinate cannot be differenced
        numeric = (fp - fm) / (2.0 * h)
        worst = max(worst, max_rel_error(np.array([analytic]), np.array([numeric])))
        checked += 1
    return worst


TARGETS = {
    "conv2d": lambda rng: _trial_conv(rng, 2),
    "conv3d": lambda rng: _trial_conv(rng, 3),
    "batch_norm": _trial_batch_norm,
    "relu": _trial_relu,
    "sigmoid": _trial_sigmoid,
    "global_avg_pool": _trial_gap,
    "bilinear_upsample2x": _trial_upsample,
    "residual_block_2d": lambda rng: _trial_residual_block(rng, 2),
    "residual_block_3d": lambda rng: _trial_residual_block(rng, 3),
    "temporal_fusion": _trial_temporal_fusion,
    "channel_attention": _trial_channel_attention,
    "dice_loss": lambda rng: _trial_loss(rng, dice_loss),
    "ce_loss": lambda rng: _trial_loss(rng, ce_loss),
    "end_to_end": _trial_end_to_end,
}


@dataclass
class GradcheckReport:
    target: str
    trials: int
    max_rel_err: float
    passed: bool

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.target}: max rel err {self.max_rel_err:.3e} over {self.trials} trials"


def run(target: str, trials: int = 10, seed: int = 0) -> GradcheckReport:
    if target not in TARGETS:
        raise ValueError(f"unknown gradcheck target {target!r}; known: {sorted(TARGETS)}")
    if target == "end_to_end":
        trials = min(trials, 2)  # each trial already samples 25 parameters
    worst = 0.0
    for trial in range(trials):
        rng = derive(seed, "gradcheck", target, trial)
        worst = max(worst, TARGETS[target](rng))
    return GradcheckReport(target=target, trials=trials, max_rel_err=worst,
                           passed=worst < TOLERANCE)


def run_all(trials: int = 10, seed: int = 0):
    return [run(t, trials, seed) for t in TARGETS]
