"""Training objectives with analytic gradients.

Both losses score one whole mask at a time: the caller averages over a batch
if it has one.  Predictions are probabilities in [0, 1]; ground truth must be
exactly binary.
"""

import numpy as np

from .tensor import reduce_sum

DICE_EPSILON = 1e-7
CE_CLAMP = 1e-7


def _check_pair(p, y):
    p = np.asarray(p)
    y = np.asarray(y)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: predictions {p.shape} vs targets {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("ground truth must be binary (0/1)")
    return p, y


def _total(t):
    return float(reduce_sum(t, range(t.ndim)))


def dice_loss(p, y, epsilon=DICE_EPSILON):
    """Overlap loss L = -(2*sum(p*y) + eps) / (sum(p) + sum(y) + eps).

    Ranges over [-1, 0]; exactly -1 when p equals a binary y (including the
    all-background mask, where the epsilon keeps the ratio at 1).  Returns
    (loss, dL/dp).
    """
    p, y = _check_pair(p, y)
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    a = 2.0 * _total(p * y) + epsilon
    b = _total(p) + _total(y) + epsilon
    yd = y.astype(p.dtype, copy=False)
    grad = -(2.0 * b * yd - a) / (b * b)
    return -a / b, grad


def ce_loss(p, y, clamp=CE_CLAMP):
    """Mean binary cross entropy, probabilities clamped to [clamp, 1 - clamp].

    Returns (loss, dL/dp); the gradient is zero where the clamp is active.
    """
    p, y = _check_pair(p, y)
    pc = np.clip(p, clamp, 1.0 - clamp)
    yd = y.astype(pc.dtype, copy=False)
    n = p.size
    terms = yd * np.log(pc) + (1.0 - yd) * np.log1p(-pc)
    loss = -_total(terms) / n
    grad = -(yd / pc - (1.0 - yd) / (1.0 - pc)) / n
    grad = np.where((p < clamp) | (p > 1.0 - clamp), np.zeros_like(grad), grad)
    return loss, grad


LOSSES = {"dice": dice_loss, "ce": ce_loss}


def batch_loss(kind, probs, masks):
    """Average a per-mask loss over a batch.

    probs: [N, 1, H, W] probabilities; masks: [N, H, W] binary.  Returns
    (mean loss, gradient with the probs layout).
    """
    if kind not in LOSSES:
        raise ValueError(f"unknown loss {kind!r}")
    fn = LOSSES[kind]
    n = probs.shape[0]
    grads = np.empty_like(probs)
    total = 0.0
    for i in range(n):
        loss_i, g_i = fn(probs[i, 0], masks[i])
        total += loss_i
        grads[i, 0] = g_i / n
    return total / n, grads
