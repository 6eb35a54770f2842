"""Sequential vessel segmentation network.

The model consumes a short window of consecutive frames and predicts the
vessel probability map of the window's target frame.  A 3D (2D+t) residual
encoder extracts temporal-spatial features at halving resolutions; each
encoder stage output is collapsed along time by a learned temporal-fusion
convolution into a 2D skip map; the decoder upsamples bilinearly, reduces
channels with 1x1 convolutions, re-weights each skip with a channel
attention block, refines with 2D residual blocks, and ends in a 1x1
convolution plus sigmoid.

Forward passes record a cache; `Network.backward` replays it in reverse and
accumulates parameter gradients into the store.  Everything is expressed
with the explicit forward/backward pairs from `ops`, so each piece can be
checked against finite differences in isolation.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .rng import derive
from .tensor import ew_binary, finite_check


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture hyper-parameters.

    Channel width at stage s is min(base_channels * 2**(s-1), channel_cap).
    Stage 1 keeps full resolution; every later encoder stage halves H and W
    with a spatially strided convolution, so input_hw must be divisible by
    2**(stages-1).  The temporal extent stays `window` through the whole
    encoder (temporal stride 1, symmetric temporal padding).
    """

    stages: int = 7
    base_channels: int = 8
    window: int = 4
    input_hw: tuple[int, int] = (512, 512)
    dropout_rate: float = 0.5
    channel_cap: int = 512
    kernel_size: int = 3
    encoder: str = "3d"          # "3d" (temporal) or "2d" (frames as channels)
    attention: bool = True       # channel attention blocks in the decoder
    fusion_depthwise: bool = False  # per-channel temporal fusion instead of channel-mixing

    def channels(self, stage: int) -> int:
        return min(self.base_channels * 2 ** (stage - 1), self.channel_cap)

    @property
    def target_index(self) -> int:
        return self.window // 2

    def validate(self):
        if self.stages < 2:
            raise ValueError("need at least 2 stages")
        if self.base_channels < 1 or self.channel_cap < 1:
            raise ValueError("channel counts must be positive")
        if self.window < 2:
            raise ValueError("window must cover at least 2 frames")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd so padding preserves extent")
        if self.encoder not in ("3d", "2d"):
            raise ValueError(f"unknown encoder kind {self.encoder!r}")
        h, w = self.input_hw
        div = 2 ** (self.stages - 1)
        if h % div or w % div:
            raise ValueError(
                f"input {h}x{w} must be divisible by {div} so upsampling re-aligns"
                " with the skip maps"
            )


@dataclass
class FrameWindow:
    """One network input: `frames` is [T, H, W] with intensities in [0, 1]."""

    frames: np.ndarray
    target_index: int = 2

    def validate(self, config: NetworkConfig):
        if self.frames.ndim != 3:
            raise ValueError(f"window frames must be [T, H, W], got {self.frames.shape}")
        t, h, w = self.frames.shape
        if t != config.window:
            raise ValueError(f"window length {t} != configured {config.window}")
        if (h, w) != tuple(config.input_hw):
            raise ValueError(f"window size {(h, w)} != configured {config.input_hw}")
        if self.target_index != config.target_index:
            raise ValueError(
                f"target index {self.target_index} != configured {config.target_index}"
            )


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    momentum: np.ndarray


class ParameterStore:
    """Named learnable tensors with gradient and momentum slots.

    Iteration is always in lexicographic name order.  `buffers` holds
    non-learnable state (batch-norm running statistics and the update
    counter); buffers are checkpointed but never touched by the optimizer.
    """

    def __init__(self):
        self._params: dict[str, Param] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.grads_populated = False

    def add(self, name: str, value: np.ndarray):
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._params[name] = Param(value, np.zeros_like(value), np.zeros_like(value))

    def add_buffer(self, name: str, value: np.ndarray):
        if name in self.buffers:
            raise ValueError(f"duplicate buffer name {name!r}")
        self.buffers[name] = value

    def names(self):
        return sorted(self._params)

    def __contains__(self, name):
        return name in self._params

    def get(self, name: str) -> Param:
        return self._params[name]

    def value(self, name: str) -> np.ndarray:
        return self._params[name].value

    def add_grad(self, name: str, g: np.ndarray):
        self._params[name].grad += g

    def zero_grads(self):
        for p in self._params.values():
            p.grad[...] = 0.0
        self.grads_populated = False

    def total_parameters(self) -> int:
        return sum(p.value.size for p in self._params.values())


# ---------------------------------------------------------------------------
# parameter inventory

def declare_parameters(config: NetworkConfig):
    """Yield (name, shape, init) for every learnable tensor, in build order."""
    k = config.kernel_size
    specs = []

    def conv(name, shape):
        specs.append((f"{name}.weight", shape, "conv"))
        specs.append((f"{name}.bias", (shape[0],), "zero"))

    def bn(name, c):
        specs.append((f"{name}.gamma", (c,), "one"))
        specs.append((f"{name}.beta", (c,), "zero"))

    def block(name, c, spatial_rank):
        kshape = (k,) * spatial_rank
        conv(f"{name}.conv1", (c, c) + kshape)
        bn(f"{name}.bn1", c)
        conv(f"{name}.conv2", (c, c) + kshape)
        bn(f"{name}.bn2", c)

    three_d = config.encoder == "3d"
    c_prev = 1 if three_d else config.window
    for s in range(1, config.stages + 1):
        c = config.channels(s)
        kshape = (k, k, k) if three_d else (k, k)
        conv(f"enc.s{s}.conv", (c, c_prev) + kshape)
        bn(f"enc.s{s}.bn", c)
        if s < config.stages:
            block(f"enc.s{s}.block", c, 3 if three_d else 2)
        if three_d:
            if config.fusion_depthwise:
                specs.append((f"fuse.s{s}.weight", (c, config.window), "conv"))
                specs.append((f"fuse.s{s}.bias", (c,), "zero"))
            else:
                conv(f"fuse.s{s}", (c, c, config.window, 1, 1))
        c_prev = c
    for s in range(config.stages - 1, 0, -1):
        c = config.channels(s)
        c_hi = config.channels(s + 1)
        if config.attention:
            # channel-halving 1x1, then the attention block merges low/high
            conv(f"dec.s{s}.reduce", (c, c_hi, 1, 1))
            conv(f"dec.s{s}.att.conv1", (c, 2 * c, 1, 1))
            conv(f"dec.s{s}.att.conv2", (c, c, 1, 1))
        else:
            # attention removed: fall back to the plain encoder-decoder merge,
            # concatenating skip and upsampled features into a learned 1x1
            conv(f"dec.s{s}.reduce", (c, c + c_hi, 1, 1))
        block(f"dec.s{s}.block", c, 2)
    conv("head", (1, config.channels(1), 1, 1))
    return specs


def declare_buffers(config: NetworkConfig):
    names = []
    for name, _, kind in declare_parameters(config):
        if name.endswith(".gamma"):
            prefix = name[: -len(".gamma")]
            c = config.channels(int(prefix.split(".")[1][1:]))
            names.append((f"{prefix}.mean", (c,), 0.0))
            names.append((f"{prefix}.var", (c,), 1.0))
    names.append(("stats.updates", (1,), 0.0))
    return names


def build(config: NetworkConfig, seed: int, dtype=np.float32):
    """Create the network and a freshly initialised parameter store.

    Convolution weights use fan-in-scaled normal initialisation
    (std = sqrt(2 / fan_in)); biases start at zero, batch-norm scale at one.
    The same seed always yields a bit-identical store.
    """
    config.validate()
    store = ParameterStore()
    gen = derive(seed, "init")
    for name, shape, kind in declare_parameters(config):
        if kind == "conv":
            fan_in = int(np.prod(shape[1:]))
            value = gen.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
        elif kind == "zero":
            value = np.zeros(shape)
        else:
            value = np.ones(shape)
        store.add(name, np.ascontiguousarray(value, dtype=dtype))
    for name, shape, fill in declare_buffers(config):
        store.add_buffer(name, np.full(shape, fill, dtype=dtype))
    return Network(config), store


def param_count(config: NetworkConfig) -> int:
    """Total learnable scalar count for a configuration (no allocation)."""
    total = 0
    for _, shape, _ in declare_parameters(config):
        total += int(np.prod(shape))
    return total


def param_breakdown(config: NetworkConfig) -> dict[str, int]:
    out = {"conv_weights": 0, "conv_biases": 0, "bn": 0}
    for name, shape, kind in declare_parameters(config):
        size = int(np.prod(shape))
        if kind == "conv":
            out["conv_weights"] += size
        elif name.endswith(".bias"):
            out["conv_biases"] += size
        else:
            out["bn"] += size
    return out


# ---------------------------------------------------------------------------
# composite blocks (functional, so the gradient checker can drive them alone)

def residual_block_forward(x, p, mode, running1=None, running2=None,
                           momentum=ops.BN_MOMENTUM, eps=ops.BN_EPSILON):
    """Two conv+BN+ReLU layers with an additive shortcut, then a final ReLU.

    `p` maps w1/b1/gamma1/beta1/w2/b2/gamma2/beta2 (+wp/bp for a 1x1
    projection shortcut when channel counts differ; identity otherwise).
    Works on rank-4 and rank-5 inputs alike.
    """
    spatial = x.ndim - 2
    k = p["w1"].shape[-1]
    pad = (k // 2,) * spatial
    one = (1,) * spatial
    y, c1 = ops.conv_forward(x, p["w1"], p["b1"], one, pad)
    y, cb1, nr1 = ops.batch_norm_forward(y, p["gamma1"], p["beta1"], mode, running1,
                                         momentum, eps)
    y, cr1 = ops.relu_forward(y)
    y, c2 = ops.conv_forward(y, p["w2"], p["b2"], one, pad)
    y, cb2, nr2 = ops.batch_norm_forward(y, p["gamma2"], p["beta2"], mode, running2,
                                         momentum, eps)
    if "wp" in p:
        short, cp = ops.conv_forward(x, p["wp"], p["bp"], one, (0,) * spatial)
    else:
        if p["w1"].shape[0] != x.shape[1]:
            raise ValueError("identity shortcut needs matching channel counts")
        short, cp = x, None
    out, cr2 = ops.relu_forward(ew_binary("add", y, short))
    return out, (c1, cb1, cr1, c2, cb2, cr2, cp), (nr1, nr2)


def residual_block_backward(cache, gy):
    c1, cb1, cr1, c2, cb2, cr2, cp = cache
    g = ops.relu_backward(cr2, gy)
    grads = {}
    if cp is not None:
        g_short, grads["wp"], grads["bp"] = ops.conv_backward(cp, g)
    else:
        g_short = g
    g, grads["gamma2"], grads["beta2"] = ops.batch_norm_backward(cb2, g)
    g, grads["w2"], grads["b2"] = ops.conv_backward(c2, g)
    g = ops.relu_backward(cr1, g)
    g, grads["gamma1"], grads["beta1"] = ops.batch_norm_backward(cb1, g)
    g, grads["w1"], grads["b1"] = ops.conv_backward(c1, g)
    return g + g_short, grads


def temporal_fusion_forward(x, w, b, depthwise=False):
    """Collapse the temporal axis of [N, C, T, H, W] features into [N, C, H, W].

    Channel-mixing form: a full 3D convolution with a (T, 1, 1) kernel and no
    padding, then the singleton temporal axis is squeezed away.  Depthwise
    form: each channel keeps its own T-tap kernel, no cross-channel terms.
    """
    if x.ndim != 5:
        raise ValueError(f"temporal fusion expects [N, C, T, H, W], got rank {x.ndim}")
    if depthwise:
        if w.shape != (x.shape[1], x.shape[2]):
            raise ValueError(
                f"depthwise fusion kernel {w.shape} does not match"
                f" (C={x.shape[1]}, T={x.shape[2]})"
            )
        y = np.einsum("ct,ncthw->nchw", w, x, optimize=True) + b.reshape(1, -1, 1, 1)
        finite_check("temporal_fusion", y)
        return y, ("dw", x, w)
    if w.shape[2] != x.shape[2]:
        raise ValueError(
            f"temporal extent mismatch: features have T={x.shape[2]},"
            f" fusion kernel covers {w.shape[2]}"
        )
    y5, c = ops.conv3d_forward(x, w, b, stride=(1, 1, 1), padding=(0, 0, 0))
    return y5[:, :, 0], ("full", c)


def temporal_fusion_backward(cache, gy):
    kind = cache[0]
    if kind == "dw":
        _, x, w = cache
        gw = np.einsum("ncthw,nchw->ct", x, gy, optimize=True)
        gx = np.einsum("ct,nchw->ncthw", w, gy, optimize=True)
        gb = gy.sum(axis=(0, 2, 3))
        return gx, gw, gb
    return ops.conv3d_backward(cache[1], gy[:, :, None])


def channel_attention_forward(low, high, w1, b1, w2, b2):
    """Re-weight skip features per channel under decoder guidance.

    Concatenate [low, high], global-average-pool, squeeze 2C -> C with a 1x1
    conv + ReLU, expand C -> C with a 1x1 conv + sigmoid, then return
    attention * low + high.  Also returns the attention vector [N, C, 1, 1].
    """
    if low.shape != high.shape:
        raise ValueError(f"attention inputs must match: {low.shape} vs {high.shape}")
    x, c_cat = ops.concat_channels_forward(low, high)
    g, c_gap = ops.global_avg_pool_forward(x)
    h, c_c1 = ops.conv2d_forward(g, w1, b1)
    h, c_r = ops.relu_forward(h)
    a, c_c2 = ops.conv2d_forward(h, w2, b2)
    att, c_s = ops.sigmoid_forward(a)
    out = ew_binary("add", ew_binary("mul", low, att), high)
    cache = (c_cat, c_gap, c_c1, c_r, c_c2, c_s, low, att)
    return out, att, cache


def channel_attention_backward(cache, gy):
    c_cat, c_gap, c_c1, c_r, c_c2, c_s, low, att = cache
    g_att = (gy * low).sum(axis=(2, 3), keepdims=True)
    g_low = gy * att
    g_high = gy
    g = ops.sigmoid_backward(c_s, g_att)
    g, dw2, db2 = ops.conv2d_backward(c_c2, g)
    g = ops.relu_backward(c_r, g)
    g, dw1, db1 = ops.conv2d_backward(c_c1, g)
    g = ops.global_avg_pool_backward(c_gap, g)
    gl2, gh2 = ops.concat_channels_backward(c_cat, g)
    return g_low + gl2, g_high + gh2, dw1, db1, dw2, db2


# ---------------------------------------------------------------------------
# the assembled network

class Network:
    def __init__(self, config: NetworkConfig):
        config.validate()
        self.config = config

    # -- helpers ------------------------------------------------------------

    def _running(self, prefix, store, mode):
        initialised = float(store.buffers["stats.updates"][0]) > 0
        if mode == "infer" and not initialised:
            return None
        return (store.buffers[f"{prefix}.mean"], store.buffers[f"{prefix}.var"])

    def _bn(self, x, prefix, store, mode):
        y, cache, new_running = ops.batch_norm_forward(
            x, store.value(f"{prefix}.gamma"), store.value(f"{prefix}.beta"),
            mode, self._running(prefix, store, mode))
        if mode == "train" and new_running is not None:
            store.buffers[f"{prefix}.mean"] = new_running[0]
            store.buffers[f"{prefix}.var"] = new_running[1]
        return y, cache

    def _block_params(self, prefix, store):
        return {
            "w1": store.value(f"{prefix}.conv1.weight"),
            "b1": store.value(f"{prefix}.conv1.bias"),
            "gamma1": store.value(f"{prefix}.bn1.gamma"),
            "beta1": store.value(f"{prefix}.bn1.beta"),
            "w2": store.value(f"{prefix}.conv2.weight"),
            "b2": store.value(f"{prefix}.conv2.bias"),
            "gamma2": store.value(f"{prefix}.bn2.gamma"),
            "beta2": store.value(f"{prefix}.bn2.beta"),
        }

    def _block(self, x, prefix, store, mode):
        out, cache, new_running = residual_block_forward(
            x, self._block_params(prefix, store), mode,
            self._running(f"{prefix}.bn1", store, mode),
            self._running(f"{prefix}.bn2", store, mode))
        if mode == "train":
            for tag, nr in zip(("bn1", "bn2"), new_running):
                if nr is not None:
                    store.buffers[f"{prefix}.{tag}.mean"] = nr[0]
                    store.buffers[f"{prefix}.{tag}.var"] = nr[1]
        return out, cache

    def _add_block_grads(self, prefix, grads, store):
        name_map = {
            "w1": "conv1.weight", "b1": "conv1.bias",
            "gamma1": "bn1.gamma", "beta1": "bn1.beta",
            "w2": "conv2.weight", "b2": "conv2.bias",
            "gamma2": "bn2.gamma", "beta2": "bn2.beta",
        }
        for key, suffix in name_map.items():
            store.add_grad(f"{prefix}.{suffix}", grads[key])

    # -- public API ----------------------------------------------------------

    def forward(self, window: FrameWindow, store, mode="infer", rng=None):
        """Probability map [1, H, W] for one window."""
        window.validate(self.config)
        probs, _ = self.forward_batch(window.frames[None, None], store, mode, rng)
        return probs[0]

    def forward_batch(self, x, store, mode, rng=None):
        """Run a batch [N, 1, T, H, W]; returns (probs [N, 1, H, W], cache).

        Train mode uses batch statistics (committing updated running stats to
        the store) and applies channel dropout ahead of the last two encoder
        stages, drawing masks from `rng`.  Infer mode is a deterministic pure
        function of (x, store).
        """
        cfg = self.config
        if mode not in ("train", "infer"):
            raise ValueError(f"unknown mode {mode!r}")
        if x.ndim != 5 or x.shape[1] != 1:
            raise ValueError(f"expected input [N, 1, T, H, W], got {x.shape}")
        if x.shape[2] != cfg.window or x.shape[3:] != tuple(cfg.input_hw):
            raise ValueError(
                f"input geometry {x.shape[2:]} does not match configured"
                f" (T={cfg.window}, HW={cfg.input_hw})"
            )
        three_d = cfg.encoder == "3d"
        if not three_d:
            x = x[:, 0]  # window frames become input channels: [N, T, H, W]
        k = cfg.kernel_size
        pad3 = (k // 2,) * 3
        pad2 = (k // 2,) * 2

        stage_caches = []
        skips = []
        h = x
        for s in range(1, cfg.stages + 1):
            dc = None
            if mode == "train" and cfg.dropout_rate > 0 and s >= cfg.stages - 1:
                h, dc = ops.spatial_dropout_forward(h, cfg.dropout_rate, mode, rng)
            if three_d:
                stride = (1, 1, 1) if s == 1 else (1, 2, 2)
                h, cc = ops.conv3d_forward(
                    h, store.value(f"enc.s{s}.conv.weight"),
                    store.value(f"enc.s{s}.conv.bias"), stride, pad3)
            else:
                stride = (1, 1) if s == 1 else (2, 2)
                h, cc = ops.conv2d_forward(
                    h, store.value(f"enc.s{s}.conv.weight"),
                    store.value(f"enc.s{s}.conv.bias"), stride, pad2)
            h, cb = self._bn(h, f"enc.s{s}.bn", store, mode)
            h, cr = ops.relu_forward(h)
            cblk = None
            if s < cfg.stages:
                h, cblk = self._block(h, f"enc.s{s}.block", store, mode)
            skips.append(h)
            stage_caches.append((dc, cc, cb, cr, cblk))

        fuse_caches = []
        if three_d:
            fused = []
            for s, skip in enumerate(skips, start=1):
                f, fc = temporal_fusion_forward(
                    skip, store.value(f"fuse.s{s}.weight"),
                    store.value(f"fuse.s{s}.bias"), cfg.fusion_depthwise)
                fused.append(f)
                fuse_caches.append(fc)
        else:
            fused = skips

        hi = fused[-1]
        dec_caches = []
        for s in range(cfg.stages - 1, 0, -1):
            hi, cu = ops.bilinear_upsample2x_forward(hi)
            if cfg.attention:
                hi, cred = ops.conv2d_forward(
                    hi, store.value(f"dec.s{s}.reduce.weight"),
                    store.value(f"dec.s{s}.reduce.bias"))
                hi, _, catt = channel_attention_forward(
                    fused[s - 1], hi,
                    store.value(f"dec.s{s}.att.conv1.weight"),
                    store.value(f"dec.s{s}.att.conv1.bias"),
                    store.value(f"dec.s{s}.att.conv2.weight"),
                    store.value(f"dec.s{s}.att.conv2.bias"))
                ccat = None
            else:
                hi, ccat = ops.concat_channels_forward(fused[s - 1], hi)
                hi, cred = ops.conv2d_forward(
                    hi, store.value(f"dec.s{s}.reduce.weight"),
                    store.value(f"dec.s{s}.reduce.bias"))
                catt = None
            hi, cblk = self._block(hi, f"dec.s{s}.block", store, mode)
            dec_caches.append((cu, cred, catt, ccat, cblk))

        logits, chead = ops.conv2d_forward(
            hi, store.value("head.weight"), store.value("head.bias"))
        probs, csig = ops.sigmoid_forward(logits)
        finite_check("forward", probs)

        if mode == "train":
            store.buffers["stats.updates"][0] += 1
        cache = {
            "mode": mode,
            "stage": stage_caches,
            "fuse": fuse_caches,
            "dec": dec_caches,
            "head": chead,
            "sig": csig,
        }
        return probs, cache

    def backward(self, cache, store, grad_probs):
        """Accumulate parameter gradients for a recorded forward pass.

        Gradients add into the store (call `store.zero_grads()` or take an
        optimizer step between unrelated passes).  Returns the gradient with
        respect to the network input.
        """
        if not isinstance(cache, dict) or "sig" not in cache:
            raise ValueError("backward requires the cache of a matching forward pass")
        cfg = self.config
        three_d = cfg.encoder == "3d"

        g = ops.sigmoid_backward(cache["sig"], grad_probs)
        g, gw, gb = ops.conv2d_backward(cache["head"], g)
        store.add_grad("head.weight", gw)
        store.add_grad("head.bias", gb)

        fused_grads = [None] * cfg.stages
        for s, (cu, cred, catt, ccat, cblk) in zip(range(1, cfg.stages),
                                                   reversed(cache["dec"])):
            g, blk_grads = residual_block_backward(cblk, g)
            self._add_block_grads(f"dec.s{s}.block", blk_grads, store)
            if catt is not None:
                g_low, g, dw1, db1, dw2, db2 = channel_attention_backward(catt, g)
                store.add_grad(f"dec.s{s}.att.conv1.weight", dw1)
                store.add_grad(f"dec.s{s}.att.conv1.bias", db1)
                store.add_grad(f"dec.s{s}.att.conv2.weight", dw2)
                store.add_grad(f"dec.s{s}.att.conv2.bias", db2)
                fused_grads[s - 1] = g_low
                g, gw, gb = ops.conv2d_backward(cred, g)
            else:
                g, gw, gb = ops.conv2d_backward(cred, g)
                g_low, g = ops.concat_channels_backward(ccat, g)
                fused_grads[s - 1] = g_low
            store.add_grad(f"dec.s{s}.reduce.weight", gw)
            store.add_grad(f"dec.s{s}.reduce.bias", gb)
            g = ops.bilinear_upsample2x_backward(cu, g)
        fused_grads[cfg.stages - 1] = g

        if three_d:
            skip_grads = []
            for s in range(1, cfg.stages + 1):
                gx, gw, gb = temporal_fusion_backward(cache["fuse"][s - 1], fused_grads[s - 1])
                store.add_grad(f"fuse.s{s}.weight", gw)
                store.add_grad(f"fuse.s{s}.bias", gb)
                skip_grads.append(gx)
        else:
            skip_grads = fused_grads

        g_out = skip_grads[cfg.stages - 1]
        for s in range(cfg.stages, 0, -1):
            dc, cc, cb, cr, cblk = cache["stage"][s - 1]
            g = g_out
            if cblk is not None:
                g, blk_grads = residual_block_backward(cblk, g)
                self._add_block_grads(f"enc.s{s}.block", blk_grads, store)
            g = ops.relu_backward(cr, g)
            g, dgm, dbt = ops.batch_norm_backward(cb, g)
            store.add_grad(f"enc.s{s}.bn.gamma", dgm)
            store.add_grad(f"enc.s{s}.bn.beta", dbt)
            g, gw, gb = ops.conv_backward(cc, g)
            store.add_grad(f"enc.s{s}.conv.weight", gw)
            store.add_grad(f"enc.s{s}.conv.bias", gb)
            g = ops.spatial_dropout_backward(dc, g)
            if s > 1:
                g_out = skip_grads[s - 2] + g
        store.grads_populated = True
        finite_check("backward", g)
        return g
