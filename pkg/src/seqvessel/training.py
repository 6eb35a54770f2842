"""SGD training loop, evaluation sweeps, and checkpoint plumbing.

Everything is keyed on (seed, coordinates): the epoch shuffle, each sample's
augmentation stream, and each batch's dropout stream derive independently
from the configured seed, so the trajectory is bit-reproducible regardless
of worker count and training can resume from any step boundary and continue
exactly as if it had never stopped.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt
from .augment import AugmentConfig, augment
from .losses import LOSSES, batch_loss
from .metrics import binarize, gve, segmentation_metrics
from .network import Network, ParameterStore
from .rng import derive


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 4
    epochs: int = 50
    seed: int = 0
    loss: str = "dice"              # dice | ce
    eval_threshold: float = 0.5
    augment: bool = True
    workers: int = 1

    def validate(self):
        # lr = 0 is tolerated so frozen-parameter sanity runs are expressible
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if not 0.0 < self.eval_threshold < 1.0:
            raise ValueError("eval_threshold must be in (0, 1)")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass
class HistoryRow:
    epoch: int
    train_loss: float
    val_loss: float
    val_dr: float
    val_p: float
    val_f: float


def history_csv(rows) -> str:
    lines = ["epoch,train_loss,val_loss,val_DR,val_P,val_F"]
    for r in rows:
        lines.append(
            f"{r.epoch},{r.train_loss:.6f},{r.val_loss:.6f},"
            f"{r.val_dr:.6f},{r.val_p:.6f},{r.val_f:.6f}"
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# optimizer

def sgd_step(store: ParameterStore, lr: float, momentum: float):
    """v <- momentum*v + g; theta <- theta - lr*v; grads zeroed afterward."""
    if not store.grads_populated:
        raise ValueError("no gradients to apply; run a backward pass first")
    for name in store.names():
        p = store.get(name)
        p.momentum *= momentum
        p.momentum += p.grad
        p.value -= lr * p.momentum
        p.grad[...] = 0.0
    store.grads_populated = False


# ---------------------------------------------------------------------------
# inference + evaluation

def _stack_windows(samples):
    return np.stack([s.frames for s in samples])[:, None]  # [N, 1, T, H, W]


def predict(net: Network, store, samples, batch_size=4):
    """Infer-mode probability maps, one [H, W] array per sample."""
    probs = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        out, _ = net.forward_batch(_stack_windows(chunk), store, "infer")
        probs.extend(out[:, 0])
    return probs


def collect_metrics(samples, probs, threshold, with_gve=True):
    """Score probability maps against sample masks; returns rows + aggregates.

    GVE is undefined for samples with empty ground truth; those rows carry
    None (rendered as nan in CSV) and are excluded from the GVE aggregate.
    """
    rows = []
    for sample, p in zip(samples, probs):
        pred = binarize(p, threshold)
        rec = segmentation_metrics(pred, sample.mask)
        if with_gve and np.count_nonzero(sample.mask) > 0:
            rec.gve_percent = gve(pred, sample.mask)
        rows.append((sample.sample_id, rec))
    agg = {}
    for key, pick in (("DR", lambda r: r.dr), ("P", lambda r: r.precision),
                      ("F", lambda r: r.f)):
        vals = np.array([pick(rec) for _, rec in rows])
        agg[key] = (float(vals.mean()), float(vals.std()))
    gves = np.array([rec.gve_percent for _, rec in rows if rec.gve_percent is not None])
    agg["GVE"] = (float(gves.mean()), float(gves.std())) if gves.size else (float("nan"),) * 2
    return rows, agg


def evaluate(net, store, samples, cfg: TrainConfig, with_gve=True):
    """Per-sample DR/P/F (and GVE) plus mean/std aggregates over a split."""
    if not samples:
        raise ValueError("empty evaluation split")
    if any(s.mask is None for s in samples):
        raise ValueError("evaluation split is missing masks")
    probs = predict(net, store, samples, cfg.batch_size)
    return collect_metrics(samples, probs, cfg.eval_threshold, with_gve)


def split_loss(net, store, samples, cfg: TrainConfig) -> float:
    """Mean per-sample loss over a split, infer mode, no augmentation."""
    probs = predict(net, store, samples, cfg.batch_size)
    fn = LOSSES[cfg.loss]
    return float(np.mean([fn(p, s.mask)[0] for p, s in zip(probs, samples)]))


# ---------------------------------------------------------------------------
# training

def _prepare_batch(samples, indices, cfg, aug_cfg, epoch, pool):
    def one(i):
        s = samples[int(i)]
        if cfg.augment:
            s = augment(s, aug_cfg, derive(cfg.seed, "augment", epoch, int(i)))
        return s
    if pool is None:
        picked = [one(i) for i in indices]
    else:
        picked = list(pool.map(one, indices))
    x = _stack_windows(picked)
    y = np.stack([s.mask for s in picked])
    return x, y


def train(net: Network, store: ParameterStore, dataset, cfg: TrainConfig,
          aug_cfg: AugmentConfig | None = None, start=(0, 0), max_steps=None,
          checkpoint_dir=None, save_every=0):
    """Run the optimization loop; returns (history rows, (epoch, batch) state).

    `dataset` maps split names to Sample lists and must have non-empty train
    and val splits.  `start` resumes from an (epoch, batch) boundary, e.g.
    as recorded in a checkpoint; a resumed run replays the identical
    shuffle/augment/dropout streams of an uninterrupted one.  When resuming
    mid-epoch the recorded mean train loss covers only the remaining batches
    of that epoch.  `max_steps` caps the number of optimizer steps (used by
    resume-equality checks); epochs interrupted by it record no history row.
    """
    cfg.validate()
    if aug_cfg is None:
        aug_cfg = AugmentConfig()
    train_samples = dataset.get("train") or []
    val_samples = dataset.get("val") or []
    if not train_samples:
        raise ValueError("empty train split")
    if not val_samples:
        raise ValueError("empty val split")

    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    history = []
    steps = 0
    state = (start[0], start[1])
    try:
        for epoch in range(start[0], cfg.epochs):
            perm = derive(cfg.seed, "shuffle", epoch).permutation(len(train_samples))
            n_batches = (len(perm) + cfg.batch_size - 1) // cfg.batch_size
            first_batch = start[1] if epoch == start[0] else 0
            epoch_losses = []
            for bi in range(first_batch, n_batches):
                indices = perm[bi * cfg.batch_size:(bi + 1) * cfg.batch_size]
                x, y = _prepare_batch(train_samples, indices, cfg, aug_cfg, epoch, pool)
                rng = derive(cfg.seed, "dropout", epoch, bi)
                probs, cache = net.forward_batch(x, store, "train", rng)
                loss, gprobs = batch_loss(cfg.loss, probs, y)
                net.backward(cache, store, gprobs)
                sgd_step(store, cfg.lr, cfg.momentum)
                epoch_losses.append(loss)
                steps += 1
                state = (epoch, bi + 1) if bi + 1 < n_batches else (epoch + 1, 0)
                if max_steps is not None and steps >= max_steps:
                    return history, state
            val_loss = split_loss(net, store, val_samples, cfg)
            _, agg = evaluate(net, store, val_samples, cfg, with_gve=False)
            history.append(HistoryRow(
                epoch=epoch,
                train_loss=float(np.mean(epoch_losses)),
                val_loss=val_loss,
                val_dr=agg["DR"][0], val_p=agg["P"][0], val_f=agg["F"][0],
            ))
            if checkpoint_dir and save_every and (epoch + 1) % save_every == 0:
                save_checkpoint(store, os.path.join(checkpoint_dir, f"epoch_{epoch + 1:04d}.ckpt"),
                                cfg.seed, state)
    finally:
        if pool is not None:
            pool.shutdown()
    return history, state


# ---------------------------------------------------------------------------
# checkpoints: weights + momentum + buffers + resume coordinates

def save_checkpoint(store: ParameterStore, path, seed=0, state=(0, 0)):
    tensors = {}
    for name in store.names():
        p = store.get(name)
        tensors[name] = p.value
        tensors[f"opt.m.{name}"] = p.momentum
    for name, buf in store.buffers.items():
        tensors[f"buf.{name}"] = buf
    tensors["meta.seed"] = ckpt.encode_int(seed)
    tensors["meta.epoch"] = ckpt.encode_int(state[0])
    tensors["meta.batch"] = ckpt.encode_int(state[1])
    ckpt.save_tensors(path, tensors)


def load_checkpoint(store: ParameterStore, path):
    """Restore a store in place; returns (seed, (epoch, batch)).

    Every tensor shape is verified against the store before anything is
    overwritten, so a config/checkpoint mismatch names the offending tensor
    and leaves the store untouched.
    """
    tensors = ckpt.load_tensors(path)
    expected = {}
    for name in store.names():
        expected[name] = store.get(name).value.shape
        expected[f"opt.m.{name}"] = store.get(name).momentum.shape
    for name, buf in store.buffers.items():
        expected[f"buf.{name}"] = buf.shape
    for name, shape in expected.items():
        if name not in tensors:
            raise ValueError(f"checkpoint is missing tensor {name!r}")
        if tensors[name].shape != shape:
            raise ValueError(
                f"shape mismatch for {name!r}: checkpoint {tensors[name].shape},"
                f" network {shape}"
            )
    for name in store.names():
        p = store.get(name)
        p.value[...] = tensors[name]
        p.momentum[...] = tensors[f"opt.m.{name}"]
        p.grad[...] = 0.0
    for name, buf in store.buffers.items():
        buf[...] = tensors[f"buf.{name}"]
    store.grads_populated = False
    seed = ckpt.decode_int(tensors["meta.seed"])
    state = (ckpt.decode_int(tensors["meta.epoch"]), ckpt.decode_int(tensors["meta.batch"]))
    return seed, state
