"""Command-line surface: corpus synthesis, training, evaluation, inference,
ablation sweeps, and gradient checks.

Every run directory contains a flat key=value config.txt that round-trips to
the exact resolved configuration, so any result can be reproduced from its
output tree alone.  All randomness is governed by --seed; identical flags
produce byte-identical output trees.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

import argparse
import hashlib
import os
import statistics
import sys
from dataclasses import dataclass, fields, replace

import numpy as np

from . import checkpoint as ckpt
from . import gradcheck
from .data import (load_corpus, load_sequence, make_windows, preprocess,
                   split_counts, split_windows, write_manifest, write_sequence)
from .metrics import binarize, metrics_csv
from .network import NetworkConfig, build, param_count
from .pgm import write_pgm
from .rng import derive
from .synth import SynthConfig, heterogeneous, synthesize
from .training import (TrainConfig, evaluate, history_csv, load_checkpoint,
                       predict, save_checkpoint, train)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# resolved run configuration: flat, greppable, round-trippable

def format_config(net_cfg: NetworkConfig, train_cfg: TrainConfig) -> str:
    pairs = {}
    for cfg in (net_cfg, train_cfg):
        for f in fields(cfg):
            value = getattr(cfg, f.name)
            if f.name == "input_hw":
                pairs["input_h"], pairs["input_w"] = str(value[0]), str(value[1])
            elif isinstance(value, bool):
                pairs[f.name] = "true" if value else "false"
            elif isinstance(value, float):
                pairs[f.name] = repr(value)
            else:
                pairs[f.name] = str(value)
    return "".join(f"{k}={pairs[k]}\n" for k in sorted(pairs))


def parse_config(text: str) -> tuple[NetworkConfig, TrainConfig]:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        raw[key.strip()] = value.strip()
    def pick(cfg_cls, extra):
        kwargs = {}
        for f in fields(cfg_cls):
            if f.name in extra:
                kwargs[f.name] = extra[f.name]
                continue
            if f.name not in raw:
                continue
            value = raw[f.name]
            if f.type == "bool" or isinstance(f.default, bool):
                kwargs[f.name] = value == "true"
            elif isinstance(f.default, float):
                kwargs[f.name] = float(value)
            elif isinstance(f.default, int):
                kwargs[f.name] = int(value)
            else:
                kwargs[f.name] = value
        return cfg_cls(**kwargs)
    hw = (int(raw["input_h"]), int(raw["input_w"]))
    return pick(NetworkConfig, {"input_hw": hw}), pick(TrainConfig, {})


def run_id(config_text: str) -> str:
    return hashlib.sha1(config_text.encode("utf-8")).hexdigest()[:12]


@dataclass
class RunManifest:
    out_dir: str
    config_text: str

    @property
    def id(self):
        return run_id(self.config_text)

    def materialize(self):
        os.makedirs(self.out_dir, exist_ok=True)
        os.makedirs(os.path.join(self.out_dir, "checkpoints"), exist_ok=True)
        with open(os.path.join(self.out_dir, "config.txt"), "w", encoding="utf-8") as fh:
            fh.write(self.config_text)


def _default_workers(value):
    if value is not None:
        return value
    env = os.environ.get("SEQVESSEL_WORKERS", "")
    return int(env) if env else 1


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args):
    extra = {}
    if args.hard_background:
        # vessel-like curvilinear ghosts drifting with the background plus
        # stronger photon noise: the regime where the decoder's channel
        # re-weighting has actual disturbances to suppress
        extra = dict(blob_count=(1, 2), blob_depth=(0.08, 0.15),
                     blob_sigma=(0.12 * args.hw, 0.2 * args.hw),
                     confuser_count=(2, 3), confuser_contrast_scale=0.65,
                     photon_scale=180.0)
    cfg = SynthConfig(image_hw=(args.hw, args.hw), sequence_len=args.frames,
                      vessel_count=(args.min_vessels, args.max_vessels), **extra)
    os.makedirs(args.out, exist_ok=True)
    names = [f"seq_{i:04d}" for i in range(args.sequences)]
    for i, name in enumerate(names):
        rng = derive(args.seed, "synth", i)
        cfg_i = heterogeneous(cfg, rng) if args.hard_background else cfg
        seq = synthesize(cfg_i, rng, id=name)
        write_sequence(os.path.join(args.out, name), seq)
    order = derive(args.seed, "split").permutation(args.sequences)
    n_train, n_val, _ = split_counts(args.sequences)
    entries = []
    for rank, idx in enumerate(order):
        split = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
        entries.append((names[idx], split))
    entries.sort()
    write_manifest(os.path.join(args.out, "manifest.txt"), entries)
    print(f"wrote {args.sequences} sequences ({n_train} train) under {args.out}")
    return 0


def _configs_from_args(args):
    net_cfg = NetworkConfig(
        stages=args.stages, base_channels=args.base, window=args.window,
        input_hw=(args.hw, args.hw), dropout_rate=args.dropout,
        channel_cap=args.cap, encoder=args.encoder,
        attention=not args.no_attention, fusion_depthwise=args.fusion_depthwise)
    train_cfg = TrainConfig(
        lr=args.lr, momentum=args.momentum, batch_size=args.batch,
        epochs=args.epochs, seed=args.seed, loss=args.loss,
        eval_threshold=args.threshold, augment=not args.no_augment,
        workers=_default_workers(args.workers))
    return net_cfg, train_cfg


def _load_dataset(root, net_cfg):
    corpus = load_corpus(root, target_hw=net_cfg.input_hw)
    return {
        "train": split_windows(corpus, "train", "train"),
        "val": split_windows(corpus, "val", "infer"),
        "test": split_windows(corpus, "test", "infer"),
    }


def _run_training(data_dir, out_dir, net_cfg, train_cfg, save_every=0, quiet=False):
    manifest = RunManifest(out_dir=out_dir, config_text=format_config(net_cfg, train_cfg))
    manifest.materialize()
    dataset = _load_dataset(data_dir, net_cfg)
    net, store = build(net_cfg, train_cfg.seed)
    history, state = train(net, store, dataset, train_cfg,
                           checkpoint_dir=os.path.join(out_dir, "checkpoints"),
                           save_every=save_every)
    save_checkpoint(store, os.path.join(out_dir, "checkpoints", "final.ckpt"),
                    train_cfg.seed, state)
    with open(os.path.join(out_dir, "history.csv"), "w", encoding="utf-8") as fh:
        fh.write(history_csv(history))
    summary = [f"run_id {manifest.id}", f"parameters {param_count(net_cfg)}"]
    if history:
        last = history[-1]
        summary.append(f"final train_loss {last.train_loss:.6f} val_loss {last.val_loss:.6f}"
                       f" val_F {last.val_f:.6f}")
    with open(os.path.join(out_dir, "summary.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(summary) + "\n")
    if not quiet:
        for line in summary:
            print(line)
    return net, store, dataset, history


def cmd_train(args):
    net_cfg, train_cfg = _configs_from_args(args)
    _run_training(args.data, args.out, net_cfg, train_cfg, save_every=args.save_every)
    return 0


def _load_run(checkpoint_path, config_path=None):
    if config_path is None:
        for candidate in (
            os.path.join(os.path.dirname(checkpoint_path), "config.txt"),
            os.path.join(os.path.dirname(os.path.dirname(checkpoint_path)), "config.txt"),
        ):
            if os.path.exists(candidate):
                config_path = candidate
                break
        else:
            raise ValueError("no config.txt found next to the checkpoint; pass --config")
    with open(config_path, "r", encoding="utf-8") as fh:
        net_cfg, train_cfg = parse_config(fh.read())
    net, store = build(net_cfg, train_cfg.seed)
    load_checkpoint(store, checkpoint_path)
    return net, store, net_cfg, train_cfg


def cmd_eval(args):
    net, store, net_cfg, train_cfg = _load_run(args.checkpoint, args.config)
    if args.threshold is not None:
        train_cfg = replace(train_cfg, eval_threshold=args.threshold)
    dataset = _load_dataset(args.data, net_cfg)
    samples = dataset[args.split]
    rows, agg = evaluate(net, store, samples, train_cfg)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "metrics.csv"), "w", encoding="utf-8") as fh:
        fh.write(metrics_csv(rows))
    lines = [f"{k} {m:.6f} +- {s:.6f}" for k, (m, s) in agg.items()]
    with open(os.path.join(args.out, "summary.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    for line in lines:
        print(line)
    return 0


def cmd_infer(args):
    net, store, net_cfg, train_cfg = _load_run(args.checkpoint, args.config)
    threshold = args.threshold if args.threshold is not None else train_cfg.eval_threshold
    seq = preprocess(load_sequence(args.data), net_cfg.input_hw)
    samples = make_windows(seq, "infer")
    probs = predict(net, store, samples, train_cfg.batch_size)
    masks_dir = os.path.join(args.out, "masks")
    os.makedirs(masks_dir, exist_ok=True)
    raw = {}
    for sample, p in zip(samples, probs):
        write_pgm(os.path.join(masks_dir, f"prob_{sample.center:04d}.pgm"),
                  np.clip(np.rint(p * 255.0), 0, 255).astype(np.uint8))
        write_pgm(os.path.join(masks_dir, f"mask_{sample.center:04d}.pgm"),
                  (binarize(p, threshold) * 255).astype(np.uint8))
        if args.raw:
            raw[f"prob.{sample.center:04d}"] = p.astype(np.float32)
    if args.raw:
        ckpt.save_tensors(os.path.join(args.out, "probs.bin"), raw)
    print(f"wrote {len(samples)} probability maps and masks under {masks_dir}")
    return 0


ABLATE_CELLS = [
    f"{enc}:{att}:{loss}"
    for enc in ("2d", "3d") for att in ("cab", "nocab") for loss in ("dice", "ce")
]


def cmd_ablate(args):
    cells = args.cells.split(",") if args.cells else ABLATE_CELLS
    for cell in cells:
        if cell not in ABLATE_CELLS:
            raise ValueError(f"unknown ablation cell {cell!r}; choose from {ABLATE_CELLS}")
    os.makedirs(args.out, exist_ok=True)
    results = {}
    table = ["cell,seed,F_mean,F_std"]
    for cell in cells:
        enc, att, loss = cell.split(":")
        per_seed = []
        for s in range(args.seeds):
            seed = args.seed + s
            net_cfg = NetworkConfig(
                stages=args.stages, base_channels=args.base, window=args.window,
                input_hw=(args.hw, args.hw), dropout_rate=args.dropout,
                encoder=enc, attention=(att == "cab"))
            train_cfg = TrainConfig(
                lr=args.lr, momentum=args.momentum, batch_size=args.batch,
                epochs=args.epochs, seed=seed, loss=loss,
                eval_threshold=args.threshold, augment=not args.no_augment,
                workers=_default_workers(args.workers))
            run_dir = os.path.join(args.out, "runs", f"{cell.replace(':', '_')}_s{seed}")
            net, store, dataset, _ = _run_training(args.data, run_dir, net_cfg,
                                                   train_cfg, quiet=True)
            _, agg = evaluate(net, store, dataset["test"], train_cfg, with_gve=False)
            per_seed.append(agg["F"])
            table.append(f"{cell},{seed},{agg['F'][0]:.6f},{agg['F'][1]:.6f}")
            print(f"{cell} seed {seed}: F = {agg['F'][0]:.4f}")
        results[cell] = statistics.median(m for m, _ in per_seed)
    with open(os.path.join(args.out, "ablation.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(table) + "\n")
    summary = [f"{cell} median_F {median:.6f}" for cell, median in sorted(results.items())]
    with open(os.path.join(args.out, "summary.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(summary) + "\n")
    for line in summary:
        print(line)
    return 0


def cmd_gradcheck(args):
    targets = list(gradcheck.TARGETS) if args.target == "all" else [args.target]
    ok = True
    for target in targets:
        report = gradcheck.run(target, trials=args.trials, seed=args.seed)
        print(report.line())
        ok = ok and report.passed
    if not ok:
        raise RuntimeError("gradient check failed")
    return 0


# ---------------------------------------------------------------------------
# argument wiring

def _add_model_flags(p):
    p.add_argument("--stages", type=int, default=4, help="encoder stages (default 4)")
    p.add_argument("--base", type=int, default=4, help="stage-1 channels (default 4)")
    p.add_argument("--window", type=int, default=4, help="frames per window (default 4)")
    p.add_argument("--hw", type=int, default=64, help="square input extent (default 64)")
    p.add_argument("--dropout", type=float, default=0.5,
                   help="channel dropout rate for the last two encoder stages (default 0.5)")
    p.add_argument("--cap", type=int, default=512, help="channel cap (default 512)")
    p.add_argument("--encoder", choices=("3d", "2d"), default="3d",
                   help="temporal 3d encoder or frames-as-channels 2d encoder (default 3d)")
    p.add_argument("--no-attention", action="store_true",
                   help="replace decoder attention blocks with plain addition")
    p.add_argument("--fusion-depthwise", action="store_true",
                   help="per-channel temporal fusion instead of channel-mixing")


def _add_train_flags(p):
    p.add_argument("--loss", choices=("dice", "ce"), default="dice",
                   help="training objective (default dice)")
    p.add_argument("--epochs", type=int, default=100, help="training epochs (default 100)")
    p.add_argument("--lr", type=float, default=0.01, help="learning rate (default 0.01)")
    p.add_argument("--momentum", type=float, default=0.9, help="SGD momentum (default 0.9)")
    p.add_argument("--batch", type=int, default=4, help="batch size (default 4)")
    p.add_argument("--threshold", type=float, default=0.5,
                   help="probability threshold for metrics (default 0.5)")
    p.add_argument("--no-augment", action="store_true", help="disable augmentation")
    p.add_argument("--workers", type=int, default=None,
                   help="augmentation workers (default $SEQVESSEL_WORKERS or 1)")


def build_parser():
    parser = _Parser(prog="seqvessel",
                     description="Sequential vessel segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic PGM corpus")
    p.add_argument("--out", required=True, help="corpus directory to create")
    p.add_argument("--sequences", type=int, default=24, help="sequence count (default 24)")
    p.add_argument("--hw", type=int, default=64, help="square image extent (default 64)")
    p.add_argument("--frames", type=int, default=12, help="frames per sequence (default 12)")
    p.add_argument("--min-vessels", type=int, default=2, help="min vessels (default 2)")
    p.add_argument("--max-vessels", type=int, default=3, help="max vessels (default 3)")
    p.add_argument("--hard-background", action="store_true",
                   help="vessel-like drifting confusers and stronger noise (default off)")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a corpus")
    p.add_argument("--data", required=True, help="corpus directory (with manifest.txt)")
    p.add_argument("--out", required=True, help="run directory to create")
    p.add_argument("--seed", type=int, default=0, help="training seed (default 0)")
    p.add_argument("--save-every", type=int, default=0,
                   help="checkpoint every N epochs (default: final only)")
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus split")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--config", default=None, help="config.txt (default: next to checkpoint)")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--split", choices=("train", "val", "test"), default="test",
                   help="split to evaluate (default test)")
    p.add_argument("--threshold", type=float, default=None,
                   help="override the stored probability threshold")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="segment one sequence directory")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--config", default=None, help="config.txt (default: next to checkpoint)")
    p.add_argument("--data", required=True, help="sequence directory (frame_%%04d.pgm)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threshold", type=float, default=None,
                   help="mask threshold (default: stored eval threshold)")
    p.add_argument("--raw", action="store_true",
                   help="also dump full-precision probabilities in tensor format")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate", help="train/evaluate the encoder x attention x loss grid")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seeds", type=int, default=3, help="seeds per cell (default 3)")
    p.add_argument("--seed", type=int, default=0, help="base seed (default 0)")
    p.add_argument("--cells", default=None,
                   help=f"comma list from {ABLATE_CELLS} (default: all)")
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--target", default="all",
                   help=f"one of {sorted(gradcheck.TARGETS)} or 'all' (default all)")
    p.add_argument("--trials", type=int, default=10, help="trials per target (default 10)")
    p.add_argument("--seed", type=int, default=0, help="trial seed (default 0)")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help lands here with code 0
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
