"""Sequence storage, sliding-window sampling, and resizing.

On disk a sequence is a directory of frame_%04d.pgm files (indices contiguous
from 1) with optional mask_%04d.pgm companions; a corpus is a set of such
directories plus a manifest listing "sequence_dir split" per line.  In memory
frames are float32 [H, W] in [0, 1] (pixel / 255) and masks are binary
float32 (pixel >= 128).
"""

import os
from dataclasses import dataclass

import numpy as np

from .pgm import read_pgm, write_pgm

WINDOW = 4          # frames per sample: (i-2, i-1, i, i+1) predicting frame i
TARGET_OFFSET = 2   # position of the predicted frame inside the window

SPLITS = ("train", "val", "test")


@dataclass
class Sequence:
    frames: list[np.ndarray]
    masks: list[np.ndarray] | None
    id: str

    @property
    def hw(self):
        return self.frames[0].shape


@dataclass
class Sample:
    """One training/inference unit: a frame window plus its target mask."""

    frames: np.ndarray            # [WINDOW, H, W] float32
    mask: np.ndarray | None       # [H, W] binary float32; None for unlabeled
    sequence_id: str
    center: int                   # 1-based index of the predicted frame

    @property
    def sample_id(self):
        return f"{self.sequence_id}:{self.center:04d}"


def load_sequence(directory) -> Sequence:
    """Load frame_%04d.pgm (and mask_%04d.pgm if present) from a directory."""
    names = sorted(os.listdir(directory))
    frame_files = [n for n in names if n.startswith("frame_") and n.endswith(".pgm")]
    mask_files = [n for n in names if n.startswith("mask_") and n.endswith(".pgm")]
    if not frame_files:
        raise ValueError(f"no frame_*.pgm files in {directory}")
    indices = sorted(int(n[len("frame_"):-len(".pgm")]) for n in frame_files)
    if indices != list(range(1, len(indices) + 1)):
        raise ValueError(f"frame indices not contiguous from 1 in {directory}: {indices}")
    if mask_files and len(mask_files) != len(frame_files):
        raise ValueError(
            f"{directory}: {len(mask_files)} masks for {len(frame_files)} frames"
        )
    frames = []
    masks = [] if mask_files else None
    hw = None
    for i in range(1, len(indices) + 1):
        img = read_pgm(os.path.join(directory, f"frame_{i:04d}.pgm"))
        if hw is None:
            hw = img.shape
        elif img.shape != hw:
            raise ValueError(f"frame {i} size {img.shape} disagrees with {hw}")
        frames.append(img.astype(np.float32) / 255.0)
        if masks is not None:
            m = read_pgm(os.path.join(directory, f"mask_{i:04d}.pgm"))
            if m.shape != hw:
                raise ValueError(f"mask {i} size {m.shape} disagrees with {hw}")
            masks.append((m >= 128).astype(np.float32))
    return Sequence(frames=frames, masks=masks, id=os.path.basename(os.path.normpath(directory)))


def write_sequence(directory, seq: Sequence):
    """Quantize to 8 bits and write in the on-disk layout."""
    os.makedirs(directory, exist_ok=True)
    for i, frame in enumerate(seq.frames, start=1):
        write_pgm(os.path.join(directory, f"frame_{i:04d}.pgm"),
                  np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8))
        if seq.masks is not None:
            write_pgm(os.path.join(directory, f"mask_{i:04d}.pgm"),
                      (seq.masks[i - 1] >= 0.5).astype(np.uint8) * 255)


def make_windows(seq: Sequence, purpose: str) -> list[Sample]:
    """Slice a sequence into frame windows.

    Training windows exist only where all four frames (i-2 .. i+1) lie inside
    the sequence, i.e. centers 3 .. n-1 (1-based).  Inference covers every
    frame by replicating edge frames into the missing neighbor slots.
    """
    n = len(seq.frames)
    if purpose == "train":
        if seq.masks is None:
            raise ValueError(f"sequence {seq.id} has no masks; cannot build training windows")
        if n < WINDOW:
            raise ValueError(f"sequence {seq.id} has {n} frames; training needs >= {WINDOW}")
        centers = range(3, n)
    elif purpose == "infer":
        centers = range(1, n + 1)
    else:
        raise ValueError(f"unknown purpose {purpose!r}")
    samples = []
    for i in centers:
        idx = [min(max(i + d, 1), n) for d in (-2, -1, 0, 1)]
        frames = np.stack([seq.frames[j - 1] for j in idx])
        mask = seq.masks[i - 1] if seq.masks is not None else None
        samples.append(Sample(frames=frames, mask=mask, sequence_id=seq.id, center=i))
    return samples


# ---------------------------------------------------------------------------
# resizing

def _resample_coords(n_out, n_in):
    # half-pixel-center convention, matching the upsampling layer
    return (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5


def resize_bilinear(img, target_hw):
    h, w = img.shape
    th, tw = target_hw
    if (th, tw) == (h, w):
        return img
    src_r = np.clip(_resample_coords(th, h), 0, h - 1)
    src_c = np.clip(_resample_coords(tw, w), 0, w - 1)
    r0 = np.floor(src_r).astype(int)
    c0 = np.floor(src_c).astype(int)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (src_r - r0).astype(img.dtype)[:, None]
    fc = (src_c - c0).astype(img.dtype)[None, :]
    top = img[np.ix_(r0, c0)] * (1 - fc) + img[np.ix_(r0, c1)] * fc
    bot = img[np.ix_(r1, c0)] * (1 - fc) + img[np.ix_(r1, c1)] * fc
    return top * (1 - fr) + bot * fr


def resize_nearest(img, target_hw):
    h, w = img.shape
    th, tw = target_hw
    if (th, tw) == (h, w):
        return img
    rows = np.clip(np.rint(_resample_coords(th, h)).astype(int), 0, h - 1)
    cols = np.clip(np.rint(_resample_coords(tw, w)).astype(int), 0, w - 1)
    return img[np.ix_(rows, cols)]


def preprocess(seq: Sequence, target_hw) -> Sequence:
    """Resize frames bilinearly and masks by nearest neighbor (re-binarized)."""
    target_hw = tuple(int(v) for v in target_hw)
    if seq.hw == target_hw:
        return seq
    frames = [resize_bilinear(f, target_hw) for f in seq.frames]
    masks = None
    if seq.masks is not None:
        masks = [(resize_nearest(m, target_hw) >= 0.5).astype(np.float32) for m in seq.masks]
    return Sequence(frames=frames, masks=masks, id=seq.id)


# ---------------------------------------------------------------------------
# corpus manifest

def split_counts(n: int) -> tuple[int, int, int]:
    """Partition n sequences approximately 0.5 / 0.25 / 0.25."""
    n_train = int(round(n * 0.5))
    n_val = int(round(n * 0.25))
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def write_manifest(path, entries):
    with open(path, "w", encoding="utf-8") as fh:
        for directory, split in entries:
            if split not in SPLITS:
                raise ValueError(f"unknown split {split!r}")
            fh.write(f"{directory} {split}\n")


def read_manifest(path):
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2 or parts[1] not in SPLITS:
                raise ValueError(f"{path}:{lineno}: expected 'sequence_dir split', got {line!r}")
            entries.append((parts[0], parts[1]))
    return entries


def load_corpus(root, target_hw=None) -> dict[str, list[Sequence]]:
    """Load every sequence named by root/manifest.txt, grouped by split."""
    manifest = os.path.join(root, "manifest.txt")
    if not os.path.exists(manifest):
        raise ValueError(f"no manifest.txt under {root}")
    corpus = {s: [] for s in SPLITS}
    for directory, split in read_manifest(manifest):
        seq = load_sequence(os.path.join(root, directory))
        if target_hw is not None:
            seq = preprocess(seq, target_hw)
        corpus[split].append(seq)
    return corpus


def split_windows(corpus, split: str, purpose: str) -> list[Sample]:
    return [s for seq in corpus[split] for s in make_windows(seq, purpose)]
