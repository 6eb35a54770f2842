"""Geometric training-time augmentation.

Each enabled transform fires independently with probability
`per_transform_prob`; the active ones compose into a single affine map that
is applied once, identically, to all window frames and the target mask
(temporal coherence).  Images resample bilinearly with edge clamping, masks
by nearest neighbor followed by re-binarization.  Rotation, scaling, and
shear act about the image center; crop zooms a random sub-window back to
full size.
"""

import math
from dataclasses import dataclass

import numpy as np

from .data import Sample


@dataclass(frozen=True)
class AugmentConfig:
    rotate_deg: tuple[float, float] = (-10.0, 10.0)
    flip_h: bool = True
    flip_v: bool = True
    scale_factor: float = 0.2        # scale drawn from [1 - f, 1 + f]
    crop: bool = True
    shear_deg: tuple[float, float] = (-5.0, 5.0)
    per_transform_prob: float = 0.5

    def validate(self):
        if not 0.0 <= self.per_transform_prob <= 1.0:
            raise ValueError("per_transform_prob must be in [0, 1]")
        if not 0.0 <= self.scale_factor < 1.0:
            raise ValueError("scale_factor must be in [0, 1)")
        if self.rotate_deg[0] > self.rotate_deg[1] or self.shear_deg[0] > self.shear_deg[1]:
            raise ValueError("angle ranges must be (low, high)")


def _centered(mat2, center):
    """Lift a 2x2 dest->src matrix acting about `center` to homogeneous form."""
    m = np.eye(3)
    m[:2, :2] = mat2
    m[:2, 2] = center - mat2 @ center
    return m


def draw_transform(cfg: AugmentConfig, rng, hw):
    """Sample the composed dest->src matrix for one window, or None.

    Always consumes the same number of draws from `rng` regardless of which
    transforms activate, so downstream streams stay aligned.
    """
    cfg.validate()
    h, w = hw
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    parts = []

    def active():
        return rng.random() < cfg.per_transform_prob

    # rotation
    fire = active()
    angle = math.radians(rng.uniform(*cfg.rotate_deg))
    if fire:
        c, s = math.cos(-angle), math.sin(-angle)
        parts.append(_centered(np.array([[c, -s], [s, c]]), center))
    # flips (exact about the center: integer source coordinates)
    if active() and cfg.flip_h:
        parts.append(_centered(np.array([[1.0, 0.0], [0.0, -1.0]]), center))
    if active() and cfg.flip_v:
        parts.append(_centered(np.array([[-1.0, 0.0], [0.0, 1.0]]), center))
    # scaling about the center
    fire = active()
    scale = rng.uniform(1.0 - cfg.scale_factor, 1.0 + cfg.scale_factor)
    if fire and cfg.scale_factor > 0:
        parts.append(_centered(np.eye(2) / scale, center))
    # crop: random sub-window resized back to full frame
    fire = active()
    size = rng.uniform(1.0 - cfg.scale_factor, 1.0)
    top = rng.uniform(0.0, 1.0)
    left = rng.uniform(0.0, 1.0)
    if fire and cfg.crop and size < 1.0:
        ch, cw = size * (h - 1), size * (w - 1)
        r0 = top * ((h - 1) - ch)
        c0 = left * ((w - 1) - cw)
        m = np.eye(3)
        m[0, 0] = ch / (h - 1)
        m[1, 1] = cw / (w - 1)
        m[:2, 2] = (r0, c0)
        parts.append(m)
    # shear along the column axis
    fire = active()
    shear = math.tan(math.radians(rng.uniform(*cfg.shear_deg)))
    if fire:
        parts.append(_centered(np.array([[1.0, 0.0], [-shear, 1.0]]), center))

    if not parts:
        return None
    m = parts[0]
    for p in parts[1:]:
        m = m @ p
    return m


def _source_grid(matrix, hw):
    h, w = hw
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    src_r = matrix[0, 0] * rr + matrix[0, 1] * cc + matrix[0, 2]
    src_c = matrix[1, 0] * rr + matrix[1, 1] * cc + matrix[1, 2]
    return src_r, src_c


def warp_bilinear(img, matrix):
    h, w = img.shape
    src_r, src_c = _source_grid(matrix, img.shape)
    src_r = np.clip(src_r, 0, h - 1)
    src_c = np.clip(src_c, 0, w - 1)
    r0 = np.floor(src_r).astype(int)
    c0 = np.floor(src_c).astype(int)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (src_r - r0).astype(img.dtype)
    fc = (src_c - c0).astype(img.dtype)
    out = (img[r0, c0] * (1 - fr) * (1 - fc)
           + img[r0, c1] * (1 - fr) * fc
           + img[r1, c0] * fr * (1 - fc)
           + img[r1, c1] * fr * fc)
    return out.astype(img.dtype, copy=False)


def warp_nearest(mask, matrix):
    h, w = mask.shape
    src_r, src_c = _source_grid(matrix, mask.shape)
    rows = np.clip(np.rint(src_r).astype(int), 0, h - 1)
    cols = np.clip(np.rint(src_c).astype(int), 0, w - 1)
    return mask[rows, cols]


def apply_transform(sample: Sample, matrix) -> Sample:
    frames = np.stack([warp_bilinear(f, matrix) for f in sample.frames])
    mask = sample.mask
    if mask is not None:
        mask = (warp_nearest(mask, matrix) >= 0.5).astype(np.float32)
    return Sample(frames=frames, mask=mask,
                  sequence_id=sample.sequence_id, center=sample.center)


def augment(sample: Sample, cfg: AugmentConfig, rng) -> Sample:
    """Randomly transform a sample; returns it unchanged if nothing fires."""
    matrix = draw_transform(cfg, rng, sample.frames.shape[1:])
    if matrix is None:
        return sample
    return apply_transform(sample, matrix)
