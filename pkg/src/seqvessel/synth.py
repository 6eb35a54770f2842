"""Synthetic 2D+t angiography-style sequence generator.

Emulates the qualitative character of low-dose contrast imaging: dark
tubular vessels on a brighter background, low contrast, Poisson photon
noise, and crucially different motion patterns for foreground and
background.  Vessels are quadratic curves with a Gaussian cross-section that
translate quickly frame to frame with small control-point jitter; the
background is a slow-drifting sum of low-frequency sinusoid fields plus one
or two large soft dark blobs (diaphragm-like) moving independently.  Ground
truth masks mark every pixel within the tube radius of a vessel centerline.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from .data import Sequence


@dataclass(frozen=True)
class SynthConfig:
    image_hw: tuple[int, int] = (64, 64)
    sequence_len: int = 12
    vessel_count: tuple[int, int] = (2, 3)        # inclusive range
    vessel_radius: tuple[float, float] = (0.9, 1.7)   # px
    vessel_contrast: tuple[float, float] = (0.25, 0.45)
    vessel_speed: float = 1.5                     # max px/frame
    background_drift: float = 0.5                 # max px/frame
    photon_scale: float = 200.0                   # Poisson lambda per unit intensity
    blob_count: tuple[int, int] = (1, 2)
    blob_depth: tuple[float, float] = (0.06, 0.14)
    blob_sigma: tuple[float, float] = (8.0, 16.0)
    # curvilinear confusers: rendered like vessels but excluded from the mask
    # and drifting with the background; 0 by default
    confuser_count: tuple[int, int] = (0, 0)
    confuser_contrast_scale: float = 0.8
    background_level: float = 0.6

    def validate(self):
        for name in ("vessel_radius", "vessel_contrast", "blob_depth", "blob_sigma"):
            lo, hi = getattr(self, name)
            if lo > hi or hi <= 0:
                raise ValueError(f"{name} range ({lo}, {hi}) is invalid")
        for name in ("vessel_count", "blob_count", "confuser_count"):
            lo, hi = getattr(self, name)  # zero structures is allowed
            if lo > hi or lo < 0:
                raise ValueError(f"{name} range ({lo}, {hi}) is invalid")
        if self.sequence_len < 1 or min(self.image_hw) < 8:
            raise ValueError("sequence too short or image too small")
        if self.photon_scale <= 0 or self.vessel_speed < 0 or self.background_drift < 0:
            raise ValueError("rates must be positive")


def heterogeneous(cfg: SynthConfig, rng) -> SynthConfig:
    """Re-draw acquisition-like knobs for one sequence.

    Corpora pooled from different machines and dosages differ per sequence in
    brightness, contrast, noise level, and the amount of vessel-like clutter;
    sampling these wide ranges per sequence reproduces that heterogeneity,
    which is what makes input-adaptive feature re-weighting worthwhile.
    """
    lo, hi = cfg.vessel_contrast
    scale = rng.uniform(0.75, 1.3)
    return replace(
        cfg,
        photon_scale=float(rng.uniform(100.0, 320.0)),
        background_level=float(rng.uniform(0.5, 0.7)),
        vessel_contrast=(lo * scale, hi * scale),
        confuser_count=(0, int(rng.integers(2, 5))),
        confuser_contrast_scale=float(rng.uniform(0.5, 0.85)),
    )


def _unit_velocity(rng, vmax):
    angle = rng.uniform(0, 2 * math.pi)
    speed = rng.uniform(0.3, 1.0) * vmax
    return np.array([math.sin(angle), math.cos(angle)]) * speed


def _bezier_points(p0, p1, p2, n):
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - t) ** 2 * p0 + 2 * t * (1 - t) * p1 + t ** 2 * p2


class _Vessel:
    def __init__(self, rng, hw, cfg):
        h, w = hw
        # endpoints near opposite borders so the curve spans the image
        side = rng.integers(0, 2)  # 0: top->bottom, 1: left->right
        if side == 0:
            self.p0 = np.array([rng.uniform(0, 0.15 * h), rng.uniform(0.1 * w, 0.9 * w)])
            self.p2 = np.array([rng.uniform(0.85 * h, h - 1), rng.uniform(0.1 * w, 0.9 * w)])
        else:
            self.p0 = np.array([rng.uniform(0.1 * h, 0.9 * h), rng.uniform(0, 0.15 * w)])
            self.p2 = np.array([rng.uniform(0.1 * h, 0.9 * h), rng.uniform(0.85 * w, w - 1)])
        mid = (self.p0 + self.p2) / 2
        bow = np.array([rng.uniform(-0.25 * h, 0.25 * h), rng.uniform(-0.25 * w, 0.25 * w)])
        self.p1 = mid + bow
        self.radius = rng.uniform(*cfg.vessel_radius)
        self.depth = rng.uniform(*cfg.vessel_contrast)
        self.velocity = _unit_velocity(rng, cfg.vessel_speed)

    def centerline(self, frame, jitter):
        offset = self.velocity * frame
        pts = np.stack([self.p0, self.p1, self.p2]) + offset + jitter
        n = 160
        return _bezier_points(pts[0], pts[1], pts[2], n)


def _distance_field(points, hw):
    """Min distance from every pixel to a polyline's sample points."""
    h, w = hw
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float32),
                         np.arange(w, dtype=np.float32), indexing="ij")
    grid = np.stack([rr.ravel(), cc.ravel()], axis=1)       # [HW, 2]
    pts = points.astype(np.float32)                          # [P, 2]
    d2 = ((grid[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
    return np.sqrt(d2.min(axis=1)).reshape(h, w)


def synthesize(cfg: SynthConfig, rng, id="synth") -> Sequence:
    """Generate one sequence with masks; same (cfg, rng seed) is bit-identical."""
    cfg.validate()
    h, w = cfg.image_hw
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")

    n_vessels = int(rng.integers(cfg.vessel_count[0], cfg.vessel_count[1] + 1))
    vessels = [_Vessel(rng, (h, w), cfg) for _ in range(n_vessels)]

    n_conf = int(rng.integers(cfg.confuser_count[0], cfg.confuser_count[1] + 1))
    confusers = []
    for _ in range(n_conf):
        ghost = _Vessel(rng, (h, w), cfg)
        ghost.depth *= cfg.confuser_contrast_scale
        ghost.velocity = _unit_velocity(rng, cfg.background_drift)  # moves like background
        confusers.append(ghost)

    fields = []
    for _ in range(3):
        amp = rng.uniform(0.04, 0.10)
        freq = rng.uniform(0.5, 2.0)
        theta = rng.uniform(0, 2 * math.pi)
        q = np.array([math.sin(theta), math.cos(theta)]) * freq
        phase = rng.uniform(0, 2 * math.pi)
        fields.append((amp, q, phase, _unit_velocity(rng, cfg.background_drift)))

    blobs = []
    for _ in range(int(rng.integers(cfg.blob_count[0], cfg.blob_count[1] + 1))):
        center = np.array([rng.uniform(0.2 * h, 0.8 * h), rng.uniform(0.2 * w, 0.8 * w)])
        sig = np.array([rng.uniform(*cfg.blob_sigma), rng.uniform(*cfg.blob_sigma)])
        sig[rng.integers(0, 2)] *= rng.uniform(1.2, 2.0)  # soft elongated shapes
        depth = rng.uniform(*cfg.blob_depth)
        theta = rng.uniform(0, math.pi)
        blobs.append((center, sig, depth, theta, _unit_velocity(rng, cfg.background_drift)))

    frames, masks = [], []
    for f in range(cfg.sequence_len):
        clean = np.full((h, w), cfg.background_level)
        for amp, q, phase, vel in fields:
            arg = 2 * math.pi * (q[0] * (rr - vel[0] * f) / h + q[1] * (cc - vel[1] * f) / w)
            clean += amp * np.sin(arg + phase)
        for center, sig, depth, theta, vel in blobs:
            c = center + vel * f
            dr, dc = rr - c[0], cc - c[1]
            u = dr * math.cos(theta) + dc * math.sin(theta)
            v = -dr * math.sin(theta) + dc * math.cos(theta)
            clean -= depth * np.exp(-0.5 * ((u / sig[0]) ** 2 + (v / sig[1]) ** 2))
        mask = np.zeros((h, w), dtype=bool)
        for vessel in vessels:
            jitter = rng.normal(0.0, 0.3, size=(3, 2))
            dist = _distance_field(vessel.centerline(f, jitter), (h, w))
            sigma = 0.75 * vessel.radius
            clean -= vessel.depth * np.exp(-0.5 * (dist / sigma) ** 2)
            mask |= dist <= vessel.radius
        for ghost in confusers:
            dist = _distance_field(ghost.centerline(f, np.zeros((3, 2))), (h, w))
            sigma = 0.9 * ghost.radius  # slightly blurrier cross-section
            clean -= ghost.depth * np.exp(-0.5 * (dist / sigma) ** 2)
        clean = np.clip(clean, 0.0, 1.0)
        noisy = rng.poisson(clean * cfg.photon_scale) / cfg.photon_scale
        frames.append(np.clip(noisy, 0.0, 1.0).astype(np.float32))
        masks.append(mask.astype(np.float32))
    return Sequence(frames=frames, masks=masks, id=id)
