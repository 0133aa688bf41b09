"""Procedural stick-figure walkers and protocol-shaped manifests.

The toy walkers give each identity its own body proportions, swing
amplitudes and cadence. The camera view only changes the horizontal
projection, so vertical proportions carry identity across views.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .silhouette_io import ManifestEntry, SilhouetteSequence, format_view, preprocess_frame, write_manifest

TOY_VIEWS = (0.0, 45.0, 90.0, 135.0)
CASIA_B_VIEWS = tuple(float(v) for v in range(0, 181, 18))
CASIA_B_LAYOUT = (("NM", 6), ("BG", 2), ("CL", 2))
OU_MVLP_VIEWS = tuple(float(v) for v in (0, 15, 30, 45, 60, 75, 90, 180, 195, 210, 225, 240, 255, 270))


@dataclass(frozen=True)
class WalkerStyle:
    head: float  # head radius / height
    torso: float  # neck-to-hip / height
    arm: float  # arm length / height
    width: float  # torso half-width / height (frontal)
    depth: float  # torso half-depth / height (profile)
    stride: float  # leg swing amplitude, radians
    swing: float  # arm swing amplitude, radians
    period: float  # frames per gait cycle


def make_styles(n, seed=0):
    """``n`` walker styles whose traits are spread across their ranges.

    Each trait takes evenly spaced values shuffled independently, so no two
    identities share a trait value.
    """
    rng = np.random.default_rng(seed)
    ranges = {
        "head": (0.055, 0.095),
        "torso": (0.24, 0.38),
        "arm": (0.22, 0.36),
        "width": (0.06, 0.11),
        "depth": (0.035, 0.06),
        "stride": (0.25, 0.6),
        "swing": (0.15, 0.7),
        "period": (8.0, 15.0),
    }
    grid = (np.arange(n) + 0.5) / n
    cols = {k: lo + (hi - lo) * rng.permutation(grid) for k, (lo, hi) in ranges.items()}
    return [WalkerStyle(**{k: float(v[i]) for k, v in cols.items()}) for i in range(n)]


def _segments_mask(shape, segments, radius):
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]].astype(np.float64)
    mask = np.zeros(shape, dtype=bool)
    for (y0, x0), (y1, x1) in segments:
        dy, dx = y1 - y0, x1 - x0
        L2 = dy * dy + dx * dx
        t = np.clip(((yy - y0) * dy + (xx - x0) * dx) / L2 if L2 else 0.0, 0.0, 1.0)
        d2 = (yy - (y0 + t * dy)) ** 2 + (xx - (x0 + t * dx)) ** 2
        mask |= d2 <= radius * radius
    return mask


def render_walker(style, view, t, phase=0.0, height=80.0, canvas=(100, 80), offset=(0.0, 0.0),
                  jitter=None):
    """One binary frame (uint8, 0/255) of a walker at gait time ``t``."""
    j = jitter if jitter is not None else {}
    th = np.deg2rad(view)
    sin_v, cos_v = abs(np.sin(th)), abs(np.cos(th))
    ang = 2 * np.pi * (t / (style.period * j.get("period", 1.0))) + phase
    H = height * j.get("height", 1.0)
    top = (canvas[0] - H) / 2 + offset[0]
    cx = canvas[1] / 2 + offset[1]

    head_r = style.head * H
    neck = top + 2 * head_r
    hip = neck + style.torso * H
    foot = top + H
    leg = foot - hip
    half = style.width * H * cos_v + style.depth * H * sin_v
    hip_off = 0.6 * style.width * H * cos_v

    segs = [((neck, cx), (hip, cx))]
    for side in (-1, 1):
        a = side * style.stride * np.sin(ang)
        knee = 0.5 * leg
        kx = cx + side * hip_off + np.sin(a) * knee * sin_v
        fx = kx + np.sin(a + 0.3 * max(0.0, side * np.sin(ang))) * knee * sin_v
        segs.append(((hip, cx + side * hip_off), (hip + knee * np.cos(a), kx)))
        segs.append(((hip + knee * np.cos(a), kx), (foot, fx)))
        b = -side * style.swing * np.sin(ang)
        shoulder = (neck + 0.05 * H, cx + side * half)
        alen = style.arm * H
        segs.append((shoulder, (shoulder[0] + alen * np.cos(b), shoulder[1] + alen * np.sin(b) * sin_v
                                + side * 0.02 * H * cos_v)))
    limb = max(1.5, 0.028 * H)
    mask = _segments_mask(canvas, segs, limb)

    yy, xx = np.mgrid[0 : canvas[0], 0 : canvas[1]]
    mask |= (yy - (top + head_r)) ** 2 + (xx - cx) ** 2 <= head_r ** 2
    mask |= (yy >= neck) & (yy <= hip) & (np.abs(xx - cx) <= half)
    return mask.astype(np.uint8) * 255


def walker_sequence(style, view, frames=16, rng=None, canvas=(100, 80)):
    """Raw frames for one recording; per-recording phase, size and position vary."""
    rng = np.random.default_rng() if rng is None else rng
    phase = rng.uniform(0, 2 * np.pi)
    height = rng.uniform(72, 84)
    offset = (rng.uniform(-3, 3), rng.uniform(-6, 6))
    jitter = {"period": rng.uniform(0.95, 1.05), "height": 1.0}
    out = []
    for t in range(frames):
        drift = (0.0, offset[1] + 0.3 * (t - frames / 2))
        img = render_walker(style, view, t, phase, height, canvas, (offset[0], drift[1]), jitter)
        holes = (rng.random(img.shape) < 0.01) & (img > 0)
        img = np.where(holes, 0, img).astype(np.uint8)
        out.append(img)
    return out


def toy_sequences(n_ids=8, views=TOY_VIEWS, seqs=4, frames=16, seed=0, preprocess=True):
    """In-memory toy dataset; returns a list of SilhouetteSequence (or raw frame lists)."""
    styles = make_styles(n_ids, seed)
    rng = np.random.default_rng(seed + 1)
    result = []
    for i, style in enumerate(styles):
        for view in views:
            for s in range(1, seqs + 1):
                raw = walker_sequence(style, view, frames, rng)
                subject = f"{i + 1:03d}"
                if preprocess:
                    result.append(SilhouetteSequence([preprocess_frame(r) for r in raw], subject,
                                                     float(view), "NM", s))
                else:
                    result.append((subject, float(view), s, raw))
    return result


def toy_split(seq_index):
    """Default toy protocol: recordings 1-2 train, 3 gallery, 4 probe."""
    return {1: "Training", 2: "Training", 3: "Gallery", 4: "Probe"}.get(seq_index, "Training")


def write_toy_dataset(root, n_ids=8, views=TOY_VIEWS, seqs=4, frames=16, seed=0):
    """Write raw PNG frames plus ``manifest.csv`` under ``root``; returns the manifest path."""
    root = Path(root)
    entries = []
    for subject, view, s, raw in toy_sequences(n_ids, views, seqs, frames, seed, preprocess=False):
        rel = Path(subject) / f"NM-{s:02d}" / f"{int(view):03d}"
        d = root / rel
        d.mkdir(parents=True, exist_ok=True)
        for t, img in enumerate(raw, start=1):
            Image.fromarray(img, mode="L").save(d / f"{t:03d}.png")
        entries.append(ManifestEntry(str(rel), subject, view, "NM", s, toy_split(s)))
    path = root / "manifest.csv"
    write_manifest(path, entries)
    return path


def casia_b_entries(prefix=""):
    """Manifest entries shaped like CASIA-B: 124 subjects x 11 views x 10 recordings."""
    entries = []
    for sub in range(1, 125):
        for cond, count in CASIA_B_LAYOUT:
            for s in range(1, count + 1):
                for view in CASIA_B_VIEWS:
                    path = f"{prefix}{sub:03d}/{cond.lower()}-{s:02d}/{format_view(view).zfill(3)}"
                    entries.append(ManifestEntry(path, f"{sub:03d}", view, cond, s))
    return entries


def ou_mvlp_entries(n_subjects=10307):
    """OU-MVLP-shaped entries: subjects x 14 views x 2 sessions (00 and 01)."""
    entries = []
    for sub in range(1, n_subjects + 1):
        for s in (0, 1):
            for view in OU_MVLP_VIEWS:
                entries.append(ManifestEntry(f"{sub:05d}/{s:02d}/{int(view):03d}", f"{sub:05d}", view, "NM", s))
    return entries
