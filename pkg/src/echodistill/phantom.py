"""Pulsating-ellipse phantom with exact ground truth.

Each frame shows a dark elliptical cavity whose semiaxes follow
``a(t) = a0 * (1 + amplitude * sin(2*pi*t/period + phase))`` inside a bright
wall ring, on a mid-grey background, with clipped Gaussian speckle.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data_model import (
    BinaryMaskSequence,
    ClipLabels,
    DatasetManifest,
    ManifestRecord,
    PolygonalTracing,
    Source,
    Split,
    VideoClip,
    save_manifest,
    save_mask_sequence,
    save_video,
)
from .errors import DegeneratePhantom, PhantomConfigError
from .seeding import derive_seed

BACKGROUND_LEVEL = 0.35
CAVITY_LEVEL = 0.2
WALL_LEVEL = 0.85


@dataclass(frozen=True)
class PhantomParams:
    period_frames: float = 20.0
    amplitude: float = 0.2
    phase: float = 0.0
    base_semiaxes: tuple = (12.0, 15.0)
    center: tuple = (32.0, 32.0)
    wall_thickness: float = 4.0
    noise_std: float = 0.05
    T: int = 64
    H: int = 64
    W: int = 64
    seed: int = 0

    def validate(self):
        a0, b0 = self.base_semiaxes
        cx, cy = self.center
        if not self.period_frames > 2:
            raise PhantomConfigError(f"period_frames must exceed 2, got {self.period_frames}")
        if not 0 <= self.amplitude < 1:
            raise PhantomConfigError(f"amplitude must lie in [0, 1), got {self.amplitude}")
        if self.wall_thickness < 1:
            raise PhantomConfigError("wall_thickness must be at least 1 px")
        if self.noise_std < 0:
            raise PhantomConfigError("noise_std must be nonnegative")
        if min(a0, b0) <= 0:
            raise PhantomConfigError("semiaxes must be positive")
        if min(self.T, self.H, self.W) < 1 or min(self.H, self.W) < 8:
            raise PhantomConfigError("frame size must be at least 8x8 and T >= 1")
        reach_x = a0 * (1 + self.amplitude) + self.wall_thickness
        reach_y = b0 * (1 + self.amplitude) + self.wall_thickness
        if max(reach_x, reach_y) >= min(self.H, self.W) / 2:
            raise PhantomConfigError(
                f"outer wall radius {max(reach_x, reach_y):.1f} px must stay below min(H, W)/2"
            )
        if cx - reach_x < 0 or cx + reach_x > self.W - 1 or cy - reach_y < 0 or cy + reach_y > self.H - 1:
            raise PhantomConfigError("phantom leaves the frame at this center")
        if self.period_frames >= self.T:
            raise PhantomConfigError("clip must contain at least one full beat (period < T)")

    def semiaxes(self, t):
        t = np.asarray(t, dtype=float)
        scale = 1.0 + self.amplitude * np.sin(2 * np.pi * t / self.period_frames + self.phase)
        return self.base_semiaxes[0] * scale, self.base_semiaxes[1] * scale

    def analytic_area(self, t):
        a, b = self.semiaxes(t)
        return np.pi * a * b


def _nearest_extremum(series, target, find_max):
    """Interior discrete local extremum closest to ``target`` (ties: earliest)."""
    s = -series if find_max else series
    interior = np.arange(1, len(s) - 1)
    is_ext = (s[interior] <= s[interior - 1]) & (s[interior] <= s[interior + 1])
    candidates = interior[is_ext]
    if len(candidates) == 0:
        return None
    return int(candidates[np.argmin(np.abs(candidates - target))])


def phase_frames(params):
    """(ED, ES) frames: extrema of the analytic area nearest the middle frame."""
    if params.amplitude == 0:
        raise DegeneratePhantom("amplitude 0 gives a constant area series with no ED/ES")
    area = params.analytic_area(np.arange(params.T))
    middle = params.T // 2
    ed = _nearest_extremum(area, middle, find_max=True)
    es = _nearest_extremum(area, middle, find_max=False)
    if ed is None or es is None or ed == es:
        raise DegeneratePhantom("no interior ED/ES pair in this clip")
    return ed, es


def ellipse_masks(params, grow=0.0):
    """Boolean T x H x W interiors of the (optionally grown) cavity ellipses."""
    a, b = params.semiaxes(np.arange(params.T))
    a, b = a + grow, b + grow
    yy, xx = np.mgrid[0 : params.H, 0 : params.W].astype(float)
    cx, cy = params.center
    dx = (xx[None] - cx) / a[:, None, None]
    dy = (yy[None] - cy) / b[:, None, None]
    return dx * dx + dy * dy <= 1.0


def wall_masks(params):
    return ellipse_masks(params, grow=params.wall_thickness) & ~ellipse_masks(params)


def tracing_for_frame(params, frame, n_cross=20):
    """Synthetic expert tracing: long axis plus perpendicular chords."""
    a, b = (float(v) for v in params.semiaxes(frame))
    cx, cy = params.center
    chords = []
    if b >= a:
        chords.append((cx, cy - b, cx, cy + b))
        for k in range(n_cross):
            y = -b + (k + 0.5) * 2 * b / n_cross
            half = a * math.sqrt(max(0.0, 1 - (y / b) ** 2))
            chords.append((cx - half, cy + y, cx + half, cy + y))
    else:
        chords.append((cx - a, cy, cx + a, cy))
        for k in range(n_cross):
            x = -a + (k + 0.5) * 2 * a / n_cross
            half = b * math.sqrt(max(0.0, 1 - (x / a) ** 2))
            chords.append((cx + x, cy - half, cx + x, cy + half))
    return PolygonalTracing(int(frame), tuple(chords))


def generate_phantom(params, clip_id="phantom", fps=50.0, with_tracings=True):
    """Render a phantom clip; returns ``(clip, truth_masks, labels)``."""
    params.validate()
    ed, es = phase_frames(params)
    cavity = ellipse_masks(params)
    wall = ellipse_masks(params, grow=params.wall_thickness) & ~cavity
    frames = np.full(cavity.shape, BACKGROUND_LEVEL, dtype=np.float64)
    frames[wall] = WALL_LEVEL
    frames[cavity] = CAVITY_LEVEL
    if params.noise_std > 0:
        rng = np.random.default_rng(params.seed)
        frames = frames + rng.normal(0.0, params.noise_std, size=frames.shape)
    frames = np.clip(frames, 0.0, 1.0)

    area = params.analytic_area(np.arange(params.T))
    ef = float(100.0 * (area[ed] - area[es]) / area[ed])
    tracings = (tracing_for_frame(params, ed), tracing_for_frame(params, es)) if with_tracings else ()
    labels = ClipLabels(ed, es, min(max(ef, 0.0), 100.0), tuple(sorted(tracings, key=lambda t: t.frame_index)))
    clip = VideoClip(clip_id, frames, fps, Source.PHANTOM)
    return clip, BinaryMaskSequence(cavity, clip_id), labels


def random_params(rng, T=64, H=64, W=64, noise_std=None):
    """Draw a plausible phantom at the given size (scaled from a 64 px design)."""
    scale = min(H, W) / 64.0
    a0 = rng.uniform(10.0, 15.0) * scale
    b0 = rng.uniform(12.0, 17.0) * scale
    period = rng.uniform(12.0, min(28.0, T - 2.0))
    return PhantomParams(
        period_frames=float(period),
        amplitude=float(rng.uniform(0.12, 0.25)),
        phase=float(rng.uniform(0.0, 2 * np.pi)),
        base_semiaxes=(float(a0), float(b0)),
        center=(float(W / 2 + rng.uniform(-2.5, 2.5) * scale), float(H / 2 + rng.uniform(-2.5, 2.5) * scale)),
        wall_thickness=float(rng.uniform(3.0, 5.0) * scale),
        noise_std=float(rng.uniform(0.03, 0.07)) if noise_std is None else float(noise_std),
        T=int(T),
        H=int(H),
        W=int(W),
        seed=int(rng.integers(2**31)),
    )


def write_phantom_dataset(out_dir, n_train, n_val, n_test, T=64, H=64, W=64, seed=0, noise_std=None):
    """Generate clips, truth masks and a manifest under ``out_dir``."""
    out_dir = Path(out_dir)
    records, params_by_clip = [], {}
    counts = ((Split.TRAIN, n_train), (Split.VAL, n_val), (Split.TEST, n_test))
    for split, n in counts:
        for i in range(n):
            clip_id = f"PH_{split.value}_{i:04d}"
            rng = np.random.default_rng(derive_seed(seed, "phantom-gen", clip_id))
            while True:
                params = random_params(rng, T, H, W, noise_std)
                try:
                    params.validate()
                    phase_frames(params)
                    break
                except (PhantomConfigError, DegeneratePhantom):
                    continue
            # beats per second = 1 .. 1.7 (60 - 100 bpm)
            fps = float(np.round(params.period_frames * rng.uniform(1.0, 1.7), 3))
            clip, truth, labels = generate_phantom(params, clip_id, fps)
            save_video(clip, out_dir / "videos" / f"{clip_id}.raw")
            save_mask_sequence(truth, out_dir / "masks" / f"{clip_id}.raw")
            records.append(ManifestRecord(clip_id, split, fps, T, labels))
            params_by_clip[clip_id] = asdict(params)
    manifest = DatasetManifest(tuple(records), {})
    save_manifest(manifest, out_dir / "manifest.csv")
    return manifest, params_by_clip
