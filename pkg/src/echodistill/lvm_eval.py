"""Label-free mask evaluation with an image-text similarity scorer.

Two protocols blacken part of each frame and ask the scorer about what is
left:

* overflow: blacken the mask and score "WALL". If the mask spilled onto the
  myocardium the walls disappear and the score drops.
* coverage: dilate the mask, blacken it and score "LEFT VENTRICLE" minus
  "NOTHING". A mask that covers the whole cavity leaves no ventricle to
  recognise, so lower is better for this difference.

A third helper turns the "MITRAL VALVE IS CLOSED" / "OPEN" contrast into a
cumulative, detrended signal usable in place of a mask-area series.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ShapeError

WALL = "WALL"
LEFT_VENTRICLE = "LEFT VENTRICLE"
NOTHING = "NOTHING"
VALVE_CLOSED = "THE MITRAL VALVE IS CLOSED"
VALVE_OPEN = "THE MITRAL VALVE IS OPEN"
PROMPTS = (WALL, LEFT_VENTRICLE, NOTHING, VALVE_CLOSED, VALVE_OPEN)

DEFAULT_DILATION_PX = 5
UNLABELLED_STRIDE = 8


class PromptScorer:
    """``score(image, prompt, clip_id, frame) -> float`` for one grey frame.

    ``clip_id`` and ``frame`` identify the image for offline or keyed scorers;
    pure image scorers may ignore them.
    """

    name = "scorer"
    reentrant = True

    def score(self, image, prompt, clip_id=None, frame=None):
        raise NotImplementedError

    def __call__(self, image, prompt, clip_id=None, frame=None):
        return float(self.score(image, prompt, clip_id, frame))


class ConstantScorer(PromptScorer):
    name = "constant"

    def __init__(self, value=0.0):
        self.value = float(value)

    def score(self, image, prompt, clip_id=None, frame=None):
        return self.value


@dataclass
class MockScorerSpec:
    """Ground truth the mock scorer reads its answers from.

    ``cavity(clip_id)`` and optionally ``wall(clip_id)`` return boolean
    T x H x W arrays (or mask sequences). Without ``wall`` the ring is the
    cavity dilated by ``wall_px`` minus the cavity.
    """

    cavity: object
    wall: object = None
    wall_px: int = 3


class MockScorer(PromptScorer):
    """Deterministic scorer whose answers are simple functions of the pixels.

    WALL            fraction of true wall-ring pixels still non-black
    LEFT VENTRICLE  fraction of true cavity pixels still non-black
    NOTHING         1 - mean image intensity
    VALVE CLOSED    +(A[t] - A[t-1]) / max|A[t] - A[t-1]| from true cavity areas
    VALVE OPEN      the negative of VALVE CLOSED
    anything else   0
    """

    name = "mock"

    def __init__(self, spec):
        self.spec = spec
        self._cache = {}

    def _truth(self, clip_id):
        if clip_id not in self._cache:
            cavity = self.spec.cavity(clip_id)
            if cavity is None:
                raise KeyError(clip_id)
            cavity = np.asarray(getattr(cavity, "masks", cavity), dtype=bool)
            if self.spec.wall is not None:
                wall = np.asarray(getattr(self.spec.wall(clip_id), "masks", self.spec.wall(clip_id)), dtype=bool)
            else:
                disc = _square(self.spec.wall_px)
                wall = np.stack([ndimage.binary_dilation(c, disc) & ~c for c in cavity])
            area = cavity.reshape(len(cavity), -1).sum(axis=1).astype(float)
            step = np.diff(area, prepend=area[0])
            scale = np.abs(step).max()
            valve = step / scale if scale > 0 else np.zeros_like(step)
            self._cache[clip_id] = (cavity, wall, valve)
        return self._cache[clip_id]

    def score(self, image, prompt, clip_id=None, frame=None):
        cavity, wall, valve = self._truth(clip_id)
        image = np.asarray(image, dtype=float)
        if prompt == WALL:
            ring = wall[frame]
            return float((image[ring] > 0).mean()) if ring.any() else 0.0
        if prompt == LEFT_VENTRICLE:
            cav = cavity[frame]
            return float((image[cav] > 0).mean()) if cav.any() else 0.0
        if prompt == NOTHING:
            return float(1.0 - image.mean())
        if prompt == VALVE_CLOSED:
            return float(valve[frame])
        if prompt == VALVE_OPEN:
            return float(-valve[frame])
        return 0.0


def build_mock_scorer(spec):
    return MockScorer(spec)


class ScoresFileScorer(PromptScorer):
    """Offline scorer backed by a CSV of ``clip_id,frame,prompt,similarity``."""

    name = "scores-file"

    def __init__(self, path):
        self.path = path
        self.table = {}
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                key = (row["clip_id"], int(row["frame"]), row["prompt"])
                self.table[key] = float(row["similarity"])

    def score(self, image, prompt, clip_id=None, frame=None):
        try:
            return self.table[(clip_id, int(frame), prompt)]
        except KeyError:
            raise KeyError(f"no precomputed score for clip {clip_id}, frame {frame}, prompt {prompt!r}") from None


def _square(radius):
    return np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)


def evaluated_frames(num_frames, labels=None, stride=UNLABELLED_STRIDE):
    if labels is not None:
        return sorted({labels.ed_frame, labels.es_frame})
    return list(range(0, num_frames, stride))


def _masks_array(masks, clip):
    arr = np.asarray(getattr(masks, "masks", masks), dtype=bool)
    if arr.shape != clip.frames.shape:
        raise ShapeError(f"mask shape {arr.shape} does not match clip {clip.frames.shape}")
    return arr


class ScorerFailure(RuntimeError):
    pass


def _ask(scorer, image, prompt, clip_id, frame):
    try:
        return scorer(image, prompt, clip_id, frame)
    except KeyError:
        raise
    except Exception as exc:
        raise ScorerFailure(f"scorer failed on clip {clip_id}, frame {frame}, prompt {prompt!r}: {exc}") from exc


def overflow_score(clip, masks, scorer, frames=None):
    """Mean "WALL" similarity with the masked area blackened (higher is better)."""
    arr = _masks_array(masks, clip)
    frames = evaluated_frames(len(arr)) if frames is None else frames
    values = []
    for t in frames:
        image = np.where(arr[t], 0.0, clip.frames[t])
        values.append(_ask(scorer, image, WALL, clip.id, t))
    return float(np.mean(values))


def coverage_score(clip, masks, scorer, dilation_px=DEFAULT_DILATION_PX, frames=None):
    """Mean of sim("LEFT VENTRICLE") - sim("NOTHING") after blackening the dilated mask.

    Lower means the mask removed more of the ventricle.
    """
    arr = _masks_array(masks, clip)
    frames = evaluated_frames(len(arr)) if frames is None else frames
    element = _square(dilation_px)
    values = []
    for t in frames:
        grown = ndimage.binary_dilation(arr[t], element) if dilation_px > 0 else arr[t]
        image = np.where(grown, 0.0, clip.frames[t])
        lv = _ask(scorer, image, LEFT_VENTRICLE, clip.id, t)
        nothing = _ask(scorer, image, NOTHING, clip.id, t)
        values.append(lv - nothing)
    return float(np.mean(values))


def detrend(signal):
    """Remove the least-squares line; result has zero mean and zero slope."""
    y = np.asarray(signal, dtype=float)
    t = np.arange(len(y), dtype=float)
    tc = t - t.mean()
    slope = float(np.dot(tc, y - y.mean()) / np.dot(tc, tc)) if len(y) > 1 else 0.0
    return y - y.mean() - slope * tc


def mitral_phase_signal(clip, scorer):
    """Detrended cumulative sum of sim(CLOSED) - sim(OPEN), one value per frame."""
    T = clip.num_frames
    if T < 3:
        raise ShapeError(f"need at least 3 frames, got {T}")
    diffs = np.empty(T)
    for t in range(T):
        image = clip.frames[t]
        diffs[t] = _ask(scorer, image, VALVE_CLOSED, clip.id, t) - _ask(scorer, image, VALVE_OPEN, clip.id, t)
    return detrend(np.cumsum(diffs))


@dataclass
class MaskQualityReport:
    clips: list = field(default_factory=list)  # (clip_id, overflow, coverage)

    @property
    def mean_overflow(self):
        return float(np.mean([c[1] for c in self.clips])) if self.clips else float("nan")

    @property
    def mean_coverage(self):
        return float(np.mean([c[2] for c in self.clips])) if self.clips else float("nan")

    def summary(self):
        return {
            "n_clips": len(self.clips),
            "mean_overflow_wall": self.mean_overflow,
            "mean_coverage_lv_minus_nothing": self.mean_coverage,
            "mean_coverage_negated": -self.mean_coverage,
            "orientation": "overflow: higher is better; coverage difference: lower is better (negated: higher is better)",
        }


def evaluate_mask_quality(items, scorer, dilation_px=DEFAULT_DILATION_PX):
    """``items`` yields ``(clip, masks, labels_or_None)``."""
    report = MaskQualityReport()
    for clip, masks, labels in items:
        frames = evaluated_frames(clip.num_frames, labels)
        report.clips.append(
            (clip.id, overflow_score(clip, masks, scorer, frames), coverage_score(clip, masks, scorer, dilation_px, frames))
        )
    return report
