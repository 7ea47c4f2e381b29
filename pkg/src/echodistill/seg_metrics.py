"""Overlap metrics and labelled-frame evaluation."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data_model import load_mask_sequence
from .errors import ShapeError


class Policy(str, enum.Enum):
    FULL = "FULL"
    EXCLUDE_CORRUPTED = "EXCLUDE_CORRUPTED"


def _check(a, b):
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(a, b):
    """2|A & B| / (|A| + |B|); two empty masks score 1."""
    a, b = _check(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def iou(a, b):
    """|A & B| / |A | B|; two empty masks score 1."""
    a, b = _check(a, b)
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(a, b).sum()) / union


def dice_per_frame(a, b):
    """Vectorised Dice over the leading axis of two T x H x W stacks."""
    a, b = _check(a, b)
    a, b = a.reshape(len(a), -1), b.reshape(len(b), -1)
    inter = np.logical_and(a, b).sum(axis=1)
    total = a.sum(axis=1) + b.sum(axis=1)
    out = np.ones(len(a))
    nz = total > 0
    out[nz] = 2.0 * inter[nz] / total[nz]
    return out


@dataclass
class ClipScore:
    clip_id: str
    dice_ed: float
    dice_es: float
    iou_ed: float
    iou_es: float
    missing_mask: bool = False
    empty_pair: bool = False

    def frames(self):
        return ((self.dice_ed, self.iou_ed), (self.dice_es, self.iou_es))


@dataclass
class SegScoreReport:
    policy: Policy
    clips: list = field(default_factory=list)
    excluded: dict = field(default_factory=dict)
    aggregates: dict = field(default_factory=dict)

    @property
    def mean_dice(self):
        return self.aggregates[self.policy.value]["mean_dice"]

    @property
    def mean_iou(self):
        return self.aggregates[self.policy.value]["mean_iou"]

    def rows(self):
        return [
            [c.clip_id, c.dice_ed, c.dice_es, c.iou_ed, c.iou_es, c.missing_mask, c.empty_pair]
            for c in self.clips
        ]

    header = ["clip_id", "dice_ed", "dice_es", "iou_ed", "iou_es", "missing_mask", "empty_pair"]


def _aggregate(scores):
    """Per-frame (primary) and per-clip means over a list of ClipScore."""
    if not scores:
        nan = float("nan")
        return {"mean_dice": nan, "mean_iou": nan, "per_clip_mean_dice": nan, "per_clip_mean_iou": nan, "n_clips": 0, "n_frames": 0}
    frame_dice = [d for s in scores for d, _ in s.frames()]
    frame_iou = [i for s in scores for _, i in s.frames()]
    clip_dice = [np.mean([d for d, _ in s.frames()]) for s in scores]
    clip_iou = [np.mean([i for _, i in s.frames()]) for s in scores]
    return {
        "mean_dice": float(np.mean(frame_dice)),
        "mean_iou": float(np.mean(frame_iou)),
        "per_clip_mean_dice": float(np.mean(clip_dice)),
        "per_clip_mean_iou": float(np.mean(clip_iou)),
        "n_clips": len(scores),
        "n_frames": len(frame_dice),
    }


def evaluate_segmentation(masks, manifest, label_mask, policy=Policy.FULL):
    """Score predicted masks on the human-labelled ED and ES frames.

    ``masks`` maps clip_id to a BinaryMaskSequence, or is a directory of
    ``<clip_id>.raw`` mask files. ``label_mask(record, frame, shape)`` returns
    the reference mask. A labelled clip without a prediction scores 0.
    """
    policy = Policy(policy)
    if isinstance(masks, (str, Path)):
        mask_dir = Path(masks)

        def lookup(clip_id):
            return load_binary_masks(mask_dir / f"{clip_id}.raw", clip_id)
    else:
        lookup = masks.get

    report = SegScoreReport(policy)
    for record in manifest:
        if record.labels is None:
            report.excluded[record.clip_id] = "NO_LABELS"
            continue
        pred = lookup(record.clip_id)
        frames = (record.labels.ed_frame, record.labels.es_frame)
        if pred is None:
            report.clips.append(ClipScore(record.clip_id, 0.0, 0.0, 0.0, 0.0, missing_mask=True))
            continue
        values, empty = [], False
        for frame in frames:
            ref = label_mask(record, frame, pred.masks.shape[1:])
            if ref is None:
                raise ShapeError(f"clip {record.clip_id} has no reference mask at frame {frame}")
            p = pred.masks[frame]
            empty |= not p.any() and not np.asarray(ref).any()
            values.append((dice(p, ref), iou(p, ref)))
        (d_ed, i_ed), (d_es, i_es) = values
        report.clips.append(ClipScore(record.clip_id, d_ed, d_es, i_ed, i_es, empty_pair=empty))

    kept = [c for c in report.clips if not manifest.is_corrupted(c.clip_id)]
    for c in report.clips:
        if manifest.is_corrupted(c.clip_id) and policy is Policy.EXCLUDE_CORRUPTED:
            report.excluded[c.clip_id] = manifest.corrupted[c.clip_id].value
    report.aggregates[Policy.EXCLUDE_CORRUPTED.value] = _aggregate(kept)
    if policy is Policy.FULL:
        report.aggregates[Policy.FULL.value] = _aggregate(report.clips)
    else:
        report.clips = kept
    return report


def load_binary_masks(path, clip_id):
    if not path.exists():
        return None
    seq = load_mask_sequence(path, clip_id)
    return seq if seq.masks.dtype == bool else seq.threshold()
