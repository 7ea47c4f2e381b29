"""Teacher-to-student mask distillation.

The student is trained against cached teacher soft masks on random
fixed-length windows of each clip. The parameters kept are those of the epoch
with the lowest validation loss, measured against the teacher as well.
"""

from __future__ import annotations

import copy
import enum
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .data_model import SoftMaskSequence, load_mask_sequence, save_mask_sequence
from .errors import ConfigError, DataError, DegenerateCalibration, DivergenceError, ShapeError
from .model import build_model, forward
from .seeding import derive_seed
from .seg_metrics import dice_per_frame
from .tables import write_csv

log = logging.getLogger(__name__)

THRESHOLD_GRID = tuple(round(0.05 * k, 2) for k in range(1, 20))
SMOOTH_DICE_EPS = 1.0


class Optimizer(str, enum.Enum):
    SGD = "SGD"
    ADAM = "ADAM"


class Loss(str, enum.Enum):
    DICE = "DICE"
    BCE = "BCE"
    DICE_PLUS_BCE = "DICE_PLUS_BCE"


# -- teachers -------------------------------------------------------------------


class Teacher:
    """Anything mapping a VideoClip to a SoftMaskSequence of the same shape."""

    name = "teacher"
    version = "0"

    def __call__(self, clip):
        raise NotImplementedError


class AnalyticTeacher(Teacher):
    """Imperfect stand-in teacher built from phantom ground truth.

    Each frame's truth mask is eroded or dilated by one pixel (or left alone)
    at random, then box-blurred to give soft edges.
    """

    name = "analytic-phantom"
    version = "1"

    def __init__(self, truth_lookup, seed=0):
        self.truth_lookup = truth_lookup
        self.seed = seed

    def __call__(self, clip):
        truth = self.truth_lookup(clip.id)
        if truth is None:
            raise KeyError(f"no ground truth for clip {clip.id}")
        rng = np.random.default_rng(derive_seed(self.seed, "teacher", clip.id))
        moves = rng.integers(-1, 2, size=len(truth.masks))
        cross = ndimage.generate_binary_structure(2, 1)
        out = np.empty(truth.masks.shape, dtype=np.float32)
        for t, (mask, move) in enumerate(zip(truth.masks, moves)):
            if move < 0:
                mask = ndimage.binary_erosion(mask, cross)
            elif move > 0:
                mask = ndimage.binary_dilation(mask, cross)
            out[t] = ndimage.uniform_filter(mask.astype(np.float32), size=3, mode="constant")
        return SoftMaskSequence(np.clip(out, 0.0, 1.0), clip.id)


class PseudoLabelStore:
    """Teacher outputs cached as f32 rasters under ``<cache>/<name>-<version>/``."""

    def __init__(self, cache_dir, teacher_name, teacher_version):
        self.root = Path(cache_dir) / f"{teacher_name}-{teacher_version}"

    def path(self, clip_id):
        return self.root / f"{clip_id}.raw"

    def __contains__(self, clip_id):
        return self.path(clip_id).exists()

    def get(self, clip_id):
        if clip_id not in self:
            return None
        return load_mask_sequence(self.path(clip_id), clip_id)

    def put(self, masks):
        save_mask_sequence(SoftMaskSequence(masks.masks, masks.clip_id), self.path(masks.clip_id))

    @property
    def skiplist_path(self):
        return self.root / "skiplist.csv"


@dataclass
class PseudoLabelRun:
    store: PseudoLabelStore
    computed: list = field(default_factory=list)
    reused: list = field(default_factory=list)
    skipped: dict = field(default_factory=dict)


def generate_pseudolabels(teacher, manifest, cache_dir, load_clip):
    """Run the teacher over every clip not yet cached; failures go to a skip-list."""
    store = PseudoLabelStore(cache_dir, teacher.name, teacher.version)
    run = PseudoLabelRun(store)
    for record in manifest:
        if record.clip_id in store:
            run.reused.append(record.clip_id)
            continue
        try:
            clip = load_clip(record)
            out = teacher(clip)
            masks = out.masks if isinstance(out, SoftMaskSequence) else np.asarray(out, dtype=np.float32)
            if masks.shape != clip.frames.shape:
                raise ShapeError(f"teacher returned {masks.shape} for clip of shape {clip.frames.shape}")
            store.put(SoftMaskSequence(masks, record.clip_id))
            run.computed.append(record.clip_id)
        except Exception as exc:  # one bad clip must not stop the run
            log.warning("teacher failed on %s: %s", record.clip_id, exc)
            run.skipped[record.clip_id] = (type(exc).__name__, str(exc))
    if run.skipped:
        rows = [[k, v[0], v[1]] for k, v in sorted(run.skipped.items())]
        write_csv(store.skiplist_path, ["clip_id", "error", "message"], rows)
    return run


# -- losses ---------------------------------------------------------------------


def soft_dice_loss(pred, target, eps=SMOOTH_DICE_EPS):
    inter = (pred * target).sum()
    return 1.0 - (2.0 * inter + eps) / (pred.sum() + target.sum() + eps)


def bce_loss(pred, target):
    # clamp keeps log finite when the sigmoid saturates
    p = pred.clamp(1e-7, 1 - 1e-7)
    loss = -(target * torch.log(p) + (1 - target) * torch.log(1 - p)).mean()
    return loss.clamp_min(0.0)


def bce_with_logits(logits, target):
    return torch.nn.functional.binary_cross_entropy_with_logits(logits, target)


def mask_loss(kind, logits, target):
    kind = Loss(kind)
    if kind is Loss.BCE:
        return bce_with_logits(logits, target)
    probs = torch.sigmoid(logits)
    if kind is Loss.DICE:
        return soft_dice_loss(probs, target)
    return soft_dice_loss(probs, target) + bce_with_logits(logits, target)


# -- training -------------------------------------------------------------------


@dataclass
class TrainingConfig:
    loss: Loss = Loss.DICE_PLUS_BCE
    optimizer: Optimizer = Optimizer.SGD
    learning_rate: float = 0.05
    decay_factor: float = 0.1
    decay_at_fraction: float = 0.7
    momentum: float = 0.9
    batch_size: int = 8
    sequence_length: int = 32
    val_sequence_length: int | None = None
    max_epochs: int = 400
    grad_clip: float | None = 5.0
    carry_state: bool = False
    seed: int = 0

    def __post_init__(self):
        self.loss = Loss(self.loss)
        self.optimizer = Optimizer(self.optimizer)
        if self.sequence_length < 2:
            raise ConfigError("sequence_length must be at least 2")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be nonnegative")

    def to_dict(self):
        d = asdict(self)
        d["loss"] = self.loss.value
        d["optimizer"] = self.optimizer.value
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def lr_at(self, epoch):
        """Step decay: multiply by ``decay_factor`` from 70% of the run onward."""
        if epoch >= math.floor(self.decay_at_fraction * self.max_epochs):
            return self.learning_rate * self.decay_factor
        return self.learning_rate


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class TrainingHistory:
    epochs: list = field(default_factory=list)

    @property
    def best_epoch(self):
        # first minimum wins
        vals = [e.val_loss for e in self.epochs]
        return int(np.argmin(vals)) if vals else -1

    def rows(self):
        return [[e.epoch, e.train_loss, e.val_loss] for e in self.epochs]

    header = ["epoch", "train_loss", "val_loss"]

    def save_csv(self, path):
        write_csv(path, self.header, self.rows())


def _load_split(manifest, split, store, load_clip):
    frames, targets, ids = [], [], []
    for record in manifest.split(split):
        target = store.get(record.clip_id)
        if target is None:
            continue
        clip = load_clip(record)
        if target.masks.shape != clip.frames.shape:
            raise ShapeError(f"pseudo-label shape {target.masks.shape} != clip shape {clip.frames.shape} for {record.clip_id}")
        frames.append(clip.frames)
        targets.append(target.masks)
        ids.append(record.clip_id)
    return frames, targets, ids


def _windows(frames, targets, length, rng):
    xs, ys = [], []
    for x, y in zip(frames, targets):
        T = len(x)
        n = min(length, T)
        start = int(rng.integers(0, T - n + 1))
        xs.append(x[start : start + n])
        ys.append(y[start : start + n])
    return xs, ys


def _stack_state(states):
    """Concatenate per-clip recurrent states along the batch axis."""
    return [(torch.cat([s[k][0] for s in states]), torch.cat([s[k][1] for s in states])) for k in range(len(states[0]))]


def _unstack_state(state, n):
    return [[(h[i : i + 1].detach(), c[i : i + 1].detach()) for h, c in state] for i in range(n)]


class _StatefulWindows:
    """Consecutive windows per clip with the recurrent state carried between epochs.

    Each clip keeps a cursor. An epoch trains on ``[cursor, cursor + L)``
    starting from the state left by the previous window; when the clip runs
    out the cursor restarts at a random offset below ``L`` from a zero state.
    """

    def __init__(self, model, frames, targets, length):
        self.model, self.frames, self.targets, self.length = model, frames, targets, length
        self.cursor = [None] * len(frames)
        self.state = [None] * len(frames)

    def batch(self, indices, rng):
        xs, ys, states = [], [], []
        for i in indices:
            T = len(self.frames[i])
            n = min(self.length, T)
            if self.cursor[i] is None or self.cursor[i] + n > T:
                self.cursor[i] = int(rng.integers(0, min(n, T - n + 1)))
                H, W = self.frames[i].shape[1:]
                self.state[i] = self.model.initial_state(1, H, W)
            start = self.cursor[i]
            xs.append(self.frames[i][start : start + n])
            ys.append(self.targets[i][start : start + n])
            states.append(self.state[i])
        return _stack(xs), _stack(ys), _stack_state(states)

    def advance(self, indices, state):
        for i, s in zip(indices, _unstack_state(state, len(indices))):
            self.cursor[i] += self.length
            self.state[i] = s


def _stack(chunks):
    n = min(len(c) for c in chunks)
    return torch.from_numpy(np.stack([c[:n] for c in chunks]).astype(np.float32))


def validation_loss(model, frames, targets, config):
    """Mean loss over VAL clips, each processed from a zero state."""
    length = config.val_sequence_length
    total, count = 0.0, 0
    model.eval()
    with torch.no_grad():
        for i in range(0, len(frames), config.batch_size):
            xs = [f[:length] if length else f for f in frames[i : i + config.batch_size]]
            ys = [t[:length] if length else t for t in targets[i : i + config.batch_size]]
            x, y = _stack(xs), _stack(ys)
            loss = mask_loss(config.loss, model(x), y)
            total += float(loss) * len(xs)
            count += len(xs)
    model.train()
    return total / count


def train(student_config, store, manifest, config, load_clip, on_epoch_end=None):
    """Distil the teacher into a fresh student; returns ``(model, history)``.

    The returned parameters are those of ``history.best_epoch``.
    ``on_epoch_end(epoch, model, record)`` is called after each epoch.
    """
    train_x, train_y, _ = _load_split(manifest, "TRAIN", store, load_clip)
    val_x, val_y, _ = _load_split(manifest, "VAL", store, load_clip)
    if not train_x:
        raise ConfigError("TRAIN split has no clips with pseudo-labels")
    if not val_x:
        raise ConfigError("VAL split has no clips with pseudo-labels")

    torch.manual_seed(derive_seed(config.seed, "torch"))
    model = build_model(student_config, derive_seed(config.seed, "init"))
    model.train()
    if config.optimizer is Optimizer.ADAM:
        optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=(config.momentum, 0.999))
    else:
        optimizer = torch.optim.SGD(model.parameters(), lr=config.learning_rate, momentum=config.momentum)
    history = TrainingHistory()
    best_state, best_val = None, math.inf
    stateful = _StatefulWindows(model, train_x, train_y, config.sequence_length) if config.carry_state else None

    for epoch in range(config.max_epochs):
        for group in optimizer.param_groups:
            group["lr"] = config.lr_at(epoch)
        rng = np.random.default_rng(derive_seed(config.seed, "epoch", epoch))
        order = rng.permutation(len(train_x))
        if not config.carry_state:
            xs, ys = _windows([train_x[i] for i in order], [train_y[i] for i in order], config.sequence_length, rng)
        running, steps = 0.0, 0
        for step, i in enumerate(range(0, len(order), config.batch_size)):
            if config.carry_state:
                batch = order[i : i + config.batch_size]
                x, y, state = stateful.batch(batch, rng)
                logits, state = model(x, state, return_state=True)
                stateful.advance(batch, state)
            else:
                x, y = _stack(xs[i : i + config.batch_size]), _stack(ys[i : i + config.batch_size])
                logits = model(x)
            loss = mask_loss(config.loss, logits, y)
            if not torch.isfinite(loss):
                raise DivergenceError(epoch, step, float(loss.detach()))
            optimizer.zero_grad()
            loss.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()
            running += float(loss.detach())
            steps += 1
        val = validation_loss(model, val_x, val_y, config)
        if not math.isfinite(val):
            raise DivergenceError(epoch, "validation", val)
        record = EpochRecord(epoch, running / steps, val)
        history.epochs.append(record)
        log.info("epoch %d train %.5f val %.5f", epoch, record.train_loss, val)
        if val < best_val:
            best_val, best_state = val, copy.deepcopy(model.state_dict())
        if on_epoch_end is not None:
            on_epoch_end(epoch, model, record)

    model.load_state_dict(best_state)
    model.eval()
    return model, history


# -- threshold calibration ------------------------------------------------------


def dice_curve(student_masks, teacher_masks, grid=THRESHOLD_GRID):
    """Mean per-frame Dice of thresholded students vs teacher@0.5, per threshold."""
    teacher_bin = [np.asarray(t) >= 0.5 for t in teacher_masks]
    curve = []
    for level in grid:
        scores = [dice_per_frame(np.asarray(s) >= level, t) for s, t in zip(student_masks, teacher_bin)]
        curve.append(float(np.mean(np.concatenate(scores))))
    return np.array(curve)


def select_threshold(curve, grid=THRESHOLD_GRID, tol=1e-12):
    """Best grid point; ties go to the one nearest 0.5."""
    curve = np.asarray(curve)
    if curve.max() - curve.min() <= tol:
        warnings.warn("Dice is flat over the threshold grid; falling back to 0.5", DegenerateCalibration, stacklevel=2)
        return 0.5
    best = curve.max()
    tied = [g for g, c in zip(grid, curve) if c >= best - tol]
    return float(min(tied, key=lambda g: (abs(g - 0.5), g)))


def calibrate_from_masks(student_masks, teacher_masks, grid=THRESHOLD_GRID):
    return select_threshold(dice_curve(student_masks, teacher_masks, grid), grid)


def calibrate_threshold(model, manifest, store, load_clip, prepad_frames=0):
    students, teachers = [], []
    for record in manifest.split("VAL"):
        target = store.get(record.clip_id)
        if target is None:
            continue
        students.append(forward(model, load_clip(record), prepad_frames).masks)
        teachers.append(target.masks)
    if not students:
        raise DataError("VAL split has no clips with pseudo-labels")
    return calibrate_from_masks(students, teachers)
