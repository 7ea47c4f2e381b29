"""Video, mask and label containers plus their on-disk formats.

On-disk layout of a dataset directory::

    manifest.csv      clip_id,split,fps,num_frames,ed_frame,es_frame,ef
    corrupted.csv     clip_id,reason
    tracings.csv      clip_id,frame,chord,x1,y1,x2,y2   (optional)
    videos/<id>.raw   raw little-endian tensor, sidecar videos/<id>.json
    masks/<id>.raw    optional ground-truth masks (u8 0/1), same sidecar

A video may also be a directory of PNG frames; ``load_video`` detects which.
"""

from __future__ import annotations

import csv
import enum
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DegenerateTracing, InvalidTracing, ManifestError, ShapeError

# The three clips shown as manifestly broken in the EchoNet-Dynamic release.
KNOWN_CORRUPTED_VIDEOS = (
    "0X39348579B2E55470",
    "0X3693781992586497",
    "0X790C871B162806D2",
)

CHORDS_PER_TRACING = 21
RECORD_COLUMNS = ("clip_id", "split", "fps", "num_frames", "ed_frame", "es_frame", "ef")
CORRUPTED_COLUMNS = ("clip_id", "reason")
TRACING_COLUMNS = ("clip_id", "frame", "chord", "x1", "y1", "x2", "y2")

_DTYPES = {"u8": np.dtype("<u1"), "f32": np.dtype("<f4")}


class Source(str, enum.Enum):
    REAL = "REAL"
    SYNTHETIC = "SYNTHETIC"
    PHANTOM = "PHANTOM"


class Split(str, enum.Enum):
    TRAIN = "TRAIN"
    VAL = "VAL"
    TEST = "TEST"


class CorruptionReason(str, enum.Enum):
    VIDEO_CORRUPT = "VIDEO_CORRUPT"
    LABEL_CORRUPT = "LABEL_CORRUPT"
    ED_ES_TOO_CLOSE = "ED_ES_TOO_CLOSE"


def _frozen(array, dtype=None):
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class VideoClip:
    id: str
    frames: np.ndarray
    fps: float
    source: Source = Source.REAL

    def __post_init__(self):
        frames = _frozen(self.frames, np.float32)
        if frames.ndim != 3:
            raise ShapeError(f"frames must be T x H x W, got shape {frames.shape}")
        T, H, W = frames.shape
        if T < 1:
            raise ShapeError("clip needs at least one frame (T)")
        if H < 8 or W < 8:
            raise ShapeError(f"frames must be at least 8x8, got H={H}, W={W}")
        if frames.min() < 0.0 or frames.max() > 1.0:
            raise ValueError("intensities must lie in [0, 1]")
        if not self.fps > 0:
            raise ValueError(f"fps must be positive, got {self.fps}")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "source", Source(self.source))

    @property
    def shape(self):
        return self.frames.shape

    @property
    def num_frames(self):
        return self.frames.shape[0]


@dataclass(frozen=True, eq=False)
class BinaryMaskSequence:
    masks: np.ndarray
    clip_id: str

    def __post_init__(self):
        masks = np.asarray(self.masks)
        if masks.dtype != np.bool_:
            raise TypeError(f"binary masks must be boolean, got {masks.dtype}")
        if masks.ndim != 3:
            raise ShapeError(f"masks must be T x H x W, got shape {masks.shape}")
        object.__setattr__(self, "masks", _frozen(masks))

    @property
    def shape(self):
        return self.masks.shape

    def areas(self):
        return self.masks.reshape(len(self.masks), -1).sum(axis=1)


@dataclass(frozen=True, eq=False)
class SoftMaskSequence:
    masks: np.ndarray
    clip_id: str

    def __post_init__(self):
        masks = _frozen(self.masks, np.float32)
        if masks.ndim != 3:
            raise ShapeError(f"masks must be T x H x W, got shape {masks.shape}")
        if masks.size and (np.isnan(masks).any() or masks.min() < 0.0 or masks.max() > 1.0):
            raise ValueError("soft masks must be probabilities in [0, 1]")
        object.__setattr__(self, "masks", masks)

    @property
    def shape(self):
        return self.masks.shape

    def threshold(self, level=0.5):
        return BinaryMaskSequence(self.masks >= level, self.clip_id)


@dataclass(frozen=True)
class PolygonalTracing:
    """Expert tracing: chord 0 is the long axis, the rest cross it."""

    frame_index: int
    chords: tuple

    def __post_init__(self):
        chords = tuple(tuple(float(v) for v in c) for c in self.chords)
        if any(len(c) != 4 for c in chords):
            raise InvalidTracing("each chord needs exactly (x1, y1, x2, y2)")
        object.__setattr__(self, "chords", chords)

    @property
    def complete(self):
        return len(self.chords) == CHORDS_PER_TRACING


@dataclass(frozen=True)
class ClipLabels:
    ed_frame: int
    es_frame: int
    ef: float = float("nan")
    tracings: tuple = ()

    def __post_init__(self):
        if self.ed_frame < 0 or self.es_frame < 0:
            raise ValueError("ED/ES frame indices must be nonnegative")
        if self.ed_frame == self.es_frame:
            raise ValueError("ED and ES frames must differ")
        if not math.isnan(self.ef) and not 0.0 <= self.ef <= 100.0:
            raise ValueError(f"EF must be a percentage, got {self.ef}")
        object.__setattr__(self, "tracings", tuple(self.tracings))

    def __eq__(self, other):
        if not isinstance(other, ClipLabels):
            return NotImplemented
        same_ef = (self.ef == other.ef) or (math.isnan(self.ef) and math.isnan(other.ef))
        return (
            self.ed_frame == other.ed_frame
            and self.es_frame == other.es_frame
            and same_ef
            and self.tracings == other.tracings
        )

    def tracing_at(self, frame):
        for tracing in self.tracings:
            if tracing.frame_index == frame:
                return tracing
        return None


@dataclass(frozen=True)
class ManifestRecord:
    clip_id: str
    split: Split
    fps: float
    num_frames: int
    labels: ClipLabels | None = None

    def __post_init__(self):
        object.__setattr__(self, "split", Split(self.split))


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple = ()
    corrupted: dict = field(default_factory=dict)

    def __post_init__(self):
        records = tuple(self.records)
        seen = set()
        for i, record in enumerate(records, start=1):
            if record.clip_id in seen:
                raise ManifestError(f"duplicate clip_id {record.clip_id!r}", row=i)
            seen.add(record.clip_id)
        corrupted = {k: CorruptionReason(v) for k, v in dict(self.corrupted).items()}
        object.__setattr__(self, "records", records)
        object.__setattr__(self, "corrupted", corrupted)

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)

    def get(self, clip_id):
        for record in self.records:
            if record.clip_id == clip_id:
                return record
        raise KeyError(clip_id)

    def split(self, split):
        split = Split(split)
        return DatasetManifest(
            tuple(r for r in self.records if r.split == split),
            {k: v for k, v in self.corrupted.items() if any(r.clip_id == k and r.split == split for r in self.records)},
        )

    def is_corrupted(self, clip_id):
        return clip_id in self.corrupted


# -- geometry ---------------------------------------------------------------


def mask_area(mask):
    return int(np.count_nonzero(mask))


def tracing_polygon(tracing):
    """Order chord endpoints into a closed contour around the long axis.

    Each crossing chord contributes one endpoint per side of the axis. Sides
    are sorted by their projection on the axis and joined through the axis
    endpoints, giving ``[axis start, side A ascending, axis end, side B
    descending]``.
    """
    if len(tracing.chords) < 2:
        raise DegenerateTracing(f"need at least 2 chords, got {len(tracing.chords)}")
    chords = np.asarray(tracing.chords, dtype=float)
    p0, p1 = chords[0, :2], chords[0, 2:]
    axis = p1 - p0
    length2 = float(axis @ axis)
    if length2 == 0.0:
        raise DegenerateTracing("principal axis has zero length")

    def side(pt):
        d = pt - p0
        return axis[0] * d[1] - axis[1] * d[0]

    side_a, side_b = [], []
    for chord in chords[1:]:
        u, v = chord[:2], chord[2:]
        if side(u) < side(v):
            u, v = v, u
        side_a.append(u)
        side_b.append(v)
    key = lambda pt: float((pt - p0) @ axis) / length2
    side_a.sort(key=key)
    side_b.sort(key=key, reverse=True)
    return np.array([p0, *side_a, p1, *side_b])


def polygon_area(vertices):
    x, y = vertices[:, 0], vertices[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def fill_polygon(vertices, height, width):
    """Even-odd scanline fill sampling pixel centres at integer coordinates.

    Edges are half-open in y and spans half-open in x, so an axis-aligned
    w x h rectangle with integer corners covers exactly w*h pixels.
    """
    mask = np.zeros((height, width), dtype=bool)
    v = np.asarray(vertices, dtype=float)
    xa, ya = v[:, 0], v[:, 1]
    xb, yb = np.roll(xa, -1), np.roll(ya, -1)
    keep = ya != yb
    xa, ya, xb, yb = xa[keep], ya[keep], xb[keep], yb[keep]
    if len(xa) == 0:
        return mask
    ylo, yhi = np.minimum(ya, yb), np.maximum(ya, yb)
    cols = np.arange(width)
    r0 = max(0, math.ceil(ylo.min()))
    r1 = min(height - 1, math.ceil(yhi.max()) - 1)
    for r in range(r0, r1 + 1):
        active = (ylo <= r) & (r < yhi)
        if not active.any():
            continue
        xs = xa[active] + (r - ya[active]) * (xb[active] - xa[active]) / (yb[active] - ya[active])
        xs.sort()
        for left, right in zip(xs[0::2], xs[1::2]):
            mask[r] |= (cols >= left) & (cols < right)
    return mask


def _draw_segment(mask, x0, y0, x1, y1):
    steps = int(max(abs(x1 - x0), abs(y1 - y0))) + 1
    xs = np.rint(np.linspace(x0, x1, steps + 1)).astype(int)
    ys = np.rint(np.linspace(y0, y1, steps + 1)).astype(int)
    ok = (xs >= 0) & (xs < mask.shape[1]) & (ys >= 0) & (ys < mask.shape[0])
    mask[ys[ok], xs[ok]] = True


def rasterize_tracing(tracing, height, width):
    """Fill the polygon outlined by a tracing's chords.

    Coordinates are in pixels with pixel centres on integers, so valid
    coordinates lie in ``[-0.5, width - 0.5] x [-0.5, height - 0.5]``. A
    zero-area contour (all chords on one line) is drawn as its segments.
    """
    if len(tracing.chords) < 2:
        raise DegenerateTracing(f"need at least 2 chords, got {len(tracing.chords)}")
    chords = np.asarray(tracing.chords, dtype=float)
    xs, ys = chords[:, [0, 2]], chords[:, [1, 3]]
    if xs.min() < -0.5 or xs.max() > width - 0.5 or ys.min() < -0.5 or ys.max() > height - 0.5:
        raise InvalidTracing(f"tracing for frame {tracing.frame_index} leaves the {height}x{width} frame")
    polygon = tracing_polygon(tracing)
    mask = fill_polygon(polygon, height, width) if polygon_area(polygon) > 0 else None
    if mask is None or not mask.any():
        mask = np.zeros((height, width), dtype=bool)
        for x1, y1, x2, y2 in chords:
            _draw_segment(mask, x1, y1, x2, y2)
    return mask


# -- raw tensors and videos -------------------------------------------------


def atomic_write_bytes(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def _sidecar(path):
    path = Path(path)
    return path.with_suffix(".json")


def save_raw(array, path, dtype="u8"):
    """Write a tensor as little-endian bytes plus a JSON shape sidecar."""
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported raw dtype {dtype!r}")
    array = np.asarray(array)
    atomic_write_bytes(path, np.ascontiguousarray(array, dtype=_DTYPES[dtype]).tobytes())
    header = {"shape": list(array.shape), "dtype": dtype}
    atomic_write_text(_sidecar(path), json.dumps(header))


def load_raw(path):
    path = Path(path)
    if path.suffix == ".json":
        path = path.with_suffix(".raw")
    try:
        header = json.loads(_sidecar(path).read_text())
        shape, dtype = tuple(header["shape"]), _DTYPES[header["dtype"]]
    except (OSError, KeyError, ValueError) as exc:
        raise ShapeError(f"bad or missing sidecar for {path}: {exc}") from exc
    data = np.frombuffer(path.read_bytes(), dtype=dtype)
    if data.size != math.prod(shape):
        raise ShapeError(f"{path} holds {data.size} values, sidecar declares shape {list(shape)}")
    return data.reshape(shape)


def to_u8(frames):
    return np.rint(np.clip(frames, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_video(clip, path, as_png=False):
    path = Path(path)
    if as_png:
        path.mkdir(parents=True, exist_ok=True)
        for t, frame in enumerate(to_u8(clip.frames)):
            Image.fromarray(frame, mode="L").save(path / f"{t:05d}.png")
    else:
        save_raw(to_u8(clip.frames), path, "u8")


def load_video(path, clip_id=None, fps=50.0, source=Source.REAL):
    """Load a clip from a PNG-frame directory or a raw tensor with sidecar."""
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.png"))
        if not files:
            raise ShapeError(f"no PNG frames in {path}")
        data = np.stack([np.asarray(Image.open(f).convert("L")) for f in files])
    else:
        data = load_raw(path)
    if data.dtype == np.uint8:
        frames = data.astype(np.float32) / 255.0
    else:
        frames = np.clip(data.astype(np.float32), 0.0, 1.0)
    return VideoClip(clip_id or path.stem, frames, fps, source)


def save_mask_sequence(masks, path):
    if isinstance(masks, BinaryMaskSequence):
        save_raw(masks.masks.astype(np.uint8), path, "u8")
    else:
        save_raw(masks.masks, path, "f32")


def load_mask_sequence(path, clip_id=None):
    path = Path(path)
    data = load_raw(path)
    clip_id = clip_id or path.stem
    if data.dtype == np.uint8:
        return BinaryMaskSequence(data.astype(bool), clip_id)
    return SoftMaskSequence(data, clip_id)


# -- manifests ----------------------------------------------------------------


def _fmt(value):
    if isinstance(value, float):
        return "" if math.isnan(value) else repr(value)
    return str(value)


def save_manifest(manifest, path):
    """Write records, corrupted ids and tracings next to each other."""
    path = Path(path)
    lines = [",".join(RECORD_COLUMNS)]
    tracing_lines = [",".join(TRACING_COLUMNS)]
    for r in manifest.records:
        lab = r.labels
        cells = [r.clip_id, r.split.value, _fmt(float(r.fps)), str(r.num_frames)]
        if lab is None:
            cells += ["", "", ""]
        else:
            cells += [str(lab.ed_frame), str(lab.es_frame), _fmt(float(lab.ef))]
            for tracing in lab.tracings:
                for k, chord in enumerate(tracing.chords):
                    tracing_lines.append(
                        ",".join([r.clip_id, str(tracing.frame_index), str(k), *(_fmt(c) for c in chord)])
                    )
        lines.append(",".join(cells))
    atomic_write_text(path, "\n".join(lines) + "\n")
    corrupted = [",".join(CORRUPTED_COLUMNS)]
    corrupted += [f"{k},{v.value}" for k, v in sorted(manifest.corrupted.items())]
    atomic_write_text(path.with_name("corrupted.csv"), "\n".join(corrupted) + "\n")
    if len(tracing_lines) > 1:
        atomic_write_text(path.with_name("tracings.csv"), "\n".join(tracing_lines) + "\n")
    elif path.with_name("tracings.csv").exists():
        path.with_name("tracings.csv").unlink()


def _read_csv(path, required):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ManifestError(f"{path} is empty; a header row is mandatory", row=0)
        missing = [c for c in required if c not in reader.fieldnames]
        if missing:
            raise ManifestError(f"{path} is missing columns {missing}", row=0)
        return list(reader)


def _load_tracings(path):
    """Group tracing rows by clip and frame; clips with duplicated frames are flagged."""
    grouped, duplicated = {}, set()
    if not path.exists():
        return grouped, duplicated
    for i, row in enumerate(_read_csv(path, TRACING_COLUMNS), start=1):
        try:
            key = (row["clip_id"], int(row["frame"]))
            chord_index = int(row["chord"])
            chord = tuple(float(row[c]) for c in ("x1", "y1", "x2", "y2"))
        except ValueError as exc:
            raise ManifestError(f"unparsable tracing row: {exc}", row=i) from exc
        chords = grouped.setdefault(key, {})
        if chord_index in chords:
            duplicated.add(row["clip_id"])
        chords[chord_index] = chord
    return grouped, duplicated


def load_manifest(path):
    path = Path(path)
    rows = _read_csv(path, RECORD_COLUMNS)
    tracings, duplicated = _load_tracings(path.with_name("tracings.csv"))

    corrupted = {}
    corrupted_path = path.with_name("corrupted.csv")
    if corrupted_path.exists():
        for i, row in enumerate(_read_csv(corrupted_path, CORRUPTED_COLUMNS), start=1):
            if row["clip_id"] in corrupted:
                raise ManifestError(f"clip {row['clip_id']!r} listed twice in corrupted ids", row=i)
            try:
                corrupted[row["clip_id"]] = CorruptionReason(row["reason"])
            except ValueError as exc:
                raise ManifestError(f"unknown corruption reason {row['reason']!r}", row=i) from exc
    for clip_id in duplicated:
        corrupted.setdefault(clip_id, CorruptionReason.LABEL_CORRUPT)

    records, seen = [], set()
    for i, row in enumerate(rows, start=1):
        clip_id = row["clip_id"]
        if not clip_id:
            raise ManifestError("empty clip_id", row=i)
        if clip_id in seen:
            raise ManifestError(f"duplicate clip_id {clip_id!r}", row=i)
        seen.add(clip_id)
        try:
            split = Split(row["split"])
        except ValueError as exc:
            raise ManifestError(f"unknown split {row['split']!r}", row=i) from exc
        try:
            fps, num_frames = float(row["fps"]), int(row["num_frames"])
            labels = None
            if row["ed_frame"] != "" or row["es_frame"] != "":
                ed, es = int(row["ed_frame"]), int(row["es_frame"])
                ef = float(row["ef"]) if row["ef"] != "" else float("nan")
                frames = sorted(f for (cid, f) in tracings if cid == clip_id)
                clip_tracings = tuple(
                    PolygonalTracing(f, tuple(c for _, c in sorted(tracings[(clip_id, f)].items())))
                    for f in frames
                )
                labels = ClipLabels(ed, es, ef, clip_tracings)
                if max(ed, es) >= num_frames:
                    raise ValueError(f"label frame beyond num_frames={num_frames}")
        except ValueError as exc:
            raise ManifestError(str(exc), row=i) from exc
        records.append(ManifestRecord(clip_id, split, fps, num_frames, labels))
    return DatasetManifest(tuple(records), corrupted)


# -- dataset directory helpers ------------------------------------------------


class DatasetDir:
    """Resolve the standard file locations inside a dataset directory."""

    def __init__(self, root):
        self.root = Path(root)

    @property
    def manifest_path(self):
        return self.root / "manifest.csv"

    def video_path(self, clip_id):
        raw = self.root / "videos" / f"{clip_id}.raw"
        png_dir = self.root / "videos" / clip_id
        return png_dir if png_dir.is_dir() and not raw.exists() else raw

    def mask_path(self, clip_id):
        return self.root / "masks" / f"{clip_id}.raw"

    def manifest(self):
        return load_manifest(self.manifest_path)

    def load_clip(self, record, source=Source.REAL):
        return load_video(self.video_path(record.clip_id), record.clip_id, record.fps, source)

    def load_truth(self, clip_id):
        path = self.mask_path(clip_id)
        if not path.exists():
            return None
        return load_mask_sequence(path, clip_id)

    def label_mask(self, record, frame, shape):
        """Human-labelled mask at a frame: stored truth first, tracing second."""
        truth = self.load_truth(record.clip_id)
        if truth is not None:
            return truth.masks[frame]
        tracing = record.labels.tracing_at(frame) if record.labels else None
        if tracing is None:
            return None
        return rasterize_tracing(tracing, *shape)
