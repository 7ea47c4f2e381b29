import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis.extra.numpy import arrays

from echodistill.data_model import (
    BinaryMaskSequence,
    ClipLabels,
    CorruptionReason,
    DatasetManifest,
    ManifestRecord,
    save_mask_sequence,
)
from echodistill.errors import ShapeError
from echodistill.seg_metrics import Policy, dice, dice_per_frame, evaluate_segmentation, iou

masks = arrays(bool, (6, 7))


@settings(max_examples=200)
@given(masks, masks)
def test_symmetry_and_range(a, b):
    assert dice(a, b) == dice(b, a)
    assert iou(a, b) == iou(b, a)
    assert 0.0 <= iou(a, b) <= dice(a, b) <= 1.0


@settings(max_examples=200)
@given(masks, masks)
def test_dice_iou_identity(a, b):
    j = iou(a, b)
    assert abs(dice(a, b) - 2 * j / (1 + j)) <= 1e-12


@given(masks)
def test_self_overlap_is_one(a):
    assert dice(a, a) == 1.0 and iou(a, a) == 1.0


def test_empty_conventions():
    empty = np.zeros((3, 3), bool)
    full = np.ones((3, 3), bool)
    assert dice(empty, empty) == 1.0 and iou(empty, empty) == 1.0
    assert dice(empty, full) == 0.0 and iou(empty, full) == 0.0


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        dice(np.zeros((2, 2), bool), np.zeros((2, 3), bool))


def test_dice_per_frame_matches_scalar():
    rng = np.random.default_rng(0)
    a, b = rng.random((5, 4, 4)) > 0.5, rng.random((5, 4, 4)) > 0.6
    a[2] = b[2] = False
    assert np.allclose(dice_per_frame(a, b), [dice(x, y) for x, y in zip(a, b)])


def _setup(tmp_path):
    truth = np.zeros((4, 8, 8), bool)
    truth[:, 2:6, 2:6] = True
    records = (
        ManifestRecord("good", "TEST", 30.0, 4, ClipLabels(0, 2)),
        ManifestRecord("bad", "TEST", 30.0, 4, ClipLabels(1, 3)),
        ManifestRecord("gone", "TEST", 30.0, 4, ClipLabels(1, 3)),
        ManifestRecord("nolabel", "TEST", 30.0, 4),
    )
    manifest = DatasetManifest(records, {"bad": CorruptionReason.LABEL_CORRUPT})
    half = truth.copy()
    half[:, 2:4] = False
    preds = {"good": BinaryMaskSequence(truth, "good"), "bad": BinaryMaskSequence(half, "bad")}
    for k, v in preds.items():
        save_mask_sequence(v, tmp_path / f"{k}.raw")
    return manifest, preds, (lambda record, frame, shape: truth[frame])


def test_evaluate_full_policy_reports_both_aggregates(tmp_path):
    manifest, preds, label = _setup(tmp_path)
    report = evaluate_segmentation(preds, manifest, label, Policy.FULL)
    full, clean = report.aggregates["FULL"], report.aggregates["EXCLUDE_CORRUPTED"]
    assert full["n_clips"] == 3 and clean["n_clips"] == 2
    assert full["mean_dice"] == pytest.approx((2 * 1 + 2 * (2 / 3) + 0) / 6)
    assert clean["mean_dice"] == pytest.approx(0.5)
    assert report.excluded == {"nolabel": "NO_LABELS"}
    assert [r[0] for r in report.rows()] == ["good", "bad", "gone"]
    assert report.rows()[2][5] is True


def test_evaluate_excluding_corrupted_from_directory(tmp_path):
    manifest, _, label = _setup(tmp_path)
    report = evaluate_segmentation(tmp_path, manifest, label, "EXCLUDE_CORRUPTED")
    assert "FULL" not in report.aggregates
    assert report.excluded["bad"] == "LABEL_CORRUPT"
    assert [c.clip_id for c in report.clips] == ["good", "gone"]
    assert report.mean_iou == pytest.approx(0.5)
