"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (add ``-s`` to see the lines
as they happen; they are also repeated in the terminal summary). The
end-to-end distillation criterion trains for about 20 minutes on one core.
"""

import time

import numpy as np
import pytest
import torch

from acceptance_log import record
from echodistill.bounds import (
    AnnotatorNoiseModel,
    corr_ceiling,
    expected_abs,
    fit_noise_mixture,
    rmse_floor,
    sample_round_diffs,
)
from echodistill.data_model import Source, VideoClip
from echodistill.distillation import (
    AnalyticTeacher,
    TrainingConfig,
    calibrate_threshold,
    generate_pseudolabels,
    train,
)
from echodistill.lvm_eval import MockScorerSpec, build_mock_scorer, coverage_score, mitral_phase_signal
from echodistill.model import ModelConfig, build_model, config_grid, forward, param_count
from echodistill.phantom import generate_phantom, random_params, wall_masks, write_phantom_dataset
from echodistill.phase_detect import AreaSeries, Phase, afd, detect_extreme_frame, detect_phases
from echodistill.scaling import ScalingPoint, fit_loglog, saturation_split
from echodistill.seg_metrics import dice, dice_per_frame, iou
from oracles import brute_force_extreme_frame, closed_form_params
from test_model_properties import _max_rel_error

# -- 1 ---------------------------------------------------------------------------


def _random_series(rng):
    T = int(rng.integers(16, 257))
    t = np.arange(T)
    period = rng.uniform(8, 40)
    base = 100 + 30 * np.sin(2 * np.pi * t / period + rng.uniform(0, 2 * np.pi))
    noisy = base + rng.normal(0, rng.uniform(0, 8), T)
    # coarse rounding on some series creates runs of equal values and ties
    step = rng.choice([0.001, 1.0, 5.0])
    return np.maximum(np.round(noisy / step) * step, 0)


def test_criterion_01_phase_detection_matches_brute_force():
    rng = np.random.default_rng(2024)
    cases = []
    while len(cases) < 200:
        values = _random_series(rng)
        if len(set(values.tolist())) < 3:
            continue
        cases.append((values, int(rng.integers(0, len(values))), Phase.ES if rng.random() < 0.5 else Phase.ED))
    start = time.perf_counter()
    mismatches = 0
    for values, ref, mode in cases:
        got = detect_extreme_frame(AreaSeries(values), ref, mode)
        mismatches += got != brute_force_extreme_frame(values, ref, mode is Phase.ES)
    elapsed = time.perf_counter() - start
    record(1, "aFD detection equals brute-force block enumeration", mismatches == 0 and elapsed < 5.0,
           f"{mismatches} mismatches over 200 series, {elapsed:.2f} s")


# -- 2 ---------------------------------------------------------------------------

E2E_TRAINING = TrainingConfig(
    optimizer="ADAM",
    learning_rate=0.003,
    batch_size=8,
    sequence_length=8,
    val_sequence_length=16,
    carry_state=True,
    max_epochs=50,
    seed=0,
)
PREPAD = 8


@pytest.fixture(scope="module")
def distilled(tmp_path_factory):
    """Full phantom distillation run: 200/40/40 clips of 64 frames at 64x64."""
    root = tmp_path_factory.mktemp("e2e")
    start = time.perf_counter()
    manifest, _ = write_phantom_dataset(root / "data", 200, 40, 40, T=64, H=64, W=64, seed=1)
    from echodistill.data_model import DatasetDir

    dataset = DatasetDir(root / "data")
    load = lambda record: dataset.load_clip(record, Source.PHANTOM)  # noqa: E731
    run = generate_pseudolabels(AnalyticTeacher(dataset.load_truth, seed=1), manifest, root / "cache", load)
    model, history = train(ModelConfig(2, 1), run.store, manifest, E2E_TRAINING, load)
    threshold = calibrate_threshold(model, manifest, run.store, load, PREPAD)

    def score(split):
        d_gt, d_teacher, pred_ed, pred_es, lab_ed, lab_es = [], [], [], [], [], []
        for rec in manifest.split(split):
            soft = forward(model, load(rec), PREPAD).masks
            binary = soft >= threshold
            d_gt.append(dice_per_frame(binary, dataset.load_truth(rec.clip_id).masks))
            d_teacher.append(dice_per_frame(binary, run.store.get(rec.clip_id).masks >= 0.5))
            ev = detect_phases(AreaSeries(binary.reshape(len(binary), -1).sum(1)), rec.labels.ed_frame, rec.labels.es_frame)
            pred_ed.append(ev.ed_frame)
            pred_es.append(ev.es_frame)
            lab_ed.append(rec.labels.ed_frame)
            lab_es.append(rec.labels.es_frame)
        return {
            "dice_gt": float(np.mean(np.concatenate(d_gt))),
            "dice_teacher": float(np.mean(np.concatenate(d_teacher))),
            "afd_ed": afd(pred_ed, lab_ed),
            "afd_es": afd(pred_es, lab_es),
        }

    test = score("TEST")
    elapsed = time.perf_counter() - start
    val = score("VAL")
    clip = load(manifest.split("TEST").records[0])
    prepad_gap = float(np.abs(forward(model, clip, 0).masks[16:] - forward(model, clip, PREPAD).masks[16:]).max())
    return {"test": test, "val": val, "elapsed": elapsed, "history": history, "threshold": threshold, "prepad_gap": prepad_gap}


@pytest.mark.slow
def test_criterion_02_end_to_end_distillation(distilled):
    t, minutes = distilled["test"], distilled["elapsed"] / 60
    checks = {
        "Dice vs truth >= 0.85": t["dice_gt"] >= 0.85,
        "Dice vs teacher >= 0.85": t["dice_teacher"] >= 0.85,
        "aFD ED <= 2.0": t["afd_ed"] <= 2.0,
        "aFD ES <= 2.0": t["afd_es"] <= 2.0,
        "runtime <= 30 min": minutes <= 30.0,
    }
    failed = [k for k, ok in checks.items() if not ok]
    detail = (
        f"Dice truth {t['dice_gt']:.4f}, Dice teacher {t['dice_teacher']:.4f}, aFD ED {t['afd_ed']:.3f}, "
        f"aFD ES {t['afd_es']:.3f}, {minutes:.1f} min on {torch.get_num_threads()} thread(s), "
        f"threshold {distilled['threshold']}" + (f"; failed: {', '.join(failed)}" if failed else "")
    )
    record(2, "end-to-end phantom distillation", not failed, detail)


@pytest.mark.slow
def test_distillation_run_side_checks(distilled):
    """Secondary properties of the same run: loss drop, VAL fidelity, warm-up convergence."""
    h = distilled["history"]
    first, best = h.epochs[0].val_loss, h.epochs[h.best_epoch].val_loss
    assert best <= 0.5 * first
    assert distilled["val"]["dice_teacher"] >= 0.85
    assert distilled["prepad_gap"] <= 0.05


# -- 3 ---------------------------------------------------------------------------


def test_criterion_03_gradients_match_finite_differences():
    from echodistill.model import ConvLSTMCell, ConvLSTMCellConfig

    torch.manual_seed(0)
    cell = ConvLSTMCell(ConvLSTMCellConfig(2, 3, uses_peephole=True)).double()
    with torch.no_grad():
        for p in cell.parameters():
            p.uniform_(-0.5, 0.5)
    x = torch.randn(4, 1, 2, 5, 5, dtype=torch.float64)
    target = torch.rand(1, 3, 5, 5, dtype=torch.float64)

    def cell_loss():
        state = cell.zero_state(1, 5, 5, torch.float64)
        total = 0.0
        for t in range(len(x)):
            h, state = cell(x[t], state)
            total = total + ((h - target) ** 2).mean()
        return total

    cfg = ModelConfig(2, 1, channel_widths=(4, 6), residual_last_block=True, uses_peephole=True)
    model = build_model(cfg, seed=3).double()
    with torch.no_grad():
        for p in model.parameters():
            p.uniform_(-0.5, 0.5)
    frames = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    mask = (torch.rand(1, 3, 8, 8, dtype=torch.float64) > 0.5).double()

    def model_loss():
        return torch.nn.functional.binary_cross_entropy_with_logits(model(frames), mask)

    e_cell = _max_rel_error(cell_loss, list(cell.parameters()))
    e_model = _max_rel_error(model_loss, list(model.parameters()))
    record(3, "analytic gradients vs central differences", max(e_cell, e_model) <= 1e-4 and param_count(cfg) <= 5000,
           f"cell {e_cell:.2e}, model ({param_count(cfg)} params) {e_model:.2e}")


# -- 4 ---------------------------------------------------------------------------


def test_criterion_04_causality():
    rng = np.random.default_rng(44)
    ok = 0
    for k in range(10):
        cfg = ModelConfig(int(rng.integers(1, 5)), int(rng.integers(1, 3)), residual_last_block=bool(rng.random() < 0.5))
        model = build_model(cfg, seed=k)
        T = int(rng.integers(4, 10))
        frames = rng.random((T, 16, 16))
        t = int(rng.integers(0, T - 1))
        mutated = frames.copy()
        mutated[t + 1 :] = rng.random((T - t - 1, 16, 16)) * rng.uniform(0.1, 1.0)
        prepad = int(rng.integers(0, 4))
        a = forward(model, VideoClip("a", frames, 30.0), prepad).masks
        b = forward(model, VideoClip("a", mutated, 30.0), prepad).masks
        ok += bool(np.array_equal(a[: t + 1], b[: t + 1]))
    record(4, "outputs at t ignore frames after t", ok == 10, f"{ok}/10 model-clip pairs bit-identical")


# -- 5 ---------------------------------------------------------------------------


def test_criterion_05_annotator_bounds():
    floor, ceiling = rmse_floor(5.7), corr_ceiling(0.801)
    identities = (
        expected_abs(AnnotatorNoiseModel(0.0, 50.0, 2.0)) == 2.0
        and expected_abs(AnnotatorNoiseModel(1.0, 50.0, 2.0)) == 25.0
        and expected_abs(AnnotatorNoiseModel(0.5, 10.0, 4.0)) == 0.5 * 5.0 + 0.5 * 4.0
    )
    ok = abs(floor - 4.0305) <= 1e-3 and abs(ceiling - 0.8950) <= 1e-4 and identities
    record(5, "RMSE floor and correlation ceiling", ok, f"rmse_floor(5.7)={floor:.4f}, corr_ceiling(0.801)={ceiling:.4f}")


# -- 6 ---------------------------------------------------------------------------


def test_criterion_06_noise_fit_recovery():
    rng = np.random.default_rng(6)
    pure = fit_noise_mixture(sample_round_diffs(10_000, 0.0, 50.0, 2.0, rng))
    mixed = fit_noise_mixture(sample_round_diffs(10_000, 0.01, 50.0, 2.0, rng))
    true_abs = 0.01 * 25 + 0.99 * 2.0
    rel = abs(expected_abs(mixed) - true_abs) / true_abs
    ok = 1.8 <= pure.laplace_scale <= 2.2 and rel <= 0.15
    record(6, "noise mixture recovery", ok,
           f"Laplace-only b={pure.laplace_scale:.3f}; mixture w={mixed.mixture_weight:.4f} U={mixed.uniform_halfwidth:.1f} "
           f"b={mixed.laplace_scale:.3f}, E|X|={expected_abs(mixed):.3f} vs {true_abs:.2f} ({100 * rel:.1f}%)")


# -- 7 ---------------------------------------------------------------------------


def test_criterion_07_scaling_fit():
    sizes = [10_000, 20_000, 50_000, 100_000, 200_000, 500_000, 1_000_000, 2_000_000, 4_000_000]
    fit = fit_loglog([ScalingPoint(n, n**-0.15) for n in sizes])
    knees_ok = all(
        saturation_split([ScalingPoint(n, min(n, knee) ** -0.15) for n in sizes]).knee == knee for knee in sizes[1:-1]
    )
    ok = abs(fit.slope - 0.15) <= 1e-9 and abs(fit.r_squared - 1.0) <= 1e-12 and knees_ok
    record(7, "log-log slope and knee recovery", ok, f"slope {fit.slope:.12f}, r2 {fit.r_squared:.15f}, knees exact: {knees_ok}")


# -- 8 ---------------------------------------------------------------------------


def test_criterion_08_metric_identities():
    rng = np.random.default_rng(8)
    worst, sym, empty_ok = 0.0, True, dice(np.zeros((4, 4), bool), np.zeros((4, 4), bool)) == 1.0
    empty_ok &= iou(np.zeros((4, 4), bool), np.zeros((4, 4), bool)) == 1.0
    for _ in range(1000):
        shape = tuple(rng.integers(1, 24, size=2))
        a, b = rng.random(shape) < rng.random(), rng.random(shape) < rng.random()
        j = iou(a, b)
        worst = max(worst, abs(dice(a, b) - 2 * j / (1 + j)))
        sym &= dice(a, b) == dice(b, a) and iou(a, b) == iou(b, a)
    record(8, "Dice/IoU identities", worst <= 1e-12 and sym and empty_ok, f"max |dice - 2j/(1+j)| = {worst:.1e}")


# -- 9 ---------------------------------------------------------------------------


def test_criterion_09_parameter_budget():
    counts = {c.name: param_count(c) for c in config_grid()}
    modules = {c.name: sum(p.numel() for p in build_model(c).parameters()) for c in config_grid()}
    oracle = {c.name: closed_form_params(c.num_blocks, c.layers_per_block) for c in config_grid()}
    ok = len(counts) == 16 and counts == oracle == modules and max(counts.values()) <= 4_000_000
    record(9, "16 grid configs under 4M params, counts exact", ok,
           f"range {min(counts.values())}..{max(counts.values())}")


# -- 10 --------------------------------------------------------------------------


def test_criterion_10_lvm_protocols_under_mock_scorer():
    rng = np.random.default_rng(10)
    ordered, es_hits, errors = 0, 0, []
    for k in range(20):
        while True:
            params = random_params(rng)
            try:
                clip, truth, labels = generate_phantom(params, f"ph{k}")
                break
            except Exception:
                continue
        scorer = build_mock_scorer(MockScorerSpec(lambda cid, m=truth: m, lambda cid, p=params: wall_masks(p)))
        empty = np.zeros(truth.masks.shape, bool)
        half = truth.masks.copy()
        cols = np.arange(half.shape[2]) < params.center[0]
        half[:, :, cols] = False
        s = [coverage_score(clip, m, scorer) for m in (empty, half, truth.masks)]
        ordered += s[0] > s[1] > s[2]
        es = detect_extreme_frame(mitral_phase_signal(clip, scorer), labels.es_frame, Phase.ES)
        errors.append(abs(es - labels.es_frame))
        es_hits += errors[-1] <= 2
    record(10, "coverage ordering and valve-signal ES", ordered == 20 and es_hits == 20,
           f"ordering {ordered}/20, ES within 2 frames {es_hits}/20, max error {max(errors)}")


# -- 11 --------------------------------------------------------------------------


def test_criterion_11_determinism_and_idempotence(tmp_path):
    from echodistill.cli import main

    common = ["--data-dir", str(tmp_path / "data"), "--cache-dir", str(tmp_path / "cache")]
    assert main(["phantom-gen", *common, "--out-dir", str(tmp_path / "g"), "--n-train", "4", "--n-val", "2",
                 "--n-test", "2", "--frames", "24", "--size", "32", "--seed", "11"]) == 0
    assert main(["pseudolabel", *common, "--out-dir", str(tmp_path / "p1")]) == 0
    stamps = {p.name: p.stat().st_mtime_ns for p in (tmp_path / "cache").rglob("*.raw")}
    assert main(["pseudolabel", *common, "--out-dir", str(tmp_path / "p2")]) == 0
    import json

    rerun = json.loads((tmp_path / "p2" / "pseudolabel.json").read_text())
    untouched = stamps == {p.name: p.stat().st_mtime_ns for p in (tmp_path / "cache").rglob("*.raw")}
    same = True
    for k in (1, 2):
        out = str(tmp_path / f"run{k}")
        assert main(["train", *common, "--out-dir", out, "--model", "B2_l1", "--epochs", "2", "--seq-len", "6",
                     "--batch-size", "2", "--optimizer", "ADAM", "--lr", "0.003", "--seed", "5"]) == 0
        for cmd in ("eval-seg", "eval-afd", "eval-lvm"):
            assert main([cmd, *common, "--out-dir", out, "--checkpoint", f"{out}/model.ckpt"]) == 0
    names = ("history.csv", "model.ckpt", "seg_scores.csv", "seg_summary.json", "afd.csv", "afd_summary.json", "lvm.csv")
    for name in names:
        same &= (tmp_path / "run1" / name).read_bytes() == (tmp_path / "run2" / name).read_bytes()
    ok = same and rerun["computed"] == 0 and untouched
    record(11, "byte-identical reruns, cached pseudo-labels reused", ok,
           f"{len(names)} artifacts compared, pseudo-label rerun computed {rerun['computed']}")
