"""``echodistill`` command line: one entry point, one subcommand per stage.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure. Errors are printed to stderr as a single JSON line.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bounds import corr_ceiling, expected_abs, fit_noise_mixture, rmse_floor
from .config import RunConfig, config_hash, load_run_config
from .data_model import DatasetDir, Source, atomic_write_text, save_mask_sequence
from .distillation import (
    AnalyticTeacher,
    PseudoLabelStore,
    TrainingConfig,
    calibrate_threshold,
    generate_pseudolabels,
    train,
)
from .errors import ConfigError, DataError, EchoDistillError
from .lvm_eval import (
    MockScorerSpec,
    ScoresFileScorer,
    build_mock_scorer,
    coverage_score,
    evaluated_frames,
    mitral_phase_signal,
    overflow_score,
)
from .model import flops_estimate, load_checkpoint, param_count, parse_config_name, predict_binary, save_checkpoint
from .phantom import PhantomParams, wall_masks, write_phantom_dataset
from .phase_detect import AFD_HEADER, AreaSeries, Phase, afd, afd_by_sampling_rate, detect_extreme_frame, evaluate_afd
from .scaling import MetricKind, ScalingPoint, fit_loglog, saturation_split, transformed_rows
from .seg_metrics import Policy, SegScoreReport, evaluate_segmentation, load_binary_masks
from .tables import PUBLISHED_TABLE2, read_csv, table1_grid, write_csv, write_json

log = logging.getLogger("echodistill")

SUBCOMMANDS = (
    "phantom-gen", "pseudolabel", "train", "eval-seg", "eval-afd",
    "eval-lvm", "bounds", "scaling-fit", "report",
)


# -- shared plumbing ----------------------------------------------------------


class Context:
    def __init__(self, args):
        self.args = args
        self.config = load_run_config(args.config) if args.config else RunConfig()
        self.out_dir = self.config.resolved_out_dir(args.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.inputs, self.outputs = {}, []
        self.seed = args.seed if args.seed is not None else self.config.training.seed

    def data_dir(self, required=True):
        path = self.args.data_dir or self.config.data_dir
        if required and not path:
            raise ConfigError("--data-dir (or paths.data_dir in the config) is required")
        return DatasetDir(path) if path else None

    def cache_dir(self):
        path = self.args.cache_dir or self.config.cache_dir
        return Path(path) if path else self.out_dir / "cache"

    def evaluation(self, key):
        value = getattr(self.args, key, None)
        return self.config.evaluation[key] if value is None else value

    def out(self, name):
        path = self.out_dir / name
        self.outputs.append(str(path))
        return path


def _clip_loader(dataset):
    source = Source.PHANTOM if (dataset.root / "phantoms.json").exists() else Source.REAL

    def load(record):
        try:
            return dataset.load_clip(record, source)
        except FileNotFoundError as exc:
            raise DataError(f"missing video for clip {record.clip_id}: {exc}") from exc

    return load


def _model_info(model):
    cfg = model.config
    return {
        "name": cfg.name,
        "param_count": param_count(cfg),
        "gflops_per_frame": flops_estimate(cfg, *cfg.input_size),
        "residual_last_block": cfg.residual_last_block,
        "threshold": cfg.threshold,
    }


def _selected(manifest, split):
    return manifest if split in (None, "ALL") else manifest.split(split)


def _predict_masks(ctx, dataset, manifest, split):
    """Masks from ``--masks DIR`` or by running ``--checkpoint`` over the split."""
    masks_dir = getattr(ctx.args, "masks", None)
    if masks_dir:
        ctx.inputs["masks"] = masks_dir
        info_path = Path(masks_dir) / "model.json"
        info = json.loads(info_path.read_text()) if info_path.exists() else {}
        return Path(masks_dir), info
    if not ctx.args.checkpoint:
        raise ConfigError("either --masks or --checkpoint is required")
    ctx.inputs["checkpoint"] = ctx.args.checkpoint
    model, _ = load_checkpoint(ctx.args.checkpoint)
    load = _clip_loader(dataset)
    prepad = int(ctx.evaluation("prepad_frames"))
    mask_dir = ctx.out_dir / "masks"
    for record in _selected(manifest, split):
        save_mask_sequence(predict_binary(model, load(record), prepad), mask_dir / f"{record.clip_id}.raw")
    info = _model_info(model)
    write_json(mask_dir / "model.json", info)
    return mask_dir, info


def _load_masks(mask_dir, clip_id):
    return load_binary_masks(Path(mask_dir) / f"{clip_id}.raw", clip_id)


def _write_run_manifest(ctx, name):
    resolved = {k: v for k, v in vars(ctx.args).items() if k != "func"}
    body = {
        "subcommand": name,
        "argv": ctx.args.argv,
        "resolved_args": resolved,
        "run_config": ctx.config.to_dict(),
        "inputs": ctx.inputs,
        "outputs": sorted(ctx.outputs),
        "versions": _versions(),
    }
    body["config_hash"] = config_hash({k: body[k] for k in ("subcommand", "resolved_args", "run_config")})
    atomic_write_text(ctx.out_dir / f"run_manifest.{name}.json", json.dumps(body, indent=2, sort_keys=True, default=str) + "\n")


def verify_run_manifest(path):
    """Recompute the config hash; returns the argv needed to re-run."""
    body = json.loads(Path(path).read_text())
    expected = config_hash({k: body[k] for k in ("subcommand", "resolved_args", "run_config")})
    if expected != body["config_hash"]:
        raise ConfigError(f"{path}: config hash mismatch")
    return body["argv"]


def _versions():
    import scipy
    import torch

    return {
        "echodistill": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "torch": torch.__version__,
    }


# -- subcommands ----------------------------------------------------------------


def cmd_phantom_gen(ctx):
    dataset = ctx.data_dir()
    a = ctx.args
    manifest, params = write_phantom_dataset(
        dataset.root, a.n_train, a.n_val, a.n_test, a.frames, a.size, a.size, ctx.seed, a.noise_std
    )
    write_json(dataset.root / "phantoms.json", params)
    write_json(ctx.out("phantom_gen.json"), {"data_dir": str(dataset.root), "n_clips": len(manifest)})


def cmd_pseudolabel(ctx):
    dataset = ctx.data_dir()
    manifest = dataset.manifest()
    if ctx.args.teacher != "analytic":
        raise ConfigError(f"unknown teacher {ctx.args.teacher!r}")
    teacher = AnalyticTeacher(dataset.load_truth, seed=ctx.seed)
    run = generate_pseudolabels(teacher, manifest, ctx.cache_dir(), _clip_loader(dataset))
    ctx.inputs["data_dir"] = str(dataset.root)
    summary = {
        "cache": str(run.store.root),
        "computed": len(run.computed),
        "reused": len(run.reused),
        "skipped": len(run.skipped),
    }
    write_json(ctx.out("pseudolabel.json"), summary)
    print(json.dumps(summary))


def _training_config(ctx):
    a, cfg = ctx.args, ctx.config.training.to_dict()
    if a.training_config:
        cfg.update(json.loads(Path(a.training_config).read_text()))
    overrides = {
        "max_epochs": a.epochs, "learning_rate": a.lr, "batch_size": a.batch_size,
        "sequence_length": a.seq_len, "val_sequence_length": a.val_seq_len,
        "loss": a.loss, "optimizer": a.optimizer,
    }
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    cfg["seed"] = ctx.seed
    try:
        return TrainingConfig.from_dict(cfg)
    except TypeError as exc:
        raise ConfigError(f"bad training config: {exc}") from exc


def cmd_train(ctx):
    dataset = ctx.data_dir()
    manifest = dataset.manifest()
    model_cfg = ctx.config.model
    if ctx.args.model:
        model_cfg = parse_config_name(ctx.args.model, residual_last_block=ctx.args.residual, input_size=model_cfg.input_size)
    tcfg = _training_config(ctx)
    store = PseudoLabelStore(ctx.cache_dir(), AnalyticTeacher.name, AnalyticTeacher.version)
    load = _clip_loader(dataset)
    model, history = train(model_cfg, store, manifest, tcfg, load)
    prepad = int(ctx.evaluation("prepad_frames"))
    threshold = calibrate_threshold(model, manifest, store, load, prepad)
    best = history.epochs[history.best_epoch]
    save_checkpoint(model, ctx.out("model.ckpt"), epoch=best.epoch, val_loss=best.val_loss, threshold=threshold)
    history.save_csv(ctx.out("history.csv"))
    write_json(ctx.out("training_config.json"), tcfg.to_dict())
    ctx.inputs.update(data_dir=str(dataset.root), cache=str(store.root))
    print(json.dumps({"best_epoch": best.epoch, "val_loss": best.val_loss, "threshold": threshold}))


def cmd_eval_seg(ctx):
    dataset = ctx.data_dir()
    manifest = _selected(dataset.manifest(), ctx.args.split)
    mask_dir, info = _predict_masks(ctx, dataset, manifest, None)
    policy = Policy(ctx.evaluation("policy"))
    report = evaluate_segmentation(mask_dir, manifest, dataset.label_mask, policy)
    write_csv(ctx.out("seg_scores.csv"), SegScoreReport.header, report.rows())
    summary = {"model": info, "policy": policy.value, "aggregates": report.aggregates, "excluded": report.excluded}
    write_json(ctx.out("seg_summary.json"), summary)


def cmd_eval_afd(ctx):
    dataset = ctx.data_dir()
    manifest = _selected(dataset.manifest(), ctx.args.split)
    mask_dir, info = _predict_masks(ctx, dataset, manifest, None)
    series = {}
    for record in manifest:
        masks = _load_masks(mask_dir, record.clip_id)
        if masks is not None:
            series[record.clip_id] = AreaSeries.from_masks(masks, record.fps)
    rows, summary = evaluate_afd(series, manifest)
    errors = [(r[7], 0.5 * (r[5] + r[6])) for r in rows]
    bins, slope = afd_by_sampling_rate(errors)
    summary_row = ["SUMMARY", "", "", "", "", summary["afd_ed"], summary["afd_es"], "", f"degenerate={summary['n_degenerate']}"]
    write_csv(ctx.out("afd.csv"), AFD_HEADER, rows + [summary_row])
    write_csv(
        ctx.out("afd_by_fps.csv"),
        ["fps_low", "fps_high", "mean_abs_error", "count"],
        [[b.fps_low, b.fps_high, b.mean_abs_error, b.count] for b in bins],
    )
    write_json(ctx.out("afd_summary.json"), {"model": info, **summary, "fps_slope": slope})


def _mock_scorer(dataset):
    """Mock scorer over the dataset's truth masks; phantom walls come from phantoms.json."""
    params_path = dataset.root / "phantoms.json"
    if not params_path.exists():
        return build_mock_scorer(MockScorerSpec(dataset.load_truth))
    params = json.loads(params_path.read_text())

    def wall(clip_id):
        p = dict(params[clip_id])
        p["base_semiaxes"], p["center"] = tuple(p["base_semiaxes"]), tuple(p["center"])
        return wall_masks(PhantomParams(**p))

    return build_mock_scorer(MockScorerSpec(dataset.load_truth, wall))


def cmd_eval_lvm(ctx):
    dataset = ctx.data_dir()
    manifest = _selected(dataset.manifest(), ctx.args.split)
    scorer_kind = ctx.evaluation("scorer")
    if scorer_kind == "mock":
        scorer = _mock_scorer(dataset)
    elif scorer_kind == "scores-file":
        if not ctx.args.scores:
            raise ConfigError("--scores is required with --scorer scores-file")
        scorer = ScoresFileScorer(ctx.args.scores)
        ctx.inputs["scores"] = ctx.args.scores
    else:
        raise ConfigError(f"unknown scorer {scorer_kind!r}")
    mask_dir, info = _predict_masks(ctx, dataset, manifest, None)
    dilation = int(ctx.evaluation("dilation_px"))
    load = _clip_loader(dataset)
    rows, overflow, coverage, es_pred, es_lab = [], [], [], [], []
    for record in manifest:
        masks = _load_masks(mask_dir, record.clip_id)
        if masks is None:
            continue
        clip = load(record)
        frames = evaluated_frames(clip.num_frames, record.labels)
        ov = overflow_score(clip, masks, scorer, frames)
        cov = coverage_score(clip, masks, scorer, dilation, frames)
        pred, label = "", ""
        if record.labels is not None and not ctx.args.skip_mitral:
            signal = mitral_phase_signal(clip, scorer)
            label = record.labels.es_frame
            try:
                pred = detect_extreme_frame(signal, label, Phase.ES)
            except EchoDistillError:
                pred = label
            es_pred.append(pred)
            es_lab.append(label)
        rows.append([record.clip_id, ov, cov, pred, label])
        overflow.append(ov)
        coverage.append(cov)
    write_csv(ctx.out("lvm.csv"), ["clip_id", "overflow_wall", "coverage_lv_minus_nothing", "mitral_es_pred", "label_es"], rows)
    summary = {
        "model": info,
        "scorer": scorer.name,
        "n_clips": len(rows),
        "mean_overflow_wall": float(np.mean(overflow)) if rows else None,
        "mean_coverage_lv_minus_nothing": float(np.mean(coverage)) if rows else None,
        "mean_coverage_negated": -float(np.mean(coverage)) if rows else None,
        "orientation": "overflow: higher is better; coverage difference: lower is better",
        "mitral_afd_es": afd(es_pred, es_lab) if es_pred else None,
    }
    write_json(ctx.out("lvm_summary.json"), summary)


def cmd_bounds(ctx):
    a = ctx.args
    if a.action == "fit":
        if not a.diffs:
            raise ConfigError("bounds fit needs --diffs FILE")
        rows = read_csv(a.diffs)
        if not rows:
            raise DataError(f"{a.diffs} has no rows")
        column = "diff" if "diff" in rows[0] else next(iter(rows[0]))
        diffs = [int(float(r[column])) for r in rows]
        model = fit_noise_mixture(diffs)
        out = {
            "w": model.mixture_weight,
            "U": model.uniform_halfwidth,
            "b": model.laplace_scale,
            "expected_abs": expected_abs(model),
            "log_likelihood": model.log_likelihood,
            "degenerate": model.degenerate,
        }
        ctx.inputs["diffs"] = a.diffs
        write_json(ctx.out("noise_fit.json"), out)
    else:
        if a.rmse is None and a.corr is None:
            raise ConfigError("bounds needs --rmse and/or --corr, or the 'fit' action")
        out = {}
        if a.rmse is not None:
            out["rmse_rounds"], out["rmse_floor"] = a.rmse, rmse_floor(a.rmse)
        if a.corr is not None:
            out["corr_rounds"], out["corr_ceiling"] = a.corr, corr_ceiling(a.corr)
        write_json(ctx.out("bounds.json"), out)
    print(json.dumps(out))


def _read_points(path):
    rows = read_csv(path)
    try:
        return [ScalingPoint(int(float(r["param_count"])), float(r["metric_value"]), r["metric_kind"]) for r in rows]
    except KeyError as exc:
        raise DataError(f"{path} is missing column {exc}") from exc


def _fit_summary(points):
    fit = fit_loglog(points)
    out = {"slope": fit.slope, "intercept": fit.intercept, "r_squared": fit.r_squared, "log_metric_slope": fit.log_metric_slope, "knee": None}
    split = None
    if len(points) >= 4:
        split = saturation_split(points)
        out["knee"] = split.knee
    return out, fit, split


def cmd_scaling_fit(ctx):
    points = _read_points(ctx.args.points)
    ctx.inputs["points"] = ctx.args.points
    kinds = sorted({p.metric_kind.value for p in points})
    if ctx.args.kind:
        points = [p for p in points if p.metric_kind.value == ctx.args.kind]
    elif len(kinds) > 1:
        raise ConfigError(f"points mix metric kinds {kinds}; choose one with --kind")
    out, _, _ = _fit_summary(points)
    out["metric_kind"] = points[0].metric_kind.value
    write_json(ctx.out("scaling_fit.json"), out)
    write_csv(ctx.out("scaling_points.csv"), ["param_count", "metric_kind", "metric_value", "log_n", "neg_log_value"], transformed_rows(points))
    print(json.dumps(out))


def cmd_report(ctx):
    from . import plotting

    dice, miou, table2, points, fps_errors = {}, {}, [], [], []
    for run_dir in map(Path, ctx.args.inputs):
        seg, afd_s = run_dir / "seg_summary.json", run_dir / "afd_summary.json"
        info = None
        if seg.exists():
            s = json.loads(seg.read_text())
            info = s["model"]
            agg = s["aggregates"][s["policy"]]
            dice[info["name"]], miou[info["name"]] = agg["mean_dice"], agg["mean_iou"]
            points.append(ScalingPoint(info["param_count"], max(1e-9, 1 - agg["mean_iou"]), MetricKind.ONE_MINUS_IOU))
            points.append(ScalingPoint(info["param_count"], max(1e-9, 1 - agg["mean_dice"]), MetricKind.ONE_MINUS_DICE))
        if afd_s.exists():
            a = json.loads(afd_s.read_text())
            info = a["model"]
            table2.append([f"student {info['name']}", info["param_count"], a["afd_ed"], a["afd_es"], info.get("gflops_per_frame")])
            points.append(ScalingPoint(info["param_count"], max(1e-9, a["afd_ed"] + a["afd_es"]), MetricKind.AFD_SUM))
            afd_csv = run_dir / "afd.csv"
            if afd_csv.exists():
                for r in read_csv(afd_csv):
                    if r["clip_id"] != "SUMMARY":
                        fps_errors.append((float(r["fps"]), 0.5 * (float(r["abs_err_ed"]) + float(r["abs_err_es"]))))
        ctx.inputs[str(run_dir)] = info["name"] if info else None

    header, rows = table1_grid({k: 100 * v for k, v in dice.items()})
    write_csv(ctx.out("table1_dice.csv"), header, rows)
    plotting.plot_grid(header, rows, ctx.out("table1_dice.png"), "Dice (%)")
    header, rows = table1_grid({k: 100 * v for k, v in miou.items()})
    write_csv(ctx.out("table1_meaniou.csv"), header, rows)
    plotting.plot_grid(header, rows, ctx.out("table1_meaniou.png"), "meanIoU (%)")

    published = [[m, p, ed, es, None] for m, p, ed, es in PUBLISHED_TABLE2]
    write_csv(ctx.out("table2.csv"), ["method", "params", "afd_ed", "afd_es", "gflops_per_frame"], published + sorted(table2))

    fits = {}
    for kind in MetricKind:
        pts = [p for p in points if p.metric_kind is kind]
        if len({p.param_count for p in pts}) < 2:
            continue
        summary, fit, split = _fit_summary(pts)
        fits[kind.value] = summary
        plotting.plot_scaling(pts, fit, ctx.out(f"scaling_{kind.value.lower()}.png"), kind.value, split)
    if points:
        write_csv(ctx.out("scaling_points.csv"), ["param_count", "metric_kind", "metric_value", "log_n", "neg_log_value"], transformed_rows(points))
    write_json(ctx.out("scaling_fits.json"), fits)
    if fps_errors:
        bins, slope = afd_by_sampling_rate(fps_errors)
        plotting.plot_afd_vs_fps(bins, slope, ctx.out("afd_vs_fps.png"))


# -- parser -------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON file")
    common.add_argument("--seed", type=int, help="root seed; sub-seeds derive from it (default: training.seed of the config)")
    common.add_argument("--out-dir", help="artifact directory (overrides $ECHODFKD_OUT and the config)")
    common.add_argument("--data-dir")
    common.add_argument("--cache-dir")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="echodistill", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="{" + ",".join(SUBCOMMANDS) + "}")

    p = sub.add_parser("phantom-gen", parents=[common], help="write a phantom dataset")
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-val", type=int, default=40)
    p.add_argument("--n-test", type=int, default=40)
    p.add_argument("--frames", type=int, default=64)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--noise-std", type=float)
    p.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("pseudolabel", parents=[common], help="cache teacher masks")
    p.add_argument("--teacher", default="analytic")
    p.set_defaults(func=cmd_pseudolabel)

    p = sub.add_parser("train", parents=[common], help="distil a student")
    p.add_argument("--model", help="e.g. B2_l1")
    p.add_argument("--residual", action="store_true", help="residual connection on the last block")
    p.add_argument("--training-config", help="JSON with TrainingConfig fields")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--val-seq-len", type=int)
    p.add_argument("--loss", choices=["DICE", "BCE", "DICE_PLUS_BCE"])
    p.add_argument("--optimizer", choices=["SGD", "ADAM"])
    p.add_argument("--prepad-frames", type=int)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("eval-seg", cmd_eval_seg, "Dice / meanIoU on labelled frames"),
        ("eval-afd", cmd_eval_afd, "ED/ES detection and aFD"),
        ("eval-lvm", cmd_eval_lvm, "prompt-scorer mask quality"),
    ):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--checkpoint")
        p.add_argument("--masks", help="directory of <clip_id>.raw predicted masks")
        p.add_argument("--split", default="TEST", choices=["TRAIN", "VAL", "TEST", "ALL"])
        p.add_argument("--prepad-frames", type=int)
        if name == "eval-seg":
            p.add_argument("--policy", choices=[p_.value for p_ in Policy])
        if name == "eval-lvm":
            p.add_argument("--scorer", choices=["mock", "scores-file"])
            p.add_argument("--scores", help="CSV clip_id,frame,prompt,similarity")
            p.add_argument("--dilation-px", type=int)
            p.add_argument("--skip-mitral", action="store_true")
        p.set_defaults(func=func)

    p = sub.add_parser("bounds", parents=[common], help="annotator-noise bounds and mixture fit")
    p.add_argument("action", nargs="?", choices=["fit"])
    p.add_argument("--rmse", type=float)
    p.add_argument("--corr", type=float)
    p.add_argument("--diffs", help="CSV with a 'diff' column of Z1 - Z2 frame differences")
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("scaling-fit", parents=[common], help="log-log regression of metric vs size")
    p.add_argument("--points", required=True)
    p.add_argument("--kind", choices=[k.value for k in MetricKind])
    p.set_defaults(func=cmd_scaling_fit)

    p = sub.add_parser("report", parents=[common], help="grid tables, method table and figures")
    p.add_argument("--inputs", nargs="+", required=True, help="eval output directories")
    p.set_defaults(func=cmd_report)
    return parser


def _fail(exc, code):
    line = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(line), file=sys.stderr)
    return code


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        ctx = Context(args)
        args.func(ctx)
        _write_run_manifest(ctx, args.command)
    except EchoDistillError as exc:
        return _fail(exc, exc.exit_code)
    except (FileNotFoundError, KeyError) as exc:
        return _fail(exc, DataError.exit_code)
    return 0


if __name__ == "__main__":
    sys.exit(main())
