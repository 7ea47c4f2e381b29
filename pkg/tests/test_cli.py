import json

import pytest

from echodistill.cli import main, verify_run_manifest
from echodistill.tables import read_csv


@pytest.fixture(autouse=True)
def _no_env_out(monkeypatch):
    monkeypatch.delenv("ECHODFKD_OUT", raising=False)


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """phantom-gen -> pseudolabel -> train -> eval-* on a tiny dataset, twice with the same seed."""
    root = tmp_path_factory.mktemp("cli")
    data, cache = root / "data", root / "cache"
    assert run("phantom-gen", "--data-dir", data, "--out-dir", root / "gen", "--n-train", 4, "--n-val", 2,
               "--n-test", 3, "--frames", 24, "--size", 32, "--seed", 1) == 0
    assert run("pseudolabel", "--data-dir", data, "--cache-dir", cache, "--out-dir", root / "pl") == 0
    outs = []
    for k in range(2):
        out = root / f"run{k}"
        assert run("train", "--data-dir", data, "--cache-dir", cache, "--out-dir", out, "--model", "B2_l1",
                   "--epochs", 2, "--seq-len", 6, "--batch-size", 2, "--optimizer", "ADAM", "--lr", 0.003, "--seed", 4) == 0
        for cmd in ("eval-seg", "eval-afd", "eval-lvm"):
            assert run(cmd, "--data-dir", data, "--checkpoint", out / "model.ckpt", "--out-dir", out) == 0
        outs.append(out)
    return root, data, cache, outs


def test_pseudolabel_rerun_computes_nothing(pipeline, capsys):
    root, data, cache, _ = pipeline
    capsys.readouterr()
    assert run("pseudolabel", "--data-dir", data, "--cache-dir", cache, "--out-dir", root / "pl2") == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["computed"] == 0 and summary["reused"] == 9


def test_same_seed_gives_identical_artifacts(pipeline):
    _, _, _, (a, b) = pipeline
    for name in ("history.csv", "seg_scores.csv", "afd.csv", "afd_by_fps.csv", "lvm.csv", "seg_summary.json", "afd_summary.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    assert (a / "model.ckpt").read_bytes() == (b / "model.ckpt").read_bytes()


def test_outputs_have_expected_columns(pipeline):
    _, _, _, (a, _) = pipeline
    assert list(read_csv(a / "history.csv")[0]) == ["epoch", "train_loss", "val_loss"]
    rows = read_csv(a / "afd.csv")
    assert rows[-1]["clip_id"] == "SUMMARY" and len(rows) == 4
    seg = json.loads((a / "seg_summary.json").read_text())
    assert seg["model"]["name"] == "B2_l1" and seg["model"]["param_count"] == 52625
    assert set(seg["aggregates"]) == {"FULL", "EXCLUDE_CORRUPTED"}


def test_run_manifest_verifies_and_detects_tampering(pipeline):
    _, _, _, (a, _) = pipeline
    path = a / "run_manifest.train.json"
    argv = verify_run_manifest(path)
    assert argv[0] == "train"
    body = json.loads(path.read_text())
    body["resolved_args"]["epochs"] = 99
    path.with_name("tampered.json").write_text(json.dumps(body))
    from echodistill.errors import ConfigError

    with pytest.raises(ConfigError):
        verify_run_manifest(path.with_name("tampered.json"))


def test_report_writes_tables_and_figures(pipeline, tmp_path):
    _, _, _, (a, b) = pipeline
    assert run("report", "--inputs", a, "--out-dir", tmp_path) == 0
    for name in ("table1_dice.csv", "table1_meaniou.csv", "table2.csv", "table1_dice.png", "afd_vs_fps.png"):
        assert (tmp_path / name).exists(), name
    grid = read_csv(tmp_path / "table1_dice.csv")
    assert [r["layers"] for r in grid] == ["l1", "l2", "l3", "l4"]
    assert grid[0]["B2"] != "" and grid[0]["B1"] == ""
    assert "student B2_l1" in (tmp_path / "table2.csv").read_text()


def test_scaling_fit_command(tmp_path, capsys):
    rows = ["param_count,metric_kind,metric_value"] + [f"{n},AFD_SUM,{n ** -0.15!r}" for n in (10**4, 10**5, 10**6, 4 * 10**6)]
    (tmp_path / "pts.csv").write_text("\n".join(rows) + "\n")
    assert run("scaling-fit", "--points", tmp_path / "pts.csv", "--out-dir", tmp_path) == 0
    out = json.loads((tmp_path / "scaling_fit.json").read_text())
    assert out["slope"] == pytest.approx(0.15)


def test_bounds_command(tmp_path, capsys):
    assert run("bounds", "--rmse", 5.7, "--corr", 0.801, "--out-dir", tmp_path) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["rmse_floor"] == pytest.approx(4.0305, abs=1e-3)
    assert out["corr_ceiling"] == pytest.approx(0.895, abs=1e-4)


def test_bounds_fit_command(tmp_path):
    import numpy as np

    from echodistill.bounds import sample_round_diffs

    d = sample_round_diffs(2000, 0.0, 50, 2.0, np.random.default_rng(0))
    (tmp_path / "d.csv").write_text("diff\n" + "\n".join(map(str, d)) + "\n")
    assert run("bounds", "fit", "--diffs", tmp_path / "d.csv", "--out-dir", tmp_path) == 0
    fit = json.loads((tmp_path / "noise_fit.json").read_text())
    assert 1.7 <= fit["b"] <= 2.3


@pytest.mark.parametrize(
    "argv, code",
    [
        (["bounds", "--corr", "1.5"], 2),
        (["bounds"], 2),
        (["train", "--data-dir", "{missing}"], 3),
        (["scaling-fit", "--points", "{missing}/p.csv"], 3),
    ],
)
def test_error_exit_codes_and_json_stderr(tmp_path, capsys, argv, code):
    argv = [a.replace("{missing}", str(tmp_path / "nowhere")) for a in argv]
    assert run(*argv, "--out-dir", tmp_path / "o") == code
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["exit_code"] == code and err["message"]


def test_env_var_sets_out_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("ECHODFKD_OUT", str(tmp_path / "env-out"))
    assert run("bounds", "--rmse", 1.0) == 0
    assert (tmp_path / "env-out" / "bounds.json").exists()
