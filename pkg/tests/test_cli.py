import json
import subprocess
import sys

import pytest

from weakseg3d.cli import main

TINY_DOC = {
    "seed": 5,
    "phantom": {"dims": [16, 16, 16]},
    "data": {"n_train": 4, "n_val": 2, "n_test": 1},
    "scheme": {"ratio": 0.5, "loose_offset_range": [2, 4]},
    "pipeline": {
        "net": {"base_channels": 2},
        "ssn": {"epochs": 2},
        "sdn": {"epochs": 1, "steps_per_epoch": 2},
        "iter": {"iter_epochs": 1, "max_iterations": 1},
    },
    "experiment": {"ratios": [0.5, 1.0], "schemes": ["hybrid"], "ablations": ["full"]},
}


@pytest.fixture()
def cfg_path(tmp_path):
    p = tmp_path / "run.json"
    p.write_text(json.dumps(TINY_DOC))
    return p


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_missing_config_is_usage_error(capsys):
    with pytest.raises(SystemExit) as e:
        main(["gen-data", "--out", "x"])
    assert e.value.code == 2
    assert "usage" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["bogus", "--config", "c"], ["gen-data", "--config", "c", "--nope"], []])
def test_usage_errors_exit_2(argv):
    with pytest.raises(SystemExit) as e:
        main(argv)
    assert e.value.code == 2


def test_runtime_error_exits_nonzero(cfg_path, tmp_path, capsys):
    assert main(["iterate", "--config", str(cfg_path), "--out", str(tmp_path / "o")]) == 1
    assert "train-init" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text('{"nope": 1}')
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1


def test_gen_data_deterministic(cfg_path, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(a)]) == 0
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(b)]) == 0
    fa = _files(a)
    assert len([k for k in fa if k.endswith(".vvol")]) == 2 * (4 + 2 + 1)
    assert fa == _files(b)
    c = tmp_path / "c"
    main(["gen-data", "--config", str(cfg_path), "--out", str(c), "--seed", "6"])
    assert _files(c) != fa


def test_staged_run_matches_experiment(cfg_path, tmp_path):
    out = tmp_path / "run"
    for cmd in ("gen-data", "make-labels", "train-init", "train-sdn", "iterate", "evaluate"):
        assert main([cmd, "--config", str(cfg_path), "--out", str(out)]) == 0, cmd
    for f in ("models/ssn_init.ckpt", "models/sdn.ckpt", "models/ssn_final.ckpt", "models/template.vvol", "labels/manifest.json"):
        assert (out / f).exists(), f
    ev = json.loads((out / "eval" / "evaluation.json").read_text())
    assert ev["model"] == "ssn_final.ckpt"
    assert set(ev["splits"]) == {"val", "test"}

    exp = tmp_path / "exp"
    assert main(["experiment", "--config", str(cfg_path), "--out", str(exp)]) == 0
    reports = sorted((exp / "reports").glob("*.json"))
    assert len(reports) == 2
    assert (exp / "summary.txt").exists() and (exp / "summary.csv").exists()
    cell = json.loads((exp / "reports" / "hybrid_r0.5_full.json").read_text())
    # the staged commands and the in-memory grid are the same computation
    assert cell["dice"] == ev["splits"]["val"]["dice_ssn"]


def test_experiment_and_report_reproducible(cfg_path, tmp_path):
    runs = []
    for name in ("x", "y"):
        out = tmp_path / name
        assert main(["experiment", "--config", str(cfg_path), "--out", str(out)]) == 0
        assert main(["report", "--config", str(cfg_path), "--out", str(out)]) == 0
        runs.append(_files(out))
    assert runs[0] == runs[1]
    files = runs[0]
    for f in ("report/table.txt", "report/table.csv", "report/ablation_dice.png", "report/iteration_curves.png", "report/ratio_trend.png"):
        assert f in files
    assert b"Software" not in files["report/ablation_dice.png"]
    table = files["report/table.txt"].decode()
    assert "50%" in table and "100%" in table and "full" in table
    header = files["report/table.csv"].decode().splitlines()[0]
    assert header.startswith("scheme,ratio,ablation")


def test_report_without_reports(cfg_path, tmp_path):
    assert main(["report", "--config", str(cfg_path), "--out", str(tmp_path / "empty")]) == 1


def test_console_entry_point(cfg_path, tmp_path):
    r = subprocess.run(
        [sys.executable, "-m", "weakseg3d.cli", "gen-data", "--config", str(cfg_path), "--out", str(tmp_path / "z")],
        capture_output=True,
        text=True,
    )
    assert r.returncode == 0, r.stderr
    assert "wrote 7 cases" in r.stdout
