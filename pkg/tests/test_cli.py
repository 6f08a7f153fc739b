import json

import pytest

from srda.cli import run
from srda.data_synth import read_manifest
from srda.metrics import read_metric_rows

SMALL = ["--depth", "4", "--size", "32"]
SPLIT = ["--train-volumes", "2", "--val-volumes", "2"]
FAST = ["--epochs", "1", "--width", "4", "--batch-size", "4", *SPLIT]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Runs every subcommand once on a 4-volume dataset; returns the work dir."""
    w = tmp_path_factory.mktemp("cli")
    data, ck, runs = str(w / "data"), w / "ckpt", w / "runs"
    codes = {
        "gen-data": run(["gen-data", "--seed", "0", "--volumes", "4", *SMALL, "--out", data]),
        "train-ratio": run(["train-ratio", "--data", data, "--out", str(ck / "ratio.bin"), "--epochs", "1", *SPLIT]),
        "train-source": run(
            ["train-source", "--source", data, "--target", data, "--out", str(runs / "no_adapt"), *FAST]
        ),
    }
    init = str(runs / "no_adapt" / "best.bin")
    codes["adapt"] = run([
        "adapt", "--init", init, "--regressor", str(ck / "ratio.bin"), "--target", data,
        "--lambda", "0.01", "--out", str(runs / "adaent"), *FAST,
    ])
    codes["train-adasource"] = run([
        "train-adasource", "--init", init, "--regressor", str(ck / "ratio.bin"), "--source", data,
        "--target", data, "--out", str(runs / "adasource"), *FAST,
    ])
    codes["train-oracle"] = run(["train-oracle", "--target", data, "--out", str(runs / "oracle"), *FAST])
    codes["evaluate"] = run([
        "evaluate", "--checkpoint", str(runs / "adaent" / "best.bin"), "--data", data, *SPLIT,
        "--out", str(w / "metrics.csv"),
    ])
    codes["report"] = run(["report", "--runs", str(runs), "--out", str(w / "figs")])
    return w, codes


def test_every_subcommand_succeeds(pipeline):
    w, codes = pipeline
    assert codes == {k: 0 for k in codes}
    assert len(read_manifest(w / "data")["volumes"]) == 4
    for name in ("no_adapt", "adaent", "adasource", "oracle"):
        assert (w / "runs" / name / "best.bin").exists()
        assert (w / "runs" / name / "record.csv").exists()
    for f in ("dsc_curves.png", "entropy_panels.png", "table.csv", "table.txt"):
        assert (w / "figs" / f).stat().st_size > 0
    assert "AdaEnt" in (w / "figs" / "table.txt").read_text()


def test_evaluate_rows_and_rerun_is_idempotent(pipeline):
    w, _ = pipeline
    csv = w / "metrics.csv"
    rows = read_metric_rows(csv)
    assert [r.volume_id for r in rows] == ["vol_002", "vol_003"]
    assert {r.method for r in rows} == {"adaent"}
    before = csv.read_bytes()
    data = str(w / "data")
    args = ["evaluate", "--checkpoint", str(w / "runs" / "adaent" / "best.bin"), "--data", data, *SPLIT]
    assert run([*args, "--out", str(csv)]) == 0
    assert csv.read_bytes() == before
    assert run([*args, "--out", str(csv), "--run-id", "other"]) == 0
    assert len(read_metric_rows(csv)) == 4


def test_gen_data_rerun_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["gen-data", "--volumes", "2", *SMALL, "--out", str(a)]) == 0
    assert run(["gen-data", "--volumes", "2", *SMALL, "--out", str(b)]) == 0
    for f in sorted(a.rglob("*.npy")):
        assert f.read_bytes() == (b / f.relative_to(a)).read_bytes()


def test_config_file_precedence(tmp_path, monkeypatch):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"volumes": 2, "size": 32, "depth": 4, "seed": 7}))
    monkeypatch.setenv("SRDA_DATA_DIR", str(tmp_path / "env_data"))
    assert run(["gen-data", "--config", str(cfg), "--volumes", "3"]) == 0
    man = read_manifest(tmp_path / "env_data")
    assert len(man["volumes"]) == 3
    assert man["seed"] == 7


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["frobnicate"],
        ["gen-data", "--bogus"],
        ["adapt", "--init", "a.bin", "--regressor", "r.bin", "--source", "data"],
        ["adapt", "--regressor", "r.bin"],
        ["evaluate"],
        ["train-source", "--epochs", "many"],
    ],
)
def test_usage_errors(argv, capsys):
    assert run(argv) == 1
    assert capsys.readouterr().err.strip()


def test_config_file_cannot_smuggle_source(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"source": "data", "init": "a.bin", "regressor": "r.bin"}))
    assert run(["adapt", "--config", str(cfg)]) == 1
    assert "source" in capsys.readouterr().err


def test_unreadable_config_is_usage_error(tmp_path):
    assert run(["gen-data", "--config", str(tmp_path / "missing.json")]) == 1
    bad = tmp_path / "list.json"
    bad.write_text("[1, 2]")
    assert run(["gen-data", "--config", str(bad)]) == 1


def test_runtime_errors_exit_2(tmp_path, capsys):
    assert run(["evaluate", "--checkpoint", str(tmp_path / "none.bin"), "--data", str(tmp_path)]) == 2
    assert run(["adapt", "--init", str(tmp_path / "x.bin"), "--regressor", "r.bin", "--target", str(tmp_path)]) == 2
    assert "error" in capsys.readouterr().err


def test_adapt_source_flag_names_the_contract(capsys):
    assert run(["adapt", "--init", "a.bin", "--regressor", "r.bin", "--source", "data"]) == 1
    assert "source-free" in capsys.readouterr().err
    # no abbreviation can reach a source option either
    assert run(["adapt", "--init", "a.bin", "--regressor", "r.bin", "--sour", "data"]) == 1
