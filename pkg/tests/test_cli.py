"""End-to-end and error-path tests for the ``vsdt`` command line."""

import json
import os

import numpy as np
import pytest
from fastapi.testclient import TestClient

from vsdt import __version__, surrogate as sg
from vsdt.cli import (
    CliError,
    SERVE_DEFAULTS,
    _parse_dims,
    _parse_spacing,
    _parse_split,
    build_serve_app,
    main,
)
from vsdt.femsim import SequenceDataset


# ---------------------------------------------------------------------------
# a small but complete pipeline, shared by the read-only tests below
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gendata -> train once; later tests reuse the artifacts."""
    root = tmp_path_factory.mktemp("cli")
    dataset = str(root / "tiny.vsdt")
    checkpoint = str(root / "model.ckpt")
    assert (
        main(
            [
                "gendata",
                "--mesh", "4,4,3",
                "--sequences", "3",
                "--frames", "6",
                "--tau-scale", "0.01",
                "--seed", "3",
                "--out", dataset,
            ]
        )
        == 0
    )
    assert (
        main(
            [
                "train",
                "--data", dataset,
                "--model", "linear",
                "--lr", "1e-4",
                "--epochs", "2",
                "--patience", "5",
                "--split", "0.7,0.3",
                "--seed", "1",
                "--out", checkpoint,
            ]
        )
        == 0
    )
    return {"root": root, "dataset": dataset, "checkpoint": checkpoint}


def test_gendata_output_and_manifest(pipeline):
    ds = SequenceDataset.load(pipeline["dataset"])
    assert len(ds) == 3
    assert ds.n_frames == 6
    assert ds.mesh.dims == (4, 4, 3)

    with open(pipeline["dataset"] + ".manifest.json") as fh:
        manifest = json.load(fh)
    assert manifest["command"] == "gendata"
    assert manifest["seed"] == 3
    assert manifest["config"]["sequences"] == 3
    assert manifest["outputs"] == [pipeline["dataset"]]
    assert manifest["version"] == __version__
    assert manifest["wall_clock_s"] > 0


def test_train_checkpoint_loads(pipeline):
    model, loss_cfg, _, _ = sg.load_checkpoint(pipeline["checkpoint"])
    assert model.spec.kind == "linear"
    assert model.spec.dims == (4, 4, 3)
    assert loss_cfg is not None  # training always records its loss settings
    with open(pipeline["checkpoint"] + ".manifest.json") as fh:
        manifest = json.load(fh)
    assert manifest["command"] == "train"
    assert manifest["inputs"] == [pipeline["dataset"]]


def test_eval_writes_reports(pipeline, capsys):
    out_dir = str(pipeline["root"] / "reports")
    code = main(
        [
            "eval",
            "--data", pipeline["dataset"],
            "--checkpoints", pipeline["checkpoint"],
            "--out", out_dir,
        ]
    )
    assert code == 0
    assert "report files" in capsys.readouterr().out
    for name in (
        "bland_altman.csv",
        "depth_profile.csv",
        "volume_trace.csv",
        "metrics.json",
        "manifest.json",
    ):
        assert os.path.exists(os.path.join(out_dir, name)), name
    with open(os.path.join(out_dir, "metrics.json")) as fh:
        metrics = json.load(fh)
    entry = metrics["models"]["model"]
    assert entry["mae_mm"] >= 0.0
    assert "bland_altman" in entry and "depth_profile" in entry


def test_eval_several_checkpoints_get_unique_names(pipeline):
    out_dir = str(pipeline["root"] / "reports2")
    code = main(
        [
            "eval",
            "--data", pipeline["dataset"],
            "--checkpoints", pipeline["checkpoint"], pipeline["checkpoint"],
            "--out", out_dir,
        ]
    )
    assert code == 0
    assert os.path.exists(os.path.join(out_dir, "bland_altman_model.csv"))
    assert os.path.exists(os.path.join(out_dir, "bland_altman_model-2.csv"))
    with open(os.path.join(out_dir, "metrics.json")) as fh:
        metrics = json.load(fh)
    assert set(metrics["models"]) == {"model", "model-2"}


def test_bench_reports_latency(pipeline, capsys):
    out_dir = str(pipeline["root"] / "bench")
    code = main(
        [
            "bench",
            "--checkpoint", pipeline["checkpoint"],
            "--iterations", "100",
            "--warmup", "10",
            "--out", out_dir,
        ]
    )
    assert code == 0
    assert "mean" in capsys.readouterr().out
    assert os.path.exists(os.path.join(out_dir, "latency.json"))
    assert os.path.exists(os.path.join(out_dir, "latency.csv"))
    with open(os.path.join(out_dir, "latency.json")) as fh:
        report = json.load(fh)
    assert report["model_kind"] == "linear"
    assert report["mean_s"] > 0


def test_eval_rejects_mismatched_mesh(pipeline, tmp_path, capsys):
    other = str(tmp_path / "other.vsdt")
    assert (
        main(
            [
                "gendata",
                "--mesh", "3,3,3",
                "--sequences", "1",
                "--frames", "4",
                "--tau-scale", "0.01",
                "--out", other,
            ]
        )
        == 0
    )
    code = main(
        [
            "eval",
            "--data", other,
            "--checkpoints", pipeline["checkpoint"],
            "--out", str(tmp_path / "r"),
        ]
    )
    assert code == 2
    assert "matching data" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------


def test_config_file_fills_flags_and_cli_wins(pipeline, tmp_path):
    cfg_path = tmp_path / "train.json"
    cfg_path.write_text(
        json.dumps(
            {
                "data": pipeline["dataset"],
                "model": "linear",
                "lambda": 0.0,
                "lr": 1e-4,
                "epochs": 5,
                "patience": 5,
                "split": "0.7,0.3",
                "out": str(tmp_path / "from_config.ckpt"),
            }
        )
    )
    # --epochs on the command line must override the file's value
    code = main(["train", "--config", str(cfg_path), "--epochs", "1"])
    assert code == 0
    with open(str(tmp_path / "from_config.ckpt") + ".manifest.json") as fh:
        manifest = json.load(fh)
    assert manifest["config"]["epochs"] == 1
    assert manifest["config"]["lam"] == 0.0  # "lambda" is accepted in files


@pytest.mark.parametrize(
    "content, fragment",
    [
        ("{not json", "cannot read config"),
        ("[1, 2]", "must hold a JSON object"),
        ('{"no_such_flag": 1}', "unknown key"),
    ],
)
def test_bad_config_files(tmp_path, capsys, content, fragment):
    path = tmp_path / "bad.json"
    path.write_text(content)
    assert main(["gendata", "--config", str(path), "--out", "x.vsdt"]) == 2
    assert fragment in capsys.readouterr().err


def test_missing_config_file(capsys):
    assert main(["gendata", "--config", "/no/such.json", "--out", "x"]) == 2
    assert "cannot read config" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# usage and failure exit codes
# ---------------------------------------------------------------------------


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_missing_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2


@pytest.mark.parametrize(
    "argv, fragment",
    [
        (["gendata", "--mesh", "4,4,3"], "--out is required"),
        (["gendata", "--mesh", "4,4", "--out", "x.vsdt"], "three"),
        (["gendata", "--mesh", "4,4,3", "--frames", "1", "--out", "x"], "--frames"),
        (["train", "--out", "x.ckpt"], "--data is required"),
        (["train", "--data", "/no/such.vsdt", "--out", "x.ckpt"], "cannot load dataset"),
        (["eval", "--data", "/no/such.vsdt", "--checkpoints", "a", "--out", "d"],
         "cannot load dataset"),
        (["bench", "--checkpoint", "/no/such.ckpt"], "cannot load checkpoint"),
    ],
)
def test_config_errors_exit_2(capsys, argv, fragment):
    assert main(argv) == 2
    assert fragment in capsys.readouterr().err


def test_bench_validates_iteration_floor(pipeline, capsys, tmp_path):
    code = main(
        [
            "bench",
            "--checkpoint", pipeline["checkpoint"],
            "--iterations", "5",
            "--out", str(tmp_path / "b"),
        ]
    )
    assert code == 2
    assert "error:" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore:invalid value encountered")
def test_unusable_data_fails_training_with_exit_4(pipeline, tmp_path, capsys):
    ds = SequenceDataset.load(pipeline["dataset"])
    for seq in ds.sequences:
        seq.forces[0, 0, 0, 0, 0] = np.inf
    poisoned = str(tmp_path / "poisoned.vsdt")
    ds.save(poisoned)
    code = main(
        [
            "train",
            "--data", poisoned,
            "--model", "linear",
            "--epochs", "2",
            "--split", "0.7,0.3",
            "--out", str(tmp_path / "p.ckpt"),
        ]
    )
    assert code == 4
    assert "training failure" in capsys.readouterr().err


def test_workers_env_cap(tmp_path, monkeypatch):
    monkeypatch.setenv("VSDT_THREADS", "1")
    out = str(tmp_path / "capped.vsdt")
    code = main(
        [
            "gendata",
            "--mesh", "4,4,3",
            "--sequences", "2",
            "--frames", "4",
            "--tau-scale", "0.01",
            "--workers", "8",
            "--out", out,
        ]
    )
    assert code == 0
    assert len(SequenceDataset.load(out)) == 2


# ---------------------------------------------------------------------------
# serve app assembly
# ---------------------------------------------------------------------------


def serve_cfg(**overrides):
    cfg = dict(SERVE_DEFAULTS)
    cfg.update(overrides)
    return cfg


def test_build_serve_app_surrogate_profile(pipeline):
    app = build_serve_app(serve_cfg(checkpoint=pipeline["checkpoint"]))
    with TestClient(app) as client:
        got = client.get("/profiles").json()
        assert got == {"profiles": ["surrogate"], "default": "surrogate"}
        created = client.post("/sessions", json={})
        assert created.status_code == 201
        assert created.json()["engine"] == "surrogate"


def test_build_serve_app_with_fem(pipeline):
    app = build_serve_app(
        serve_cfg(checkpoint=pipeline["checkpoint"], fem=True, tau_scale=0.01)
    )
    with TestClient(app) as client:
        assert client.get("/profiles").json()["profiles"] == ["fem", "surrogate"]
        created = client.post("/sessions", json={"profile": "fem"})
        assert created.status_code == 201
        assert created.json()["dims"] == [4, 4, 3]


def test_build_serve_app_requires_an_engine():
    with pytest.raises(CliError, match="needs --checkpoint and/or --fem"):
        build_serve_app(serve_cfg())
    with pytest.raises(CliError, match="needs --mesh"):
        build_serve_app(serve_cfg(fem=True))


# ---------------------------------------------------------------------------
# value parsers
# ---------------------------------------------------------------------------


class TestValueParsers:
    def test_dims_from_string_and_list(self):
        assert _parse_dims("9,9,5", "--mesh") == (9, 9, 5)
        assert _parse_dims([4, 4, 3], "--mesh") == (4, 4, 3)

    @pytest.mark.parametrize("bad", ["9,9", "a,b,c", "0,4,4", [1, 2, 3, 4]])
    def test_dims_rejects(self, bad):
        with pytest.raises(CliError):
            _parse_dims(bad, "--mesh")

    def test_spacing_forms(self):
        assert _parse_spacing(2, "--spacing") == 2.0
        assert _parse_spacing("0.5", "--spacing") == 0.5
        assert _parse_spacing("0.5,0.5,1.0", "--spacing") == (0.5, 0.5, 1.0)

    @pytest.mark.parametrize("bad", ["1,2", "x", [1.0, 2.0]])
    def test_spacing_rejects(self, bad):
        with pytest.raises(CliError):
            _parse_spacing(bad, "--spacing")

    def test_split_forms(self):
        assert _parse_split("0.8,0.2") == (0.8, 0.2)
        assert _parse_split([0.7, 0.2, 0.1]) == (0.7, 0.2, 0.1)

    @pytest.mark.parametrize("bad", ["0.8", "a,b", "1,2,3,4"])
    def test_split_rejects(self, bad):
        with pytest.raises(CliError):
            _parse_split(bad)
