"""Command-line front end: one ``vsdt`` binary, five subcommands.

``gendata`` simulates training sequences, ``train`` fits a surrogate,
``eval`` writes the metric reports, ``bench`` times inference, and
``serve`` starts the live session service.

Every flag may also come from a JSON config file (``--config``); values
given on the command line win.  Each run writes a manifest recording the
fully resolved configuration, so a run can be reproduced bit-identically
from its manifest.  Exit codes: 0 success, 2 configuration or usage
error, 3 solver failure, 4 training failure.  The ``VSDT_THREADS``
environment variable caps worker pools and BLAS threads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass

import numpy as np

from . import __version__, evalkit, meshkit, store, trainer
from . import surrogate as sg
from .evalkit import EvalError
from .femsim import (
    DatasetError,
    ElementInversionError,
    Material,
    MaterialError,
    ScenarioConfig,
    SequenceDataset,
    SolverError,
    generate_dataset,
)
from .surrogate import LossConfigError, ModelSpecError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_TRAINING = 4

MODEL_NAMES = {"linear": "linear", "cnn": "cnn_unet", "cnn-lstm": "cnn_lstm"}


class CliError(Exception):
    """User-facing failure with an exit code."""

    def __init__(self, message: str, code: int = EXIT_CONFIG):
        super().__init__(message)
        self.code = code


# ----------------------------------------------------------------------
# manifests
# ----------------------------------------------------------------------


@dataclass
class RunManifest:
    """Everything needed to reproduce one subcommand run."""

    command: str
    config: dict
    seed: int | None
    inputs: list
    outputs: list
    wall_clock_s: float
    version: str = __version__

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "inputs": [str(p) for p in self.inputs],
            "outputs": [str(p) for p in self.outputs],
            "wall_clock_s": self.wall_clock_s,
            "version": self.version,
        }

    def write(self, path) -> None:
        store.write_metrics(path, self.to_dict())


def _manifest_path(out: str) -> str:
    """Next to a file output: ``<out>.manifest.json``; inside a
    directory output: ``<out>/manifest.json``."""
    if os.path.isdir(out):
        return os.path.join(out, "manifest.json")
    return f"{out}.manifest.json"


# ----------------------------------------------------------------------
# flag parsing and config-file merging
# ----------------------------------------------------------------------

GENDATA_DEFAULTS: dict = {
    "mesh": "9,9,5",
    "spacing": "1.0",
    "fixed": "sides+bottom",
    "material_file": None,
    "tau_scale": 1.0,
    "sequences": 60,
    "frames": 21,
    "sample_interval": 0.05,
    "seed": 0,
    "workers": 1,
    "out": None,
}

TRAIN_DEFAULTS: dict = {
    "data": None,
    "model": "cnn-lstm",
    "nn": 512,
    "nt": 2,
    "lam": 0.1,
    "gate": 0.07,
    "gate_absolute": None,
    "cosine_weight": 0.0,
    "lr": 1e-5,
    "batch_size": 8,
    "epochs": 300,
    "patience": 30,
    "split": "0.8,0.2",
    "seed": 0,
    "out": None,
}

EVAL_DEFAULTS: dict = {
    "data": None,
    "checkpoints": None,
    "z": 1.96,
    "out": None,
}

BENCH_DEFAULTS: dict = {
    "checkpoint": None,
    "iterations": 200,
    "warmup": 20,
    "seed": 0,
    "out": None,
}

SERVE_DEFAULTS: dict = {
    "checkpoint": None,
    "fem": False,
    "host": "127.0.0.1",
    "port": 8000,
    "mesh": None,
    "spacing": "1.0",
    "fixed": "sides+bottom",
    "tau_scale": 1.0,
    "sample_interval": 0.05,
    "damping": 5.0,
}

_DEFAULTS = {
    "gendata": GENDATA_DEFAULTS,
    "train": TRAIN_DEFAULTS,
    "eval": EVAL_DEFAULTS,
    "bench": BENCH_DEFAULTS,
    "serve": SERVE_DEFAULTS,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vsdt",
        description="Soft-tissue deformation: simulate, train, evaluate, serve.",
    )
    parser.add_argument("--version", action="version", version=f"vsdt {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    # Flags default to SUPPRESS: the namespace then carries only what
    # the user actually typed, so config-file values can fill the rest.
    def add(p, *names, **kw):
        kw.setdefault("default", argparse.SUPPRESS)
        p.add_argument(*names, **kw)

    g = sub.add_parser("gendata", help="simulate a sequence dataset")
    add(g, "--mesh", help="grid nodes X,Y,Z (default 9,9,5)")
    add(g, "--spacing", help="node spacing in mm, scalar or X,Y,Z (default 1.0)")
    add(g, "--fixed", help="pinned boundary: sides+bottom | bottom | none "
                          "(default sides+bottom)")
    add(g, "--material-file", dest="material_file",
        help="JSON material constants (default: built-in soft tissue)")
    add(g, "--tau-scale", dest="tau_scale", type=float,
        help="relaxation-time scale factor when no material file (default 1.0)")
    add(g, "--sequences", type=int, help="number of sequences (default 60)")
    add(g, "--frames", type=int, help="frames per sequence (default 21)")
    add(g, "--sample-interval", dest="sample_interval", type=float,
        help="seconds between frames (default 0.05)")
    add(g, "--seed", type=int, help="master RNG seed (default 0)")
    add(g, "--workers", type=int,
        help="parallel simulation processes, capped by VSDT_THREADS (default 1)")
    add(g, "--out", help="output dataset file (required)")
    add(g, "--config", help="JSON file supplying any of the above flags")

    t = sub.add_parser("train", help="train a surrogate model")
    add(t, "--data", help="dataset file from gendata (required)")
    add(t, "--model", choices=sorted(MODEL_NAMES),
        help="architecture: linear | cnn | cnn-lstm (default cnn-lstm)")
    add(t, "--nn", type=int, help="LSTM units per direction (default 512)")
    add(t, "--nt", type=int, help="force-window length in frames (default 2)")
    add(t, "--lambda", dest="lam", type=float,
        help="volume-penalty weight; 0 gives the generic model (default 0.1)")
    add(t, "--gate", type=float,
        help="volume gate as a fraction of rest volume (default 0.07)")
    add(t, "--gate-absolute", dest="gate_absolute", type=float,
        help="volume gate in mm^3, overrides --gate (default: off)")
    add(t, "--cosine-weight", dest="cosine_weight", type=float,
        help="force/displacement alignment weight (default 0)")
    add(t, "--lr", type=float, help="Adam learning rate (default 1e-5)")
    add(t, "--batch-size", dest="batch_size", type=int, help="(default 8)")
    add(t, "--epochs", type=int, help="epoch cap (default 300)")
    add(t, "--patience", type=int, help="early-stopping patience (default 30)")
    add(t, "--split", help="train,val[,test] fractions (default 0.8,0.2)")
    add(t, "--seed", type=int, help="init/shuffle/split seed (default 0)")
    add(t, "--out", help="checkpoint output path (required)")
    add(t, "--config", help="JSON file supplying any of the above flags")

    e = sub.add_parser("eval", help="write metric reports for checkpoints")
    add(e, "--data", help="held-out dataset file (required)")
    add(e, "--checkpoints", nargs="+", help="one or more checkpoint files (required)")
    add(e, "--z", type=float,
        help="agreement-limit multiplier: 1.96 for 95%%, 2.054 for 96%% (default 1.96)")
    add(e, "--out", help="output directory (required)")
    add(e, "--config", help="JSON file supplying any of the above flags")

    b = sub.add_parser("bench", help="time single-window inference")
    add(b, "--checkpoint", help="checkpoint file (required)")
    add(b, "--iterations", type=int, help="timed iterations, >= 100 (default 200)")
    add(b, "--warmup", type=int, help="untimed warm-up iterations, >= 10 (default 20)")
    add(b, "--seed", type=int, help="input-noise seed (default 0)")
    add(b, "--out", help="output directory (default: next to the checkpoint)")
    add(b, "--config", help="JSON file supplying any of the above flags")

    s = sub.add_parser("serve", help="start the live session service")
    add(s, "--checkpoint", help="surrogate checkpoint to serve")
    add(s, "--fem", action="store_true",
        help="also offer the reference-solver engine (default off)")
    add(s, "--host", help="bind address (default 127.0.0.1)")
    add(s, "--port", type=int, help="TCP port (default 8000)")
    add(s, "--mesh", help="fem grid nodes X,Y,Z (default: checkpoint dims)")
    add(s, "--spacing", help="fem node spacing in mm (default 1.0)")
    add(s, "--fixed", help="fem pinned boundary (default sides+bottom)")
    add(s, "--tau-scale", dest="tau_scale", type=float,
        help="fem relaxation-time scale (default 1.0)")
    add(s, "--sample-interval", dest="sample_interval", type=float,
        help="fem seconds advanced per step (default 0.05)")
    add(s, "--damping", type=float, help="fem damping, 1/s (default 5.0)")
    add(s, "--config", help="JSON file supplying any of the above flags")

    return parser


def _resolve(command: str, ns: argparse.Namespace) -> dict:
    """Merge defaults <- config file <- explicit flags."""
    given = {k: v for k, v in vars(ns).items() if k != "command"}
    defaults = _DEFAULTS[command]
    merged = dict(defaults)
    config_path = given.pop("config", None)
    if config_path:
        try:
            with open(config_path, "r", encoding="utf-8") as fh:
                file_values = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config file {config_path}: {exc}") from exc
        if not isinstance(file_values, dict):
            raise CliError(f"config file {config_path} must hold a JSON object")
        for key, value in file_values.items():
            key = key.replace("-", "_")
            if key == "lambda":
                key = "lam"
            if key not in defaults:
                raise CliError(
                    f"config file {config_path}: unknown key {key!r} for {command}"
                )
            merged[key] = value
    merged.update(given)
    merged["config"] = config_path
    return merged


# -- small value parsers (shared by flags and config files) ------------


def _parse_dims(value, flag: str) -> tuple[int, int, int]:
    if isinstance(value, str):
        parts = value.split(",")
    else:
        parts = list(value)
    try:
        dims = tuple(int(p) for p in parts)
    except (TypeError, ValueError):
        raise CliError(f"{flag} must be three integers X,Y,Z, got {value!r}") from None
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise CliError(f"{flag} must be three positive integers, got {value!r}")
    return dims


def _parse_spacing(value, flag: str):
    if isinstance(value, (int, float)):
        return float(value)
    parts = value.split(",") if isinstance(value, str) else list(value)
    try:
        nums = tuple(float(p) for p in parts)
    except (TypeError, ValueError):
        raise CliError(f"{flag} must be a number or X,Y,Z, got {value!r}") from None
    if len(nums) == 1:
        return nums[0]
    if len(nums) != 3:
        raise CliError(f"{flag} must be a number or three numbers, got {value!r}")
    return nums


def _parse_split(value) -> tuple:
    parts = value.split(",") if isinstance(value, str) else list(value)
    try:
        fracs = tuple(float(p) for p in parts)
    except (TypeError, ValueError):
        raise CliError(f"--split must be 2 or 3 fractions, got {value!r}") from None
    if len(fracs) not in (2, 3):
        raise CliError(f"--split must be 2 or 3 fractions, got {value!r}")
    return fracs


def _require(cfg: dict, key: str, flag: str):
    if not cfg.get(key):
        raise CliError(f"{flag} is required (flag or config file)")
    return cfg[key]


def _load_dataset(path: str) -> SequenceDataset:
    try:
        return SequenceDataset.load(path)
    except (OSError, DatasetError, store.ContainerError) as exc:
        raise CliError(f"cannot load dataset {path}: {exc}") from exc


def _load_model(path: str):
    try:
        model, loss_cfg, _, extra = sg.load_checkpoint(path)
    except (OSError, sg.CheckpointError, store.ContainerError) as exc:
        raise CliError(f"cannot load checkpoint {path}: {exc}") from exc
    return model, loss_cfg, extra


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------


def _cmd_gendata(cfg: dict) -> int:
    t0 = time.perf_counter()
    out = _require(cfg, "out", "--out")
    dims = _parse_dims(cfg["mesh"], "--mesh")
    spacing = _parse_spacing(cfg["spacing"], "--spacing")
    frames = int(cfg["frames"])
    interval = float(cfg["sample_interval"])
    if frames < 2:
        raise CliError(f"--frames must be >= 2, got {frames}")
    try:
        mesh = meshkit.build_box_mesh(dims, spacing, fixed=cfg["fixed"])
    except meshkit.MeshError as exc:
        raise CliError(str(exc)) from exc
    if cfg["material_file"]:
        try:
            with open(cfg["material_file"], "r", encoding="utf-8") as fh:
                material = Material.from_dict(json.load(fh))
        except (OSError, KeyError, ValueError) as exc:
            raise CliError(
                f"cannot load material file {cfg['material_file']}: {exc}"
            ) from exc
    else:
        try:
            material = Material.default_tissue(tau_scale=float(cfg["tau_scale"]))
        except MaterialError as exc:
            raise CliError(str(exc)) from exc
    try:
        scenario_cfg = ScenarioConfig(
            duration=(frames - 1) * interval, sample_interval=interval
        )
    except DatasetError as exc:
        raise CliError(str(exc)) from exc

    workers = int(cfg["workers"])
    cap = os.environ.get("VSDT_THREADS")
    if cap:
        workers = max(1, min(workers, int(cap)))
    dataset = generate_dataset(
        mesh,
        material,
        int(cfg["sequences"]),
        int(cfg["seed"]),
        config=scenario_cfg,
        workers=workers,
    )
    dataset.save(out)
    print(f"wrote {len(dataset)} sequences x {dataset.n_frames} frames to {out}")
    RunManifest(
        command="gendata",
        config=cfg,
        seed=int(cfg["seed"]),
        inputs=[p for p in [cfg["material_file"]] if p],
        outputs=[out],
        wall_clock_s=time.perf_counter() - t0,
    ).write(_manifest_path(out))
    return EXIT_OK


def _cmd_train(cfg: dict) -> int:
    t0 = time.perf_counter()
    data_path = _require(cfg, "data", "--data")
    out = _require(cfg, "out", "--out")
    if cfg["model"] not in MODEL_NAMES:
        raise CliError(
            f"unknown --model {cfg['model']!r}; pick from {sorted(MODEL_NAMES)}"
        )
    kind = MODEL_NAMES[cfg["model"]]
    dataset = _load_dataset(data_path)
    seed = int(cfg["seed"])

    try:
        spec = sg.ModelSpec(
            kind=kind,
            dims=dataset.mesh.dims,
            n_t=int(cfg["nt"]) if kind == "cnn_lstm" else 1,
            n_n=int(cfg["nn"]),
        )
        loss_cfg = sg.LossConfig(
            v_origin=dataset.mesh.rest_volume,
            lam=float(cfg["lam"]),
            volume_gate_fraction=float(cfg["gate"]),
            volume_gate_absolute=(
                None if cfg["gate_absolute"] is None else float(cfg["gate_absolute"])
            ),
            cosine_weight=float(cfg["cosine_weight"]),
        )
        train_cfg = trainer.TrainConfig(
            learning_rate=float(cfg["lr"]),
            batch_size=int(cfg["batch_size"]),
            max_epochs=int(cfg["epochs"]),
            patience=int(cfg["patience"]),
            seed=seed,
            split=_parse_split(cfg["split"]),
        )
    except (ModelSpecError, LossConfigError, trainer.TrainerError) as exc:
        raise CliError(str(exc)) from exc

    try:
        train_set, val_set, _ = trainer.split_dataset(
            dataset, train_cfg.split, seed=seed
        )
    except trainer.TrainerError as exc:
        raise CliError(str(exc)) from exc

    model = sg.build_model(spec, seed=seed)
    print(
        f"training {cfg['model']} on {len(train_set)} sequences "
        f"(val {len(val_set)}), {model.parameter_count} parameters"
    )
    result = trainer.train(model, train_set, val_set, train_cfg, loss_cfg, log=print)
    result.save(out)
    RunManifest(
        command="train",
        config=cfg,
        seed=seed,
        inputs=[data_path],
        outputs=[out],
        wall_clock_s=time.perf_counter() - t0,
    ).write(_manifest_path(out))
    if result.aborted:
        print(
            f"training aborted ({result.aborted}); "
            f"checkpoint holds the last good state (epoch {result.epoch})",
            file=sys.stderr,
        )
        return EXIT_TRAINING
    print(
        f"best val loss {result.best_val:.9e} at epoch {result.epoch}; "
        f"checkpoint written to {out}"
    )
    return EXIT_OK


def _unique_names(paths) -> list[str]:
    names, seen = [], {}
    for p in paths:
        stem = os.path.splitext(os.path.basename(p))[0] or "model"
        n = seen.get(stem, 0)
        seen[stem] = n + 1
        names.append(stem if n == 0 else f"{stem}-{n + 1}")
    return names


def _cmd_eval(cfg: dict) -> int:
    t0 = time.perf_counter()
    data_path = _require(cfg, "data", "--data")
    paths = _require(cfg, "checkpoints", "--checkpoints")
    out_dir = _require(cfg, "out", "--out")
    dataset = _load_dataset(data_path)
    mesh = dataset.mesh
    os.makedirs(out_dir, exist_ok=True)

    names = _unique_names(paths)
    models = {}
    for name, path in zip(names, paths):
        model, _, _ = _load_model(path)
        if model.spec.dims != mesh.dims:
            raise CliError(
                f"checkpoint {path} was trained on dims {model.spec.dims} but the "
                f"dataset mesh is {mesh.dims}; evaluate on matching data"
            )
        models[name] = model

    ref_frames = np.concatenate([s.displacements for s in dataset.sequences])
    outputs = []
    metrics: dict = {"dataset": data_path, "models": {}}
    single = len(models) == 1

    for name, model in models.items():
        preds = np.concatenate(
            [sg.predict_sequence(model, s.forces) for s in dataset.sequences]
        )
        ba = evalkit.bland_altman(
            evalkit.time_mean(preds),
            evalkit.time_mean(ref_frames),
            z=float(cfg["z"]),
            mesh=mesh,
        )
        depth = evalkit.depth_profile_error(preds, ref_frames, mesh)
        ba_csv = os.path.join(
            out_dir, "bland_altman.csv" if single else f"bland_altman_{name}.csv"
        )
        depth_csv = os.path.join(
            out_dir, "depth_profile.csv" if single else f"depth_profile_{name}.csv"
        )
        ba.write_csv(ba_csv)
        depth.write_csv(depth_csv)
        outputs += [ba_csv, depth_csv]
        metrics["models"][name] = {
            "mae_mm": evalkit.mean_absolute_error(preds, ref_frames),
            "bland_altman": ba.to_dict(),
            "depth_profile": depth.to_dict(),
        }

    trace = evalkit.volume_violation_trace(models, dataset.sequences, mesh)
    trace_csv = os.path.join(out_dir, "volume_trace.csv")
    trace.write_csv(trace_csv)
    outputs.append(trace_csv)
    metrics["volume_trace"] = trace.to_dict()

    metrics_path = os.path.join(out_dir, "metrics.json")
    store.write_metrics(metrics_path, metrics)
    outputs.append(metrics_path)
    print(f"wrote {len(outputs)} report files to {out_dir}")
    RunManifest(
        command="eval",
        config=cfg,
        seed=None,
        inputs=[data_path, *paths],
        outputs=outputs,
        wall_clock_s=time.perf_counter() - t0,
    ).write(os.path.join(out_dir, "manifest.json"))
    return EXIT_OK


def _cmd_bench(cfg: dict) -> int:
    t0 = time.perf_counter()
    path = _require(cfg, "checkpoint", "--checkpoint")
    model, _, _ = _load_model(path)
    mesh = meshkit.build_box_mesh(model.spec.dims, 1.0, fixed="sides+bottom")
    try:
        report = evalkit.latency_bench(
            model,
            mesh,
            iterations=int(cfg["iterations"]),
            warmup=int(cfg["warmup"]),
            seed=int(cfg["seed"]),
        )
    except EvalError as exc:
        raise CliError(str(exc)) from exc
    out_dir = cfg["out"] or os.path.dirname(os.path.abspath(path))
    os.makedirs(out_dir, exist_ok=True)
    json_path = os.path.join(out_dir, "latency.json")
    csv_path = os.path.join(out_dir, "latency.csv")
    evalkit.write_report(report, json_path, csv_path)
    print(
        f"{report.model_kind} at {report.dims}: mean {report.mean * 1e3:.2f} ms, "
        f"median {report.median * 1e3:.2f} ms, p95 {report.p95 * 1e3:.2f} ms "
        f"({report.rate_hz:.1f} Hz) on {report.hardware}"
    )
    RunManifest(
        command="bench",
        config=cfg,
        seed=int(cfg["seed"]),
        inputs=[path],
        outputs=[json_path, csv_path],
        wall_clock_s=time.perf_counter() - t0,
    ).write(os.path.join(out_dir, "manifest.json"))
    return EXIT_OK


def build_serve_app(cfg: dict):
    """Assemble the service app from serve flags (separated for tests)."""
    from . import simserve

    profiles: dict = {}
    if cfg["checkpoint"]:
        model, _, _ = _load_model(cfg["checkpoint"])
        profiles["surrogate"] = {
            "engine": "surrogate",
            "checkpoint": cfg["checkpoint"],
            "mesh": {
                "dims": list(model.spec.dims),
                "spacing": _parse_spacing(cfg["spacing"], "--spacing"),
                "fixed": cfg["fixed"],
            },
        }
    if cfg["fem"]:
        if cfg["mesh"] is not None:
            dims = _parse_dims(cfg["mesh"], "--mesh")
        elif cfg["checkpoint"]:
            dims = profiles["surrogate"]["mesh"]["dims"]
        else:
            raise CliError("--fem without --checkpoint needs --mesh X,Y,Z")
        profiles["fem"] = {
            "engine": "fem",
            "mesh": {
                "dims": list(dims),
                "spacing": _parse_spacing(cfg["spacing"], "--spacing"),
                "fixed": cfg["fixed"],
            },
            "tau_scale": float(cfg["tau_scale"]),
            "sample_interval": float(cfg["sample_interval"]),
            "damping": float(cfg["damping"]),
        }
    if not profiles:
        raise CliError("serve needs --checkpoint and/or --fem")
    default = "surrogate" if "surrogate" in profiles else "fem"
    return simserve.create_app(profiles, default_profile=default)


def _cmd_serve(cfg: dict) -> int:
    app = build_serve_app(cfg)
    import uvicorn

    print(f"serving on http://{cfg['host']}:{cfg['port']} (ctrl-c to stop)")
    uvicorn.run(app, host=cfg["host"], port=int(cfg["port"]), log_level="warning")
    return EXIT_OK


_HANDLERS = {
    "gendata": _cmd_gendata,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
    "serve": _cmd_serve,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _resolve(args.command, args)
        return _HANDLERS[args.command](cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (DatasetError, SolverError, ElementInversionError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except trainer.TrainerError as exc:
        print(f"training failure: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
