"""Metric suite for judging surrogate models against the reference solver.

Four analyses plus two model-compression experiments:

* Bland-Altman agreement between time-averaged displacement magnitudes,
* mean absolute error binned by normalized tissue depth,
* volume-conservation traces (ΔV over time, per sequence, per model),
* single-threaded inference latency statistics,
* half-precision / int8 weight quantization and magnitude pruning.

Every operation here is pure: the same inputs produce the same report,
and models and datasets are never mutated (compression helpers return
new model instances).  Reports serialize to JSON (`to_dict`, written via
:func:`vsdt.store.write_metrics`) and to flat CSV point files
(`write_csv`) whose column orders are fixed and documented per class.
"""

from __future__ import annotations

import csv
import math
import os
import platform
import time
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import store
from .meshkit import Field3, GridMesh, deformed_volumes, depth_layers
from .surrogate import ModelInstance, forward_window, predict_sequence


class EvalError(ValueError):
    """Invalid input to a metric or compression operation."""


# ----------------------------------------------------------------------
# small shared helpers
# ----------------------------------------------------------------------


def time_mean(frames: np.ndarray) -> np.ndarray:
    """Average displacement frames (T, nx, ny, nz, 3) over time."""
    arr = np.asarray(frames, dtype=np.float64)
    if arr.ndim != 5:
        raise EvalError(f"expected (T, nx, ny, nz, 3) frames, got shape {arr.shape}")
    return arr.mean(axis=0)


def mean_absolute_error(pred_frames, ref_frames) -> float:
    """Mean over frames and nodes of the Euclidean error magnitude, mm.

    The error for one node in one frame is ``|u_pred - u_ref|`` (vector
    norm over the three components); the report averages that scalar
    over everything.
    """
    p = np.asarray(pred_frames, dtype=np.float64)
    r = np.asarray(ref_frames, dtype=np.float64)
    if p.shape != r.shape:
        raise EvalError(f"frame shapes differ: {p.shape} vs {r.shape}")
    return float(np.linalg.norm(p - r, axis=-1).mean())


def improvement_ratio(baseline: float, other: float) -> float:
    """Relative improvement (baseline - other) / baseline.

    Positive when ``other`` is the smaller (better) error.
    """
    if baseline == 0.0:
        raise EvalError("improvement ratio undefined for a zero baseline")
    return (baseline - other) / baseline


def _magnitudes(field_like, mesh: GridMesh | None) -> np.ndarray:
    """Per-active-node magnitudes of a Field3 or raw (nx,ny,nz,3) array."""
    if isinstance(field_like, Field3):
        mesh = field_like.mesh
        values = field_like.values
    else:
        values = np.asarray(field_like, dtype=np.float64)
        if values.ndim != 4 or values.shape[-1] != 3:
            raise EvalError(f"expected an (nx, ny, nz, 3) field, got {values.shape}")
    mags = np.linalg.norm(values, axis=-1)
    if mesh is not None:
        return mags[mesh.occupancy]
    return mags.ravel()


# ----------------------------------------------------------------------
# Bland-Altman agreement
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class BlandAltmanReport:
    """Agreement between two per-node magnitude fields.

    ``points_mean``/``points_diff`` hold one entry per node: the pair
    average and the (first minus second) difference, both in mm.  The
    limits of agreement are ``mean_difference ± z * sd_difference``.

    CSV columns: ``mean_mm, difference_mm`` (one row per node).
    """

    points_mean: np.ndarray
    points_diff: np.ndarray
    mean_difference: float
    sd_difference: float
    z: float

    @property
    def lower_limit(self) -> float:
        return self.mean_difference - self.z * self.sd_difference

    @property
    def upper_limit(self) -> float:
        return self.mean_difference + self.z * self.sd_difference

    def to_dict(self) -> dict:
        return {
            "kind": "bland_altman",
            "n_nodes": int(len(self.points_mean)),
            "mean_difference_mm": self.mean_difference,
            "sd_difference_mm": self.sd_difference,
            "z": self.z,
            "lower_limit_mm": self.lower_limit,
            "upper_limit_mm": self.upper_limit,
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["mean_mm", "difference_mm"])
            for m, d in zip(self.points_mean, self.points_diff):
                w.writerow([f"{m:.9g}", f"{d:.9g}"])


def bland_altman(
    pred_time_mean,
    ref_time_mean,
    z: float = 1.96,
    mesh: GridMesh | None = None,
) -> BlandAltmanReport:
    """Classic difference-versus-mean agreement analysis.

    Inputs are per-node time-averaged displacement fields (``Field3`` or
    raw arrays; see :func:`time_mean`); the analysis variable is the
    per-node Euclidean magnitude.  ``z`` scales the limits of agreement
    (1.96 for the conventional 95% band; 2.054 for 96%).  When a mesh is
    known — passed explicitly or carried by a ``Field3`` — only active
    nodes contribute points.
    """
    if z <= 0.0:
        raise EvalError(f"z must be positive, got {z}")
    a = _magnitudes(pred_time_mean, mesh)
    b = _magnitudes(ref_time_mean, mesh)
    if a.shape != b.shape:
        raise EvalError(f"field sizes differ: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise EvalError("no nodes to compare")
    diff = a - b
    mean = 0.5 * (a + b)
    return BlandAltmanReport(
        points_mean=mean,
        points_diff=diff,
        mean_difference=float(diff.mean()),
        sd_difference=float(diff.std()),
        z=float(z),
    )


# ----------------------------------------------------------------------
# depth-resolved error profile
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class DepthProfileReport:
    """Mean absolute displacement error binned by normalized depth.

    One bin per horizontal mesh layer, top surface at depth 0, bottom
    at 1; together the bins cover every active node exactly once.

    CSV columns: ``normalized_depth, mean_abs_error_mm, node_count``.
    """

    depths: np.ndarray  # (n_bins,) normalized depth in [0, 1], top first
    errors: np.ndarray  # (n_bins,) mean |u_pred - u_ref| in mm
    counts: np.ndarray  # (n_bins,) active nodes per bin

    def to_dict(self) -> dict:
        return {
            "kind": "depth_profile",
            "normalized_depth": [float(d) for d in self.depths],
            "mean_abs_error_mm": [float(e) for e in self.errors],
            "node_count": [int(c) for c in self.counts],
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["normalized_depth", "mean_abs_error_mm", "node_count"])
            for d, e, c in zip(self.depths, self.errors, self.counts):
                w.writerow([f"{d:.9g}", f"{e:.9g}", int(c)])


def _as_frame_array(frames) -> np.ndarray:
    arr = np.asarray(frames, dtype=np.float64)
    if arr.ndim == 4:
        arr = arr[None]
    if arr.ndim != 5 or arr.shape[-1] != 3:
        raise EvalError(f"expected (T, nx, ny, nz, 3) frames, got shape {arr.shape}")
    return arr


def depth_profile_error(pred_frames, ref_frames, mesh: GridMesh) -> DepthProfileReport:
    """Average error magnitude over time and over nodes of equal depth.

    ``pred_frames``/``ref_frames`` are aligned ``(T, nx, ny, nz, 3)``
    stacks (a single field is promoted to one frame).
    """
    p = _as_frame_array(pred_frames)
    r = _as_frame_array(ref_frames)
    if p.shape != r.shape:
        raise EvalError(f"frame shapes differ: {p.shape} vs {r.shape}")
    if p.shape[1:4] != mesh.dims:
        raise EvalError(f"frames with dims {p.shape[1:4]} do not match mesh {mesh.dims}")
    err = np.linalg.norm(p - r, axis=-1).reshape(len(p), -1)  # (T, n_slots)
    layers = depth_layers(mesh)
    depths = np.array([lay.normalized_depth for lay in layers])
    errors = np.array([err[:, lay.node_indices].mean() for lay in layers])
    counts = np.array([len(lay.node_indices) for lay in layers])
    return DepthProfileReport(depths=depths, errors=errors, counts=counts)


# ----------------------------------------------------------------------
# volume-conservation traces
# ----------------------------------------------------------------------


@dataclass
class VolumeTrace:
    """Per-sequence volume drift for the reference frames and each model.

    ``reference_dv`` and every ``model_dv`` entry hold one ``(T,)``
    array per sequence: deformed volume minus rest volume, mm^3, from
    the same mesh and the same tet decomposition.  ``force_totals``
    holds the per-frame total applied load (sum of nodal force
    magnitudes, N).  ``flagged`` lists sequence indices ordered by how
    far their load level sits from ``force_reference`` — the sequences
    that probe generalization hardest come first.

    CSV columns: ``sequence, frame, time_s, force_n, dv_ref_mm3``
    followed by one ``dv_<model>_mm3`` column per model.
    """

    rest_volume: float
    force_reference: float
    times: list = field(default_factory=list)
    force_totals: list = field(default_factory=list)
    reference_dv: list = field(default_factory=list)
    model_dv: dict = field(default_factory=dict)
    flagged: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.reference_dv)

    def max_abs(self, model: str | None = None) -> np.ndarray:
        """Per-sequence max |ΔV|; ``None`` selects the reference trace."""
        series = self.reference_dv if model is None else self.model_dv[model]
        return np.array([float(np.max(np.abs(s))) for s in series])

    def force_levels(self) -> dict:
        """Per-sequence load aggregates (the paper leaves the choice
        of max versus mean open, so both are reported)."""
        return {
            "max_n": [float(np.max(f)) for f in self.force_totals],
            "mean_n": [float(np.mean(f)) for f in self.force_totals],
        }

    def improvement_range(self, baseline: str, improved: str) -> tuple[float, float]:
        """(min, max) per-sequence improvement of ``improved`` over
        ``baseline`` in max |ΔV|, as fractions."""
        base = self.max_abs(baseline)
        imp = self.max_abs(improved)
        ratios = [improvement_ratio(b, i) for b, i in zip(base, imp) if b > 0.0]
        if not ratios:
            raise EvalError("no sequence with nonzero baseline violation")
        return (min(ratios), max(ratios))

    def to_dict(self) -> dict:
        return {
            "kind": "volume_trace",
            "n_sequences": len(self),
            "rest_volume_mm3": self.rest_volume,
            "force_reference_n": self.force_reference,
            "force_levels": self.force_levels(),
            "flagged_sequences": [int(i) for i in self.flagged],
            "max_abs_dv_mm3": {
                "reference": [float(v) for v in self.max_abs()],
                **{
                    name: [float(v) for v in self.max_abs(name)]
                    for name in self.model_dv
                },
            },
        }

    def write_csv(self, path) -> None:
        names = list(self.model_dv)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(
                ["sequence", "frame", "time_s", "force_n", "dv_ref_mm3"]
                + [f"dv_{n}_mm3" for n in names]
            )
            for s in range(len(self)):
                for t in range(len(self.reference_dv[s])):
                    row = [
                        s,
                        t,
                        f"{self.times[s][t]:.9g}",
                        f"{self.force_totals[s][t]:.9g}",
                        f"{self.reference_dv[s][t]:.9g}",
                    ]
                    row += [f"{self.model_dv[n][s][t]:.9g}" for n in names]
                    w.writerow(row)


def _sequence_arrays(seq) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Forces, displacements and optional times from a sequence-like input."""
    if hasattr(seq, "forces") and hasattr(seq, "displacements"):
        return (
            np.asarray(seq.forces, dtype=np.float32),
            np.asarray(seq.displacements, dtype=np.float32),
            np.asarray(getattr(seq, "times"), dtype=np.float64)
            if hasattr(seq, "times")
            else None,
        )
    forces, disps = seq
    return np.asarray(forces, dtype=np.float32), np.asarray(disps, dtype=np.float32), None


def volume_violation_trace(
    models: Mapping[str, ModelInstance],
    sequences: Iterable,
    mesh: GridMesh,
    force_reference: float | None = None,
    scheme: str = "main",
) -> VolumeTrace:
    """ΔV(t) traces for the reference frames and each model's predictions.

    ``sequences`` yields items with ``forces``/``displacements`` (and
    optionally ``times``) attributes, or plain ``(forces,
    displacements)`` pairs.  ``force_reference`` is the typical training
    load level used to rank sequences for the flag list; it defaults to
    the mean load over the given sequences (self-referential flagging).
    """
    seq_list = list(sequences)
    if not seq_list:
        raise EvalError("need at least one sequence")
    rest = mesh.rest_volume
    trace = VolumeTrace(rest_volume=rest, force_reference=0.0)
    trace.model_dv = {name: [] for name in models}
    for seq in seq_list:
        forces, disps, times = _sequence_arrays(seq)
        if times is None:
            times = np.arange(len(forces), dtype=np.float64)
        load = np.linalg.norm(
            forces.reshape(len(forces), -1, 3).astype(np.float64), axis=-1
        ).sum(axis=-1)
        trace.times.append(times)
        trace.force_totals.append(load)
        trace.reference_dv.append(deformed_volumes(mesh, disps, scheme=scheme) - rest)
        for name, model in models.items():
            preds = predict_sequence(model, forces)
            trace.model_dv[name].append(
                deformed_volumes(mesh, preds, scheme=scheme) - rest
            )
    seq_means = np.array([float(np.mean(f)) for f in trace.force_totals])
    ref = float(seq_means.mean()) if force_reference is None else float(force_reference)
    trace.force_reference = ref
    deviation = np.abs(seq_means - ref)
    trace.flagged = [int(i) for i in np.argsort(-deviation, kind="stable")]
    return trace


# ----------------------------------------------------------------------
# weight compression
# ----------------------------------------------------------------------

QUANT_MODES = ("f16", "i8")


def _affine_i8_roundtrip(x: np.ndarray) -> np.ndarray:
    """Per-tensor affine int8 quantize + dequantize.

    Uses the usual (scale, zero_point) encoding over the tensor's
    min/max range, 256 levels; exact zeros survive the round trip (the
    zero point is a representable level), and a constant tensor
    reconstructs exactly (one level suffices).
    """
    mn = float(x.min())
    mx = float(x.max())
    if mx == mn:
        return np.full_like(x, mn)
    scale = (mx - mn) / 255.0
    zero_point = round(-mn / scale) - 128
    q = np.clip(np.round(x / scale + zero_point), -128, 127)
    return ((q - zero_point) * scale).astype(x.dtype)


def quantize_weights(model: ModelInstance, mode: str) -> ModelInstance:
    """Round-trip every parameter tensor through a reduced format.

    ``"f16"`` converts through IEEE half precision; ``"i8"`` applies
    per-tensor affine int8 (alias ``"i8-affine-per-tensor"``).  Returns
    a new instance; the input model is untouched.
    """
    if mode == "i8-affine-per-tensor":
        mode = "i8"
    if mode not in QUANT_MODES:
        raise EvalError(f"unknown quantization mode {mode!r}; pick from {QUANT_MODES}")
    arrays = {}
    for name, p in model.params.items():
        x = p.data
        if mode == "f16":
            arrays[name] = x.astype(np.float16).astype(x.dtype)
        else:
            arrays[name] = _affine_i8_roundtrip(x)
    clone = model.copy()
    clone.load_param_arrays(arrays)
    return clone


def prune_weights(model: ModelInstance, fraction: float) -> ModelInstance:
    """Zero the smallest-magnitude ``fraction`` of each conv layer's weights.

    Per-layer magnitude ranking, ties broken by flat index so the result
    is deterministic.  Biases and non-convolutional parameters are left
    alone; a model without conv layers comes back as a plain copy.
    """
    if not 0.0 <= fraction < 1.0:
        raise EvalError(f"prune fraction must lie in [0, 1), got {fraction}")
    arrays = {name: p.data.copy() for name, p in model.params.items()}
    for name in model.conv_weight_names():
        w = arrays[name]
        k = int(round(fraction * w.size))
        if k > 0:
            flat = w.ravel()
            idx = np.argsort(np.abs(flat), kind="stable")[:k]
            flat[idx] = 0.0
    clone = model.copy()
    clone.load_param_arrays(arrays)
    return clone


# ----------------------------------------------------------------------
# latency benchmarking
# ----------------------------------------------------------------------


def _hardware_descriptor() -> str:
    name = ""
    try:
        with open("/proc/cpuinfo", "r", encoding="utf-8") as fh:
            for line in fh:
                if line.lower().startswith("model name"):
                    name = line.split(":", 1)[1].strip()
                    break
    except OSError:
        pass
    if not name:
        name = platform.processor() or platform.machine()
    return f"{name} ({platform.system().lower()}, single thread)"


@dataclass(frozen=True)
class LatencyReport:
    """Wall-clock statistics for single-window inference.

    ``samples`` holds every timed iteration in seconds, taken after the
    warm-up calls.  ``rate_hz`` is 1 / mean.

    CSV columns: ``iteration, seconds``.
    """

    model_kind: str
    dims: tuple
    iterations: int
    warmup: int
    samples: np.ndarray
    hardware: str

    @property
    def mean(self) -> float:
        return float(self.samples.mean())

    @property
    def median(self) -> float:
        return float(np.median(self.samples))

    @property
    def p95(self) -> float:
        return float(np.percentile(self.samples, 95.0))

    @property
    def rate_hz(self) -> float:
        return 1.0 / self.mean

    def to_dict(self) -> dict:
        return {
            "kind": "latency",
            "model_kind": self.model_kind,
            "dims": list(self.dims),
            "iterations": self.iterations,
            "warmup": self.warmup,
            "mean_s": self.mean,
            "median_s": self.median,
            "p95_s": self.p95,
            "rate_hz": self.rate_hz,
            "hardware": self.hardware,
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "seconds"])
            for i, s in enumerate(self.samples):
                w.writerow([i, f"{s:.9g}"])


def latency_bench(
    model: ModelInstance,
    mesh: GridMesh,
    iterations: int = 200,
    warmup: int = 20,
    seed: int = 0,
) -> LatencyReport:
    """Time single-window inference on random force frames.

    At least 100 timed iterations after at least 10 warm-up runs, so the
    statistics are not dominated by first-call setup.  Inputs are drawn
    at a realistic amplitude (scaled by the model's force normalization)
    to keep subnormal-float slowdowns out of the measurement.
    """
    if iterations < 100:
        raise EvalError(f"need >= 100 timed iterations, got {iterations}")
    if warmup < 10:
        raise EvalError(f"need >= 10 warm-up iterations, got {warmup}")
    if model.spec.dims != mesh.dims:
        raise EvalError(f"model dims {model.spec.dims} do not match mesh {mesh.dims}")
    rng = np.random.default_rng(seed)
    shape = (model.spec.n_t,) + mesh.dims + (3,)
    amp = float(np.max(np.abs(model.norm.force_std))) or 1.0
    pool = [
        (amp * rng.standard_normal(shape)).astype(np.float32) for _ in range(8)
    ]
    for i in range(warmup):
        forward_window(model, pool[i % len(pool)])
    samples = np.empty(iterations, dtype=np.float64)
    for i in range(iterations):
        frames = pool[i % len(pool)]
        t0 = time.perf_counter()
        forward_window(model, frames)
        samples[i] = time.perf_counter() - t0
    return LatencyReport(
        model_kind=model.spec.kind,
        dims=model.spec.dims,
        iterations=iterations,
        warmup=warmup,
        samples=samples,
        hardware=_hardware_descriptor(),
    )


# ----------------------------------------------------------------------
# report output
# ----------------------------------------------------------------------


def write_report(report, json_path, csv_path=None) -> None:
    """Write a report's summary JSON and, optionally, its point CSV."""
    store.write_metrics(json_path, report.to_dict())
    if csv_path is not None:
        report.write_csv(csv_path)


__all__ = [
    "BlandAltmanReport",
    "DepthProfileReport",
    "EvalError",
    "LatencyReport",
    "QUANT_MODES",
    "VolumeTrace",
    "bland_altman",
    "depth_profile_error",
    "improvement_ratio",
    "latency_bench",
    "mean_absolute_error",
    "prune_weights",
    "quantize_weights",
    "time_mean",
    "volume_violation_trace",
    "write_report",
]
