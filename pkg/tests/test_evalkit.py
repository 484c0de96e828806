"""Metric, compression and benchmarking tests."""

import csv
import json

import numpy as np
import pytest

from vsdt import evalkit
from vsdt.evalkit import (
    EvalError,
    bland_altman,
    depth_profile_error,
    improvement_ratio,
    latency_bench,
    mean_absolute_error,
    prune_weights,
    quantize_weights,
    time_mean,
    volume_violation_trace,
    write_report,
)
from vsdt.meshkit import Field3, build_box_mesh, deformed_volumes
from vsdt.surrogate import ModelSpec, build_model


# ----------------------------------------------------------------------
# scalar metrics
# ----------------------------------------------------------------------


def test_time_mean(small_mesh):
    frames = np.stack(
        [np.zeros(small_mesh.dims + (3,)), 2.0 * np.ones(small_mesh.dims + (3,))]
    )
    np.testing.assert_allclose(time_mean(frames), 1.0)
    with pytest.raises(EvalError):
        time_mean(frames[0])


def test_mean_absolute_error_is_vector_norm_mean():
    pred = np.zeros((2, 1, 1, 2, 3))
    ref = np.zeros_like(pred)
    pred[0, 0, 0, 0] = (3.0, 4.0, 0.0)  # |e| = 5
    pred[1, 0, 0, 1] = (0.0, 0.0, 2.0)  # |e| = 2
    assert mean_absolute_error(pred, ref) == pytest.approx((5.0 + 2.0) / 4.0)
    with pytest.raises(EvalError):
        mean_absolute_error(pred, ref[:1])


def test_improvement_ratio():
    assert improvement_ratio(0.2, 0.1) == pytest.approx(0.5)
    assert improvement_ratio(0.1, 0.2) == pytest.approx(-1.0)
    with pytest.raises(EvalError):
        improvement_ratio(0.0, 0.1)


# ----------------------------------------------------------------------
# Bland-Altman
# ----------------------------------------------------------------------


def test_bland_altman_statistics():
    rng = np.random.default_rng(0)
    shape = (3, 3, 2, 3)
    a = rng.normal(size=shape)
    b = a + rng.normal(scale=0.1, size=shape)
    rep = bland_altman(a, b)

    ma = np.linalg.norm(a, axis=-1).ravel()
    mb = np.linalg.norm(b, axis=-1).ravel()
    np.testing.assert_allclose(rep.points_diff, ma - mb)
    np.testing.assert_allclose(rep.points_mean, 0.5 * (ma + mb))
    assert rep.mean_difference == pytest.approx(float((ma - mb).mean()))
    assert rep.sd_difference == pytest.approx(float((ma - mb).std()))
    assert rep.lower_limit == pytest.approx(rep.mean_difference - 1.96 * rep.sd_difference)
    assert rep.upper_limit == pytest.approx(rep.mean_difference + 1.96 * rep.sd_difference)
    assert rep.to_dict()["n_nodes"] == ma.size

    wider = bland_altman(a, b, z=2.054)
    assert wider.upper_limit > rep.upper_limit


def test_bland_altman_validation():
    a = np.zeros((2, 2, 2, 3))
    with pytest.raises(EvalError):
        bland_altman(a, a, z=0.0)
    with pytest.raises(EvalError):
        bland_altman(a, np.zeros((3, 2, 2, 3)))
    with pytest.raises(EvalError):
        bland_altman(np.zeros((2, 2, 3)), np.zeros((2, 2, 3)))


def test_bland_altman_uses_field_mesh(small_mesh):
    rng = np.random.default_rng(1)
    values = rng.normal(size=small_mesh.dims + (3,))
    rep = bland_altman(Field3(small_mesh, values), Field3.zeros(small_mesh))
    assert len(rep.points_mean) == int(small_mesh.occupancy.sum())


# ----------------------------------------------------------------------
# depth profile
# ----------------------------------------------------------------------


def test_depth_profile_separates_layers(small_mesh):
    nz = small_mesh.dims[2]
    pred = np.zeros((2,) + small_mesh.dims + (3,))
    ref = np.zeros_like(pred)
    pred[:, :, :, nz - 1, 0] = 3.0  # top layer, error 3 in both frames
    pred[0, :, :, 0, 1] = 4.0  # bottom layer, error 4 in one frame

    rep = depth_profile_error(pred, ref, small_mesh)
    np.testing.assert_allclose(rep.depths, [0.0, 0.5, 1.0])
    np.testing.assert_allclose(rep.errors, [3.0, 0.0, 2.0])
    assert list(rep.counts) == [16, 16, 16]
    d = rep.to_dict()
    assert d["kind"] == "depth_profile"
    assert d["node_count"] == [16, 16, 16]


def test_depth_profile_validation(small_mesh):
    good = np.zeros((1,) + small_mesh.dims + (3,))
    with pytest.raises(EvalError):
        depth_profile_error(good, good[:, :2], small_mesh)
    with pytest.raises(EvalError):
        depth_profile_error(
            np.zeros((1, 5, 5, 5, 3)), np.zeros((1, 5, 5, 5, 3)), small_mesh
        )


# ----------------------------------------------------------------------
# volume traces
# ----------------------------------------------------------------------


def test_volume_trace_contents(synth_dataset, small_mesh):
    spec = ModelSpec(kind="linear", dims=small_mesh.dims)
    models = {"a": build_model(spec, seed=1), "b": build_model(spec, seed=2)}
    seqs = synth_dataset.sequences[:3]
    trace = volume_violation_trace(models, seqs, small_mesh)

    assert len(trace) == 3
    assert set(trace.model_dv) == {"a", "b"}
    rest = small_mesh.rest_volume
    for i, seq in enumerate(seqs):
        want = deformed_volumes(small_mesh, seq.displacements.astype(np.float64)) - rest
        np.testing.assert_allclose(trace.reference_dv[i], want, rtol=1e-10)
        load = np.linalg.norm(
            seq.forces.reshape(len(seq.forces), -1, 3).astype(np.float64), axis=-1
        ).sum(axis=-1)
        np.testing.assert_allclose(trace.force_totals[i], load, rtol=1e-7)

    # flagged order: farthest from the reference load first
    means = np.array([float(np.mean(f)) for f in trace.force_totals])
    want_order = list(np.argsort(-np.abs(means - means.mean()), kind="stable"))
    assert trace.flagged == want_order

    base = trace.max_abs("a")
    imp = trace.max_abs("b")
    lo, hi = trace.improvement_range("a", "b")
    ratios = (base - imp) / base
    assert lo == pytest.approx(ratios.min())
    assert hi == pytest.approx(ratios.max())

    d = trace.to_dict()
    assert d["n_sequences"] == 3
    assert set(d["max_abs_dv_mm3"]) == {"reference", "a", "b"}


def test_volume_trace_rejects_empty(small_mesh):
    with pytest.raises(EvalError):
        volume_violation_trace({}, [], small_mesh)


def test_volume_trace_accepts_plain_pairs(synth_dataset, small_mesh):
    seq = synth_dataset.sequences[0]
    trace = volume_violation_trace({}, [(seq.forces, seq.displacements)], small_mesh)
    assert len(trace) == 1
    np.testing.assert_array_equal(trace.times[0], np.arange(seq.n_frames))


# ----------------------------------------------------------------------
# compression
# ----------------------------------------------------------------------


def _conv_model(sm):
    return build_model(
        ModelSpec(kind="cnn_lstm", dims=sm.dims, n_t=2, n_n=8, encoder_filters=4),
        seed=3,
    )


def test_f16_quantization_roundtrip(small_mesh):
    model = _conv_model(small_mesh)
    before = {k: v.copy() for k, v in model.param_arrays().items()}
    q = quantize_weights(model, "f16")
    for k, arr in q.param_arrays().items():
        np.testing.assert_array_equal(arr, before[k].astype(np.float16).astype(np.float32))
        np.testing.assert_array_equal(model.params[k].data, before[k])  # untouched


def test_i8_quantization_bounds_and_zeros(small_mesh):
    model = _conv_model(small_mesh)
    name = model.conv_weight_names()[0]
    w = model.params[name].data
    w.ravel()[:5] = 0.0  # exact zeros must survive
    q = quantize_weights(model, "i8")
    wq = q.params[name].data
    scale = (w.max() - w.min()) / 255.0
    assert np.abs(wq - w).max() <= scale  # one quantization level
    np.testing.assert_array_equal(wq.ravel()[:5], 0.0)

    alias = quantize_weights(model, "i8-affine-per-tensor")
    np.testing.assert_array_equal(alias.params[name].data, wq)


def test_i8_constant_tensor_is_exact(small_mesh):
    model = build_model(ModelSpec(kind="linear", dims=small_mesh.dims), seed=0)
    model.params["affine/b"].data[:] = 0.25
    q = quantize_weights(model, "i8")
    np.testing.assert_array_equal(q.params["affine/b"].data, 0.25)


def test_f16_distorts_less_than_i8(small_mesh):
    model = _conv_model(small_mesh)
    f16 = quantize_weights(model, "f16")
    i8 = quantize_weights(model, "i8")
    name = model.conv_weight_names()[0]
    w = model.params[name].data
    err16 = np.abs(f16.params[name].data - w).mean()
    err8 = np.abs(i8.params[name].data - w).mean()
    assert err16 < err8


def test_quantize_rejects_unknown_mode(small_mesh):
    with pytest.raises(EvalError, match="unknown quantization"):
        quantize_weights(_conv_model(small_mesh), "f8")


def test_pruning_zeroes_smallest_conv_weights(small_mesh):
    model = _conv_model(small_mesh)
    pruned = prune_weights(model, 0.3)
    for name in model.conv_weight_names():
        w = model.params[name].data
        pw = pruned.params[name].data
        k = int(round(0.3 * w.size))
        zeroed = pw == 0.0
        assert zeroed.sum() >= k  # ties may add a few, never fewer
        kept_min = np.abs(pw[~zeroed]).min()
        dropped_max = np.abs(w[zeroed & (w != 0.0)]).max() if (zeroed & (w != 0.0)).any() else 0.0
        assert dropped_max <= kept_min
    # biases and the recurrent stack stay intact
    for name, p in model.params.items():
        if name not in model.conv_weight_names():
            np.testing.assert_array_equal(pruned.params[name].data, p.data)


def test_pruning_fraction_validation(small_mesh):
    model = _conv_model(small_mesh)
    with pytest.raises(EvalError):
        prune_weights(model, -0.1)
    with pytest.raises(EvalError):
        prune_weights(model, 1.0)
    same = prune_weights(model, 0.0)
    for k, arr in model.param_arrays().items():
        np.testing.assert_array_equal(same.param_arrays()[k], arr)


def test_pruning_linear_model_is_a_copy(small_mesh):
    model = build_model(ModelSpec(kind="linear", dims=small_mesh.dims), seed=0)
    out = prune_weights(model, 0.5)
    for k, arr in model.param_arrays().items():
        np.testing.assert_array_equal(out.param_arrays()[k], arr)


# ----------------------------------------------------------------------
# latency
# ----------------------------------------------------------------------


def test_latency_bench_contract(small_mesh):
    model = build_model(ModelSpec(kind="linear", dims=small_mesh.dims), seed=0)
    rep = latency_bench(model, small_mesh, iterations=100, warmup=10)
    assert len(rep.samples) == 100
    assert rep.mean > 0.0
    assert rep.median <= rep.p95
    assert rep.rate_hz == pytest.approx(1.0 / rep.mean)
    d = rep.to_dict()
    assert d["model_kind"] == "linear"
    assert d["iterations"] == 100
    assert isinstance(d["hardware"], str) and d["hardware"]


def test_latency_bench_validation(small_mesh):
    model = build_model(ModelSpec(kind="linear", dims=small_mesh.dims), seed=0)
    with pytest.raises(EvalError):
        latency_bench(model, small_mesh, iterations=50)
    with pytest.raises(EvalError):
        latency_bench(model, small_mesh, iterations=100, warmup=5)
    other = build_box_mesh((5, 5, 5), spacing=1.0)
    with pytest.raises(EvalError):
        latency_bench(model, other, iterations=100, warmup=10)


# ----------------------------------------------------------------------
# report files
# ----------------------------------------------------------------------


def test_write_report_json_and_csv(small_mesh, tmp_path):
    pred = np.zeros((1,) + small_mesh.dims + (3,))
    rep = depth_profile_error(pred, pred, small_mesh)
    jp = tmp_path / "depth.json"
    cp = tmp_path / "depth.csv"
    write_report(rep, jp, cp)

    data = json.loads(jp.read_text())
    assert data["kind"] == "depth_profile"
    assert len(data["normalized_depth"]) == small_mesh.dims[2]
    with open(cp, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["normalized_depth", "mean_abs_error_mm", "node_count"]
    assert len(rows) == 1 + small_mesh.dims[2]


def test_write_report_json_only(small_mesh, tmp_path):
    rng = np.random.default_rng(2)
    a = rng.normal(size=small_mesh.dims + (3,))
    rep = bland_altman(a, a)
    jp = tmp_path / "ba.json"
    write_report(rep, jp)
    assert json.loads(jp.read_text())["kind"] == "bland_altman"
    assert not (tmp_path / "ba.csv").exists()
