"""Surrogate model architectures for force-to-displacement prediction.

Three families share one interface:

* ``linear`` - an affine map from the flattened force field to the
  flattened displacement field; the classical baseline.
* ``cnn_unet`` - a volumetric U-Net operating on a single force frame.
* ``cnn_lstm`` - the sequence model: a convolutional encoder per frame,
  a bidirectional LSTM across the ``n_t`` most recent frames, and a
  convolutional decoder that merges the sequence summary with the
  latest frame's encoding.

Inputs are raw force fields in N with shape ``(n_t, nx, ny, nz, 3)``
(optionally batched); outputs are displacement fields in mm for the
window's last frame.  Normalization is scale-only: fields are divided by
per-component standard deviations fitted on the training split (the
means are recorded for reference but not subtracted), so a zero force
field maps to exactly zero network input and a zero final layer yields
an exactly zero displacement - sparse contact forces stay sparse.

Parameter counts are pure functions of the spec; ``parameter_report``
prints the per-layer breakdown next to the published totals for the
Bi-LSTM configurations and never reconciles a mismatch silently (the
published encoder geometry does not compose; see ``KNOWN_LSTM_TOTALS``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .. import tensorad as ta
from ..tensorad import Tensor


class ModelSpecError(ValueError):
    """Inconsistent or unsupported model specification."""


MODEL_KINDS = ("linear", "cnn_unet", "cnn_lstm")

# Published trainable-parameter totals for the bidirectional-LSTM model
# at hidden sizes 64..1024 with a two-frame window.  Only the 512 row is
# arithmetically consistent with the published per-layer counts (it
# implies a flattened per-frame size of 2304); the others imply
# non-integer flattened sizes, so our computed totals legitimately
# differ and are reported side by side instead of being forced to agree.
KNOWN_LSTM_TOTALS: dict[int, int] = {
    64: 1_219_235,
    128: 2_501_155,
    256: 5_261_603,
    512: 11_568_931,
    1024: 27_329_315,
}

# Published per-layer counts for the three convolutions of the sequence
# model at a 3-channel input: encoder 3->32 k3, decoder 32->32 k3, and
# the merged 64->3 k1 head.
KNOWN_CONV_COUNTS = (2624, 27680, 195)

KNOWN_LSTM_ONLY_TOTAL = 11_538_432  # Bi-LSTM(2304 -> 512) alone


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; everything needed to rebuild a model."""

    kind: str
    dims: tuple[int, int, int]
    n_t: int = 1
    n_n: int = 512
    encoder_filters: int = 32
    pool_window: int = 3
    pool_rounding: str = "ceil"
    upsample_factors: tuple[int, int, int] = (4, 4, 3)
    unet_filters: int = 64
    unet_pool_window: int = 2
    active_count: int | None = None  # defaults to every grid slot

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ModelSpecError(f"unknown model kind {self.kind!r}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(
            self, "upsample_factors", tuple(int(f) for f in self.upsample_factors)
        )
        if len(self.dims) != 3 or any(d < 1 for d in self.dims):
            raise ModelSpecError(f"dims must be three positive sizes, got {self.dims}")
        if self.n_t < 1:
            raise ModelSpecError(f"n_t must be >= 1, got {self.n_t}")
        if self.n_n < 1:
            raise ModelSpecError(f"n_n must be >= 1, got {self.n_n}")
        if self.pool_rounding not in ("ceil", "floor"):
            raise ModelSpecError(f"bad pool_rounding {self.pool_rounding!r}")
        if self.kind in ("linear", "cnn_unet") and self.n_t != 1:
            raise ModelSpecError(f"{self.kind} is a single-frame model; use n_t=1")

    @property
    def grid_slots(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def n_active(self) -> int:
        return self.grid_slots if self.active_count is None else self.active_count

    def pooled_dims(self) -> tuple[int, int, int]:
        return ta.pooled_dims(self.dims, self.pool_window, self.pool_rounding)

    def flattened_frame_size(self) -> int:
        px, py, pz = self.pooled_dims()
        return self.encoder_filters * px * py * pz

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "dims": list(self.dims),
            "n_t": self.n_t,
            "n_n": self.n_n,
            "encoder_filters": self.encoder_filters,
            "pool_window": self.pool_window,
            "pool_rounding": self.pool_rounding,
            "upsample_factors": list(self.upsample_factors),
            "unet_filters": self.unet_filters,
            "unet_pool_window": self.unet_pool_window,
            "active_count": self.active_count,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        kw = dict(d)
        kw["dims"] = tuple(kw["dims"])
        kw["upsample_factors"] = tuple(kw.get("upsample_factors", (4, 4, 3)))
        return cls(**kw)


@dataclass
class NormStats:
    """Per-component field statistics from the training split.

    Only the standard deviations act on data (scale-only normalization);
    means are carried along for inspection.  Zero deviations fall back
    to 1 so degenerate components pass through unchanged.
    """

    force_mean: np.ndarray
    force_std: np.ndarray
    disp_mean: np.ndarray
    disp_std: np.ndarray

    @classmethod
    def identity(cls) -> "NormStats":
        one = np.ones(3, dtype=np.float32)
        zero = np.zeros(3, dtype=np.float32)
        return cls(zero.copy(), one.copy(), zero.copy(), one.copy())

    @classmethod
    def fit(cls, forces: np.ndarray, disps: np.ndarray) -> "NormStats":
        """Fit from stacked frames of shape (..., 3)."""

        def stats(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
            flat = a.reshape(-1, 3).astype(np.float64)
            mean = flat.mean(axis=0)
            std = flat.std(axis=0)
            std[std < 1e-12] = 1.0
            return mean.astype(np.float32), std.astype(np.float32)

        fm, fs = stats(forces)
        dm, ds = stats(disps)
        return cls(fm, fs, dm, ds)

    def to_entries(self) -> dict[str, np.ndarray]:
        return {
            "norm/force_mean": self.force_mean.astype(np.float32),
            "norm/force_std": self.force_std.astype(np.float32),
            "norm/disp_mean": self.disp_mean.astype(np.float32),
            "norm/disp_std": self.disp_std.astype(np.float32),
        }

    @classmethod
    def from_entries(cls, entries: Mapping[str, np.ndarray]) -> "NormStats":
        return cls(
            force_mean=np.asarray(entries["norm/force_mean"], dtype=np.float32),
            force_std=np.asarray(entries["norm/force_std"], dtype=np.float32),
            disp_mean=np.asarray(entries["norm/disp_mean"], dtype=np.float32),
            disp_std=np.asarray(entries["norm/disp_std"], dtype=np.float32),
        )


@dataclass
class ModelInstance:
    """A concrete model: spec, parameter tensors, normalization stats."""

    spec: ModelSpec
    params: dict[str, Tensor]
    norm: NormStats

    @property
    def parameter_count(self) -> int:
        return sum(int(p.size) for p in self.params.values())

    def conv_weight_names(self) -> list[str]:
        return [k for k in self.params if k.endswith("/w") and "conv" in k]

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def load_param_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            missing = set(self.params) - set(arrays)
            extra = set(arrays) - set(self.params)
            raise ModelSpecError(
                f"parameter set mismatch: missing {sorted(missing)}, "
                f"unexpected {sorted(extra)}"
            )
        for k, arr in arrays.items():
            cur = self.params[k].data
            arr = np.asarray(arr, dtype=cur.dtype)
            if arr.shape != cur.shape:
                raise ModelSpecError(
                    f"parameter {k!r} has shape {arr.shape}, expected {cur.shape}"
                )
            self.params[k] = Tensor(arr.copy(), requires_grad=True)

    def copy(self) -> "ModelInstance":
        clone = ModelInstance(
            spec=self.spec,
            params={
                k: Tensor(p.data.copy(), requires_grad=True)
                for k, p in self.params.items()
            },
            norm=NormStats(
                self.norm.force_mean.copy(),
                self.norm.force_std.copy(),
                self.norm.disp_mean.copy(),
                self.norm.disp_std.copy(),
            ),
        )
        return clone

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None


# ----------------------------------------------------------------------
# parameter initialisation
# ----------------------------------------------------------------------


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _conv_params(
    rng: np.random.Generator, c_in: int, c_out: int, k: int
) -> tuple[np.ndarray, np.ndarray]:
    w = _uniform(rng, (c_out, c_in, k, k, k), c_in * k ** 3)
    b = np.zeros(c_out, dtype=np.float32)
    return w, b


# ----------------------------------------------------------------------
# builders
# ----------------------------------------------------------------------


def build_model(spec: ModelSpec, seed: int = 0) -> ModelInstance:
    if spec.kind == "linear":
        return build_linear(spec, seed)
    if spec.kind == "cnn_unet":
        return build_cnn_unet(spec, seed)
    return build_cnn_lstm(spec, seed)


def build_linear(spec: ModelSpec, seed: int = 0) -> ModelInstance:
    """Affine force-to-displacement map over the active grid slots."""
    if spec.kind != "linear":
        raise ModelSpecError(f"build_linear got spec kind {spec.kind!r}")
    if spec.n_active != spec.grid_slots:
        raise ModelSpecError(
            "the affine baseline currently assumes a fully occupied grid "
            f"(active {spec.n_active} != slots {spec.grid_slots})"
        )
    rng = np.random.default_rng(seed)
    dof = 3 * spec.n_active
    params = {
        "affine/w": Tensor(_uniform(rng, (dof, dof), dof), requires_grad=True),
        "affine/b": Tensor(np.zeros(dof, dtype=np.float32), requires_grad=True),
    }
    return ModelInstance(spec=spec, params=params, norm=NormStats.identity())


def build_cnn_unet(spec: ModelSpec, seed: int = 0) -> ModelInstance:
    """Volumetric U-Net on one force frame.

    Layer stack (filters F = ``unet_filters``): encoder conv(3->F),
    conv(F->F), maxpool(2); bottleneck conv(F->2F), conv(2F->2F);
    decoder upsample(2) + center-fit, conv(2F->F), conv(F->F),
    conv(F->2F), conv(2F->F); skip-concatenation with the second encoder
    conv; head conv(2F+... -> 3, k1).  Hidden convs use k=3 with ReLU;
    the head is linear.
    """
    if spec.kind != "cnn_unet":
        raise ModelSpecError(f"build_cnn_unet got spec kind {spec.kind!r}")
    w = spec.unet_pool_window
    if spec.pool_rounding == "floor" and any(d < w for d in spec.dims):
        raise ModelSpecError(
            f"dims {spec.dims} too small for pool window {w} with floor rounding"
        )
    f = spec.unet_filters
    rng = np.random.default_rng(seed)
    layers = [
        ("enc_conv1", 3, f, 3),
        ("enc_conv2", f, f, 3),
        ("bott_conv1", f, 2 * f, 3),
        ("bott_conv2", 2 * f, 2 * f, 3),
        ("dec_conv1", 2 * f, f, 3),
        ("dec_conv2", f, f, 3),
        ("dec_conv3", f, 2 * f, 3),
        ("dec_conv4", 2 * f, f, 3),
        ("head_conv", 2 * f, 3, 1),
    ]
    params: dict[str, Tensor] = {}
    for name, c_in, c_out, k in layers:
        wgt, bias = _conv_params(rng, c_in, c_out, k)
        params[f"{name}/w"] = Tensor(wgt, requires_grad=True)
        params[f"{name}/b"] = Tensor(bias, requires_grad=True)
    return ModelInstance(spec=spec, params=params, norm=NormStats.identity())


def build_cnn_lstm(spec: ModelSpec, seed: int = 0) -> ModelInstance:
    """Sequence model: conv encoder, Bi-LSTM over the window, conv decoder.

    Per frame: conv(3->E, k3, same) + ReLU, maxpool(``pool_window``);
    flattened pooled frames feed a bidirectional LSTM with ``n_n`` units
    whose final states pass through tanh and a learned affine projection
    back onto the pooled grid (E channels).  The decoder upsamples by
    ``upsample_factors``, center-fits to the input dims, applies
    conv(E->E, k3) + ReLU, concatenates the latest frame's encoder
    activation channel-wise, and finishes with conv(2E->3, k1).
    """
    if spec.kind != "cnn_lstm":
        raise ModelSpecError(f"build_cnn_lstm got spec kind {spec.kind!r}")
    px, py, pz = spec.pooled_dims()
    if min(px, py, pz) < 1:
        raise ModelSpecError(
            f"dims {spec.dims} too small for pool window {spec.pool_window}"
        )
    e = spec.encoder_filters
    d_flat = spec.flattened_frame_size()
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    wgt, bias = _conv_params(rng, 3, e, 3)
    params["enc_conv/w"] = Tensor(wgt, requires_grad=True)
    params["enc_conv/b"] = Tensor(bias, requires_grad=True)

    lstm_np = ta.init_lstm_params(d_flat, spec.n_n, bidirectional=True, rng=rng)
    for key in ("w_ih", "w_hh", "b", "w_ih_rev", "w_hh_rev", "b_rev"):
        params[f"lstm/{key}"] = Tensor(lstm_np[key], requires_grad=True)

    params["proj/w"] = Tensor(
        _uniform(rng, (2 * spec.n_n, d_flat), 2 * spec.n_n), requires_grad=True
    )
    params["proj/b"] = Tensor(np.zeros(d_flat, dtype=np.float32), requires_grad=True)

    wgt, bias = _conv_params(rng, e, e, 3)
    params["post_conv/w"] = Tensor(wgt, requires_grad=True)
    params["post_conv/b"] = Tensor(bias, requires_grad=True)

    wgt, bias = _conv_params(rng, 2 * e, 3, 1)
    params["head_conv/w"] = Tensor(wgt, requires_grad=True)
    params["head_conv/b"] = Tensor(bias, requires_grad=True)
    return ModelInstance(spec=spec, params=params, norm=NormStats.identity())


# ----------------------------------------------------------------------
# closed-form parameter counts
# ----------------------------------------------------------------------


def parameter_count(spec: ModelSpec) -> int:
    """Trainable parameter total implied by the spec alone."""
    if spec.kind == "linear":
        dof = 3 * spec.n_active
        return dof * dof + dof
    if spec.kind == "cnn_unet":
        f = spec.unet_filters
        c = ta.conv3d_param_count
        return (
            c(3, f, 3)
            + c(f, f, 3)
            + c(f, 2 * f, 3)
            + c(2 * f, 2 * f, 3)
            + c(2 * f, f, 3)
            + c(f, f, 3)
            + c(f, 2 * f, 3)
            + c(2 * f, f, 3)
            + c(2 * f, 3, 1)
        )
    e = spec.encoder_filters
    d_flat = spec.flattened_frame_size()
    c = ta.conv3d_param_count
    return (
        c(3, e, 3)
        + ta.lstm_param_count(d_flat, spec.n_n, bidirectional=True)
        + (2 * spec.n_n) * d_flat
        + d_flat
        + c(e, e, 3)
        + c(2 * e, 3, 1)
    )


def parameter_report(spec: ModelSpec) -> dict:
    """Per-layer breakdown with published totals for comparison.

    For the sequence model the report includes the published total for
    the matching hidden size (when one exists) and the discrepancy; the
    published flattened-frame geometry is unrecoverable, so differences
    are expected and surfaced rather than hidden.
    """
    report: dict = {"kind": spec.kind, "total": parameter_count(spec)}
    if spec.kind == "cnn_lstm":
        e = spec.encoder_filters
        d_flat = spec.flattened_frame_size()
        report["layers"] = {
            "enc_conv": ta.conv3d_param_count(3, e, 3),
            "bi_lstm": ta.lstm_param_count(d_flat, spec.n_n, True),
            "projection": (2 * spec.n_n) * d_flat + d_flat,
            "post_conv": ta.conv3d_param_count(e, e, 3),
            "head_conv": ta.conv3d_param_count(2 * e, 3, 1),
        }
        report["flattened_frame_size"] = d_flat
        known = KNOWN_LSTM_TOTALS.get(spec.n_n)
        if known is not None:
            report["published_total"] = known
            report["discrepancy"] = report["total"] - known
    return report


def format_parameter_report(spec: ModelSpec) -> str:
    rep = parameter_report(spec)
    lines = [f"{rep['kind']}: {rep['total']:,} trainable parameters"]
    for name, n in rep.get("layers", {}).items():
        lines.append(f"  {name:>12}: {n:,}")
    if "published_total" in rep:
        lines.append(
            f"  published total for n_n={spec.n_n}: {rep['published_total']:,} "
            f"(difference {rep['discrepancy']:+,}; the published flattened "
            f"frame size does not match any pooling of dims {spec.dims})"
        )
    return "\n".join(lines)


# ----------------------------------------------------------------------
# forward passes
# ----------------------------------------------------------------------


def _center_fit(x: Tensor, target: tuple[int, int, int]) -> Tensor:
    """Center-crop and/or zero-pad the trailing three axes to ``target``."""
    cur = x.shape[-3:]
    slices = [slice(None)] * (x.ndim - 3)
    need_pad = []
    for c, t in zip(cur, target):
        if c > t:
            start = (c - t) // 2
            slices.append(slice(start, start + t))
            need_pad.append((0, 0))
        else:
            slices.append(slice(None))
            miss = t - c
            need_pad.append((miss // 2, miss - miss // 2))
    out = x[tuple(slices)]
    if any(p != (0, 0) for p in need_pad):
        out = ta.pad_spatial(out, need_pad)
    return out


def _window_to_tensor(spec: ModelSpec, window) -> tuple[Tensor, bool]:
    """Coerce a window to a (B, n_t, nx, ny, nz, 3) constant tensor."""
    if isinstance(window, Tensor):
        arr = window
        shape = arr.shape
    else:
        arr = np.asarray(window, dtype=np.float32)
        shape = arr.shape
    expected = (spec.n_t,) + spec.dims + (3,)
    if shape == expected:
        single = True
    elif len(shape) == 6 and shape[1:] == expected:
        single = False
    else:
        raise ModelSpecError(
            f"window shape {shape} does not match (batch, {spec.n_t}, "
            f"{spec.dims[0]}, {spec.dims[1]}, {spec.dims[2]}, 3)"
        )
    t = arr if isinstance(arr, Tensor) else Tensor(arr)
    if single:
        t = t.reshape((1,) + expected)
    return t, single


def forward(model: ModelInstance, window) -> Tensor:
    """Forward pass; returns (B, nx, ny, nz, 3) in mm.

    With gradients enabled this builds the autodiff graph.  Under
    ``ta.no_grad()`` it routes to the channels-last inference kernels in
    :mod:`vsdt.surrogate.fastpath`, which compute the same arithmetic
    noticeably faster (identical up to float32 rounding).
    """
    spec = model.spec
    if not ta.is_grad_enabled():
        from . import fastpath

        win = window.data if isinstance(window, Tensor) else window
        return Tensor(fastpath.infer(model, win))
    x, single = _window_to_tensor(spec, window)
    f_std = Tensor(model.norm.force_std.reshape(1, 1, 1, 1, 1, 3))
    u_std = Tensor(model.norm.disp_std.reshape(1, 1, 1, 1, 3))
    xn = x / f_std

    if spec.kind == "linear":
        y = _forward_linear(model, xn)
    elif spec.kind == "cnn_unet":
        y = _forward_unet(model, xn)
    else:
        y = _forward_cnn_lstm(model, xn)

    y = y * u_std
    if single:
        y = y.reshape(spec.dims + (3,))
    return y


def _forward_linear(model: ModelInstance, xn: Tensor) -> Tensor:
    spec = model.spec
    batch = xn.shape[0]
    last = xn[:, spec.n_t - 1]  # (B, nx, ny, nz, 3)
    flat = last.reshape((batch, 3 * spec.grid_slots))
    y = flat @ model.params["affine/w"] + model.params["affine/b"]
    return y.reshape((batch,) + spec.dims + (3,))


def _conv_block(model: ModelInstance, x: Tensor, name: str, activate: bool = True) -> Tensor:
    y = ta.conv3d(x, model.params[f"{name}/w"], model.params[f"{name}/b"], padding="same")
    return ta.relu(y) if activate else y


def _forward_unet(model: ModelInstance, xn: Tensor) -> Tensor:
    spec = model.spec
    batch = xn.shape[0]
    x = xn[:, 0].transpose((0, 4, 1, 2, 3))  # (B, 3, nx, ny, nz)
    e1 = _conv_block(model, x, "enc_conv1")
    e2 = _conv_block(model, e1, "enc_conv2")
    p = ta.maxpool3d(e2, spec.unet_pool_window, rounding=spec.pool_rounding)
    b1 = _conv_block(model, p, "bott_conv1")
    b2 = _conv_block(model, b1, "bott_conv2")
    up = ta.upsample3d_nearest(b2, (spec.unet_pool_window,) * 3)
    up = _center_fit(up, spec.dims)
    d1 = _conv_block(model, up, "dec_conv1")
    d2 = _conv_block(model, d1, "dec_conv2")
    d3 = _conv_block(model, d2, "dec_conv3")
    d4 = _conv_block(model, d3, "dec_conv4")
    cat = ta.concat([d4, e2], axis=1)
    out = _conv_block(model, cat, "head_conv", activate=False)
    return out.transpose((0, 2, 3, 4, 1))


def _forward_cnn_lstm(model: ModelInstance, xn: Tensor) -> Tensor:
    spec = model.spec
    batch, n_t = xn.shape[0], spec.n_t
    e = spec.encoder_filters
    d_flat = spec.flattened_frame_size()
    px, py, pz = spec.pooled_dims()

    frames = xn.reshape((batch * n_t,) + spec.dims + (3,)).transpose((0, 4, 1, 2, 3))
    enc = _conv_block(model, frames, "enc_conv")  # (B*T, E, nx, ny, nz)
    pooled = ta.maxpool3d(enc, spec.pool_window, rounding=spec.pool_rounding)
    seq = pooled.reshape((batch, n_t, d_flat))
    xs = [seq[:, t] for t in range(n_t)]
    lstm_params = {k.split("/", 1)[1]: v for k, v in model.params.items() if k.startswith("lstm/")}
    _, summary = ta.lstm_layer(xs, lstm_params, spec.n_n, bidirectional=True)
    z = ta.tanh(summary)
    proj = z @ model.params["proj/w"] + model.params["proj/b"]
    grid = proj.reshape((batch, e, px, py, pz))
    up = ta.upsample3d_nearest(grid, spec.upsample_factors)
    up = _center_fit(up, spec.dims)
    post = _conv_block(model, up, "post_conv")

    enc_last = enc.reshape((batch, n_t, e) + spec.dims)[:, n_t - 1]
    cat = ta.concat([post, enc_last], axis=1)
    out = _conv_block(model, cat, "head_conv", activate=False)
    return out.transpose((0, 2, 3, 4, 1))


# ----------------------------------------------------------------------
# inference entry points
# ----------------------------------------------------------------------


def forward_window(model: ModelInstance, force_frames) -> np.ndarray:
    """Predict the displacement field for one window of force frames.

    ``force_frames`` must hold exactly ``spec.n_t`` frames.  Runs without
    recording an autodiff tape and returns a float32 array.
    """
    frames = np.asarray(force_frames, dtype=np.float32)
    expected = (model.spec.n_t,) + model.spec.dims + (3,)
    if frames.shape != expected:
        raise ModelSpecError(
            f"forward_window needs shape {expected}, got {frames.shape}"
        )
    with ta.no_grad():
        out = forward(model, frames)
    return np.asarray(out.data, dtype=np.float32)


def window_stack(forces: np.ndarray, n_t: int) -> np.ndarray:
    """Sliding windows over a force sequence with zero prefill.

    ``forces`` is (T, nx, ny, nz, 3); the result is (T, n_t, ...) where
    window t holds frames [t-n_t+1 .. t], using zero fields before the
    sequence start (matching the live-serving warm-up behaviour).
    """
    T = len(forces)
    out = np.zeros((T, n_t) + forces.shape[1:], dtype=np.float32)
    for t in range(T):
        for k in range(n_t):
            src = t - (n_t - 1) + k
            if src >= 0:
                out[t, k] = forces[src]
    return out


def predict_sequence(
    model: ModelInstance, forces: np.ndarray, batch_size: int = 8
) -> np.ndarray:
    """Predict displacements for every frame of a force sequence."""
    windows = window_stack(np.asarray(forces, dtype=np.float32), model.spec.n_t)
    preds = np.empty(forces.shape, dtype=np.float32)
    with ta.no_grad():
        for start in range(0, len(windows), batch_size):
            chunk = windows[start : start + batch_size]
            out = forward(model, chunk)
            preds[start : start + len(chunk)] = out.data
    return preds
