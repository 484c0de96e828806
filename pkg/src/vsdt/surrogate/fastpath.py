"""Channels-last inference kernels for the surrogate models.

The differentiable graph in :mod:`vsdt.surrogate.models` keeps
activations as ``(batch, channels, x, y, z)`` because that is the layout
the autodiff convolution was written against.  For tape-free inference
that layout is a poor fit on CPU: the im2col gather copies tiny strided
runs and the GEMM ends up with a short M dimension.  The kernels here
run the same arithmetic channels-last — activations are
``(batch, x, y, z, channels)`` — where the gather copies contiguous
``k * channels`` runs and BLAS sees a tall-skinny product.  On the
benchmark grids this roughly halves per-frame latency.

Numerical note: the results are the same computation re-associated, so
they can differ from the graph path at float32 rounding level (observed
relative differences around 1e-7).  Training always uses the graph path;
parity between the two is covered by tests.

Caching contract: derived weights (transposed convolution matrices) are
cached against the identity of the parameter's ``data`` array.  Code
that updates parameters must therefore **replace** the array (or the
Tensor) rather than mutating it in place — the optimiser, checkpoint
loader, and compression helpers all follow this rule.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import models as _m

try:  # compiled kernel is optional; the numpy path below covers its absence
    from .. import _convkernel as _ck
except ImportError:  # pragma: no cover - depends on the build host
    _ck = None

__all__ = ["infer", "clear_cache"]


# ----------------------------------------------------------------------
# per-model cache
# ----------------------------------------------------------------------


class _Cache:
    """Scratch buffers and derived weights for one ModelInstance."""

    __slots__ = ("weights", "scratch")

    def __init__(self) -> None:
        # name -> (source array, derived array); the source reference both
        # detects parameter replacement and pins the id while cached.
        self.weights: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.scratch: dict[tuple, np.ndarray] = {}


def _cache_for(model) -> _Cache:
    cache = getattr(model, "_infer_cache", None)
    if cache is None:
        cache = _Cache()
        model._infer_cache = cache
    return cache


def clear_cache(model) -> None:
    """Drop any cached buffers/weights attached to ``model``."""
    if getattr(model, "_infer_cache", None) is not None:
        model._infer_cache = None


def _buf(cache: _Cache, key: tuple, shape: tuple, zero: bool = False) -> np.ndarray:
    arr = cache.scratch.get(key)
    if arr is None or arr.shape != shape:
        arr = np.zeros(shape, np.float32) if zero else np.empty(shape, np.float32)
        cache.scratch[key] = arr
    return arr


def _conv_matrix(cache: _Cache, name: str, w) -> np.ndarray:
    """Reorder a conv weight (Co,Ci,k,k,k) to a (k*k*k*Ci, Co) matrix.

    Row order is (kx, ky, kz, ci), chosen so the im2col gather can copy
    contiguous (kz, ci) runs straight out of the padded activation.
    """
    src = w.data
    hit = cache.weights.get(name)
    if hit is not None and hit[0] is src:
        return hit[1]
    co = src.shape[0]
    mat = np.ascontiguousarray(
        src.transpose(2, 3, 4, 1, 0).reshape(-1, co).astype(np.float32, copy=False)
    )
    cache.weights[name] = (src, mat)
    return mat


# ----------------------------------------------------------------------
# channels-last primitives
# ----------------------------------------------------------------------


def _conv(cache, tag, x, wmat, bias, k, relu):
    """'Same'-padded k^3 convolution on (B, X, Y, Z, Ci) input."""
    b_, xs, ys, zs, ci = x.shape
    co = wmat.shape[1]
    out = _buf(cache, (tag, "out"), (b_, xs, ys, zs, co))
    if k == 1:
        np.matmul(x.reshape(-1, ci), wmat, out=out.reshape(-1, co))
    else:
        h = k // 2
        xp, yp, zp = xs + 2 * h, ys + 2 * h, zs + 2 * h
        # pad/cols are transient within this call, so they are keyed by
        # shape alone and shared between layers — that keeps the scratch
        # footprint (and the cold-cache tax per frame) down.  Margins are
        # zeroed once at allocation and never written again.
        pad = _buf(cache, ("pad", b_, xp, yp, zp, ci), (b_, xp, yp, zp, ci), zero=True)
        pad[:, h : h + xs, h : h + ys, h : h + zs, :] = x
        if _ck is not None and k == 3:
            # The compiled kernel fuses the gather, product, bias and ReLU;
            # it wants exactly the (kx, ky, kz, ci, co) weight matrix and
            # padded buffer built above.
            for b in range(b_):
                _ck.conv3s(pad[b], wmat, bias, out[b], bool(relu))
            return out
        cols = _buf(cache, ("cols", b_, xs, ys, zs, k, ci), (b_, xs, ys, zs, k, k, k * ci))
        flat = pad.reshape(b_, xp, yp, zp * ci)
        for ax in range(k):
            for ay in range(k):
                # Window over the fused (z, ci) axis: every ci-th window is
                # a contiguous (kz, ci) run at one output z position.
                win = sliding_window_view(flat[:, ax : ax + xs, ay : ay + ys, :], k * ci, axis=3)
                cols[:, :, :, :, ax, ay, :] = win[:, :, :, :: ci, :]
        np.matmul(
            cols.reshape(-1, k * k * k * ci), wmat, out=out.reshape(-1, co)
        )
    out += bias
    if relu:
        np.maximum(out, 0.0, out=out)
    return out


def _maxpool(cache, tag, x, window, rounding):
    b_, xs, ys, zs, c = x.shape
    if rounding == "ceil":
        ox, oy, oz = (-(-d // window) for d in (xs, ys, zs))
        padded = _buf(cache, (tag, "pool"), (b_, ox * window, oy * window, oz * window, c))
        padded.fill(-np.inf)
        padded[:, :xs, :ys, :zs, :] = x
        src = padded
    else:
        ox, oy, oz = (d // window for d in (xs, ys, zs))
        src = x[:, : ox * window, : oy * window, : oz * window, :]
    blocks = src.reshape(b_, ox, window, oy, window, oz, window, c)
    return blocks.max(axis=(2, 4, 6))


def _upsample(cache, tag, x, factors):
    b_, xs, ys, zs, c = x.shape
    fx, fy, fz = factors
    out = _buf(cache, (tag, "up"), (b_, xs, fx, ys, fy, zs, fz, c))
    out[...] = x[:, :, None, :, None, :, None, :]
    return out.reshape(b_, xs * fx, ys * fy, zs * fz, c)


def _center_fit(x, target):
    """Crop/zero-pad axes 1..3 to ``target`` (channels-last layout)."""
    cur = x.shape[1:4]
    slices = [slice(None)]
    pads = [(0, 0)]
    for c, t in zip(cur, target):
        if c > t:
            start = (c - t) // 2
            slices.append(slice(start, start + t))
            pads.append((0, 0))
        else:
            slices.append(slice(None))
            miss = t - c
            pads.append((miss // 2, miss - miss // 2))
    out = x[tuple(slices)]
    if any(p != (0, 0) for p in pads):
        out = np.pad(out, pads + [(0, 0)])
    return out


# ----------------------------------------------------------------------
# fused upsample(2)+conv
# ----------------------------------------------------------------------
#
# A k=3 'same' convolution applied to a nearest-neighbour x2 upsampling
# reads each coarse cell up to three times.  Grouping fine outputs by
# parity per axis collapses the 3-tap kernel to a 2-tap one on the
# coarse grid (even outputs see taps {w[-1]} and {w[0]+w[1]}, odd ones
# {w[-1]+w[0]} and {w[1]}), which cuts the arithmetic ~3x.  The one
# wrinkle: when a fine dimension is odd, its last even output sits on a
# half-covered coarse cell, where the zero padding of the *fine* grid
# contradicts the parity formula; those boundary planes are recomputed
# exactly afterwards.


def _fold_axis(a, axis, parity):
    w0, w1, w2 = (np.take(a, i, axis=axis) for i in range(3))
    pair = (w0, w1 + w2) if parity == 0 else (w0 + w1, w2)
    return np.stack(pair, axis=axis)


def _up2_matrices(cache: _Cache, name: str, w) -> dict:
    src = w.data
    hit = cache.weights.get((name, "up2"))
    if hit is not None and hit[0] is src:
        return hit[1]
    co = src.shape[0]
    mats = {}
    for px in (0, 1):
        wx = _fold_axis(src, 2, px)
        for py in (0, 1):
            wy = _fold_axis(wx, 3, py)
            for pz in (0, 1):
                wz = _fold_axis(wy, 4, pz)
                mats[(px, py, pz)] = np.ascontiguousarray(
                    wz.transpose(2, 3, 4, 1, 0).reshape(-1, co).astype(np.float32)
                )
    cache.weights[(name, "up2")] = (src, mats)
    return mats


def _plane_matrix(cache: _Cache, name: str, w, axis: int) -> np.ndarray:
    src = w.data
    hit = cache.weights.get((name, "plane", axis))
    if hit is not None and hit[0] is src:
        return hit[1]
    order = [0, 1, 2]
    order[0], order[axis] = order[axis], order[0]
    co = src.shape[0]
    mat = np.ascontiguousarray(
        src.transpose(2 + order[0], 2 + order[1], 2 + order[2], 1, 0)
        .reshape(-1, co)
        .astype(np.float32)
    )
    cache.weights[(name, "plane", axis)] = (src, mat)
    return mat


def _fix_boundary_plane(cache, out, v, wmat, axis):
    """Recompute the last fine plane along ``axis`` exactly.

    ``out``/``v`` views are swapped so the odd axis is axis 1; the fine
    slab around the plane is rebuilt from the coarse field with the true
    zero padding of the fine grid.
    """
    ov = np.swapaxes(out, 1, 1 + axis)
    vv = np.swapaxes(v, 1, 1 + axis)
    b_, fx, fm, fl, co = ov.shape
    ci = vv.shape[-1]
    q0 = (fx - 3) // 2  # coarse row under fine position fx-2
    slab = _buf(cache, ("slab", b_, fm, fl, ci), (b_, 3, fm + 2, fl + 2, ci), zero=True)
    for i, row in enumerate((vv[:, q0], vv[:, q0 + 1])):
        em = np.repeat(row, 2, axis=1)[:, :fm]
        slab[:, i, 1 : 1 + fm, 1 : 1 + fl] = np.repeat(em, 2, axis=2)[:, :, :fl]
    slab[:, 2] = 0.0
    cols = _buf(cache, ("pcols", b_, fm, fl, ci), (b_, fm, fl, 3, 3, 3 * ci))
    flat = slab.reshape(b_, 3, fm + 2, (fl + 2) * ci)
    for dx in range(3):
        for dm in range(3):
            win = sliding_window_view(flat[:, dx, dm : dm + fm, :], 3 * ci, axis=2)
            cols[:, :, :, dx, dm, :] = win[:, :, ::ci, :][:, :, :fl, :]
    plane = np.matmul(cols.reshape(-1, 27 * ci), wmat)
    ov[:, fx - 1] = plane.reshape(b_, fm, fl, co)


def _upconv2(cache, tag, v, name, w, bias, fine_dims):
    """relu(conv3('same', upsample2(v))) with center-crop to fine_dims."""
    mats = _up2_matrices(cache, name, w)
    b_, hx, hy, hz, ci = v.shape
    fx, fy, fz = fine_dims
    co = mats[(0, 0, 0)].shape[1]
    out = _buf(cache, (tag, "out"), (b_, fx, fy, fz, co))
    vp = _buf(cache, ("vp", b_, hx, hy, hz, ci), (b_, hx + 2, hy + 2, hz + 2, ci), zero=True)
    vp[:, 1 : 1 + hx, 1 : 1 + hy, 1 : 1 + hz] = v
    vflat = vp.reshape(b_, hx + 2, hy + 2, (hz + 2) * ci)
    for px in (0, 1):
        nx = len(range(px, fx, 2))
        for py in (0, 1):
            ny = len(range(py, fy, 2))
            for pz in (0, 1):
                nz = len(range(pz, fz, 2))
                cols = _buf(
                    cache, ("c2", b_, nx, ny, nz, ci), (b_, nx, ny, nz, 2, 2, 2 * ci)
                )
                for dx in (0, 1):
                    for dy in (0, 1):
                        rows = vflat[:, px + dx : px + dx + nx, py + dy : py + dy + ny, :]
                        win = sliding_window_view(rows, 2 * ci, axis=3)
                        cols[:, :, :, :, dx, dy, :] = win[:, :, :, pz * ci :: ci, :][
                            :, :, :, :nz, :
                        ]
                gem = np.matmul(cols.reshape(-1, 8 * ci), mats[(px, py, pz)])
                out[:, px::2, py::2, pz::2, :] = gem.reshape(b_, nx, ny, nz, co)
    for axis, f in enumerate((fx, fy, fz)):
        if f % 2 == 1:
            _fix_boundary_plane(cache, out, v, _plane_matrix(cache, name, w, axis), axis)
    out += bias
    np.maximum(out, 0.0, out=out)
    return out


def _sigmoid(z):
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def _lstm_scan(xs, w_ih, w_hh, b, hidden):
    batch = xs[0].shape[0]
    h = np.zeros((batch, hidden), np.float32)
    c = np.zeros((batch, hidden), np.float32)
    for x in xs:
        z = x @ w_ih + h @ w_hh + b
        i = _sigmoid(z[:, :hidden])
        f = _sigmoid(z[:, hidden : 2 * hidden])
        g = np.tanh(z[:, 2 * hidden : 3 * hidden])
        o = _sigmoid(z[:, 3 * hidden :])
        c = f * c + i * g
        h = o * np.tanh(c)
    return h


# ----------------------------------------------------------------------
# model forwards
# ----------------------------------------------------------------------


def _p(model, name):
    return model.params[name].data


def _infer_linear(model, win):
    spec = model.spec
    batch = win.shape[0]
    flat = win[:, spec.n_t - 1].reshape(batch, 3 * spec.grid_slots)
    return (flat @ _p(model, "affine/w") + _p(model, "affine/b")).reshape(
        (batch,) + spec.dims + (3,)
    )


def _infer_unet(model, win):
    spec = model.spec
    cache = _cache_for(model)

    def conv(tag, x, name, k=3, relu=True):
        return _conv(
            cache, tag, x, _conv_matrix(cache, name, model.params[f"{name}/w"]),
            _p(model, f"{name}/b"), k, relu,
        )

    x = np.ascontiguousarray(win[:, 0])
    e1 = conv("e1", x, "enc_conv1")
    e2 = conv("e2", e1, "enc_conv2")
    p = _maxpool(cache, "p", e2, spec.unet_pool_window, spec.pool_rounding)
    b1 = conv("b1", p, "bott_conv1")
    b2 = conv("b2", b1, "bott_conv2")
    if spec.unet_pool_window == 2 and spec.pool_rounding == "ceil":
        d1 = _upconv2(
            cache, "d1", b2, "dec_conv1", model.params["dec_conv1/w"],
            _p(model, "dec_conv1/b"), spec.dims,
        )
    else:
        up = _center_fit(
            _upsample(cache, "u", b2, (spec.unet_pool_window,) * 3), spec.dims
        )
        d1 = conv("d1", up, "dec_conv1")
    d2 = conv("d2", d1, "dec_conv2")
    d3 = conv("d3", d2, "dec_conv3")
    d4 = conv("d4", d3, "dec_conv4")
    cat = np.concatenate((d4, e2), axis=-1)
    return conv("hd", cat, "head_conv", k=1, relu=False)


def _infer_cnn_lstm(model, win):
    spec = model.spec
    cache = _cache_for(model)
    batch, n_t = win.shape[0], spec.n_t
    e = spec.encoder_filters
    px, py, pz = spec.pooled_dims()

    def conv(tag, x, name, k=3, relu=True):
        return _conv(
            cache, tag, x, _conv_matrix(cache, name, model.params[f"{name}/w"]),
            _p(model, f"{name}/b"), k, relu,
        )

    frames = np.ascontiguousarray(win.reshape((batch * n_t,) + spec.dims + (3,)))
    enc = conv("enc", frames, "enc_conv")              # (B*T, X, Y, Z, E)
    pooled = _maxpool(cache, "pl", enc, spec.pool_window, spec.pool_rounding)
    # Flatten in the graph path's channel-first order so the LSTM weights
    # line up: (E, px, py, pz).
    seq = np.ascontiguousarray(np.moveaxis(pooled, -1, 1)).reshape(batch, n_t, -1)
    xs = [seq[:, t] for t in range(n_t)]
    fwd = _lstm_scan(xs, _p(model, "lstm/w_ih"), _p(model, "lstm/w_hh"),
                     _p(model, "lstm/b"), spec.n_n)
    rev = _lstm_scan(xs[::-1], _p(model, "lstm/w_ih_rev"), _p(model, "lstm/w_hh_rev"),
                     _p(model, "lstm/b_rev"), spec.n_n)
    summary = np.tanh(np.concatenate((fwd, rev), axis=1))
    proj = summary @ _p(model, "proj/w") + _p(model, "proj/b")
    grid = np.ascontiguousarray(
        np.moveaxis(proj.reshape(batch, e, px, py, pz), 1, -1)
    )
    up = _center_fit(_upsample(cache, "u", grid, spec.upsample_factors), spec.dims)
    post = conv("post", up, "post_conv")
    enc_last = enc.reshape((batch, n_t) + spec.dims + (e,))[:, n_t - 1]
    cat = np.concatenate((post, enc_last), axis=-1)
    return conv("hd", cat, "head_conv", k=1, relu=False)


def infer(model, window) -> np.ndarray:
    """Tape-free forward pass.

    ``window`` is ``(n_t, nx, ny, nz, 3)`` or ``(batch, n_t, nx, ny, nz, 3)``;
    the result mirrors :func:`vsdt.surrogate.models.forward` with a
    leading batch axis only when the input had one.
    """
    spec = model.spec
    arr = np.asarray(window, dtype=np.float32)
    expected = (spec.n_t,) + spec.dims + (3,)
    if arr.shape == expected:
        single = True
        arr = arr[None]
    elif arr.ndim == 6 and arr.shape[1:] == expected:
        single = False
    else:
        raise _m.ModelSpecError(
            f"window shape {arr.shape} does not match (batch, {spec.n_t}, "
            f"{spec.dims[0]}, {spec.dims[1]}, {spec.dims[2]}, 3)"
        )
    xn = arr / model.norm.force_std
    if spec.kind == "linear":
        y = _infer_linear(model, xn)
    elif spec.kind == "cnn_unet":
        y = _infer_unet(model, xn)
    else:
        y = _infer_cnn_lstm(model, xn)
    out = y * model.norm.disp_std  # also detaches from scratch buffers
    return out[0] if single else out
