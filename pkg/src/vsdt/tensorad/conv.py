"""Volumetric network layers: convolution, max pooling, nearest upsampling.

``conv3d`` lowers to a single matrix product per batch (im2col with a
strided slice fill), which is where essentially all inference time goes,
so the column buffer is laid out to match the flattened weight matrix and
filled with one strided copy per kernel offset.

All layers accept ``(C, X, Y, Z)`` or ``(B, C, X, Y, Z)`` tensors and
give back the same rank they were handed.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor, as_tensor, make_result


def _triple(v, name: str) -> tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        v = (int(v),) * 3
    v = tuple(int(x) for x in v)
    if len(v) != 3 or any(x < 1 for x in v):
        raise ValueError(f"{name} must be a positive int or 3-tuple, got {v!r}")
    return v


def _as_rank5(x: Tensor) -> tuple[Tensor, bool]:
    if x.data.ndim == 4:
        from .ops import reshape

        return reshape(x, (1,) + x.data.shape), True
    if x.data.ndim == 5:
        return x, False
    raise ValueError(f"expected a rank-4 or rank-5 tensor, got shape {x.data.shape}")


def _drop_batch(y: Tensor, added: bool) -> Tensor:
    if not added:
        return y
    from .ops import reshape

    return reshape(y, y.data.shape[1:])


def conv3d(x, w, b=None, stride=1, padding: str = "same") -> Tensor:
    """3-D cross-correlation with a cubic kernel.

    ``w`` has shape ``(c_out, c_in, k, k, k)``; ``padding`` is ``"same"``
    (zero-padded so the output spans ``ceil(dim / stride)``) or
    ``"valid"``.  Odd ``k`` is required for ``"same"`` so the padding is
    symmetric.
    """
    x = as_tensor(x)
    w = as_tensor(w)
    if b is not None:
        b = as_tensor(b)
    x5, added = _as_rank5(x)
    if w.data.ndim != 5:
        raise ValueError(f"kernel must be rank 5, got shape {w.data.shape}")
    c_out, c_in, kx, ky, kz = w.data.shape
    if not (kx == ky == kz):
        raise ValueError(f"only cubic kernels are supported, got {(kx, ky, kz)}")
    k = kx
    bsz, ci, dx, dy, dz = x5.data.shape
    if ci != c_in:
        raise ValueError(f"input has {ci} channels but kernel expects {c_in}")
    if b is not None and b.data.shape != (c_out,):
        raise ValueError(f"bias shape {b.data.shape} does not match {c_out} filters")
    sx, sy, sz = _triple(stride, "stride")

    if padding == "same":
        if k % 2 == 0:
            raise ValueError("'same' padding requires an odd kernel size")
        out = tuple(math.ceil(d / s) for d, s in zip((dx, dy, dz), (sx, sy, sz)))
        pads = []
        for d, s, o in zip((dx, dy, dz), (sx, sy, sz), out):
            total = max((o - 1) * s + k - d, 0)
            pads.append((total // 2, total - total // 2))
    elif padding == "valid":
        if any(d < k for d in (dx, dy, dz)):
            raise ValueError(
                f"input {(dx, dy, dz)} smaller than kernel {k} with 'valid' padding"
            )
        out = tuple((d - k) // s + 1 for d, s in zip((dx, dy, dz), (sx, sy, sz)))
        pads = [(0, 0)] * 3
    else:
        raise ValueError(f"unknown padding {padding!r}")
    ox, oy, oz = out
    n_pos = ox * oy * oz

    xp = x5.data
    if any(p != (0, 0) for p in pads):
        xp = np.pad(x5.data, ((0, 0), (0, 0)) + tuple(pads))

    # Column buffer laid out as (B, Ci, k, k, k, Xo, Yo, Zo) so that a
    # flat view matches w.reshape(c_out, -1) row order exactly.
    cols = np.empty((bsz, c_in, k, k, k, ox, oy, oz), dtype=xp.dtype)
    for ax in range(k):
        for ay in range(k):
            for az in range(k):
                cols[:, :, ax, ay, az] = xp[
                    :,
                    :,
                    ax : ax + sx * ox : sx,
                    ay : ay + sy * oy : sy,
                    az : az + sz * oz : sz,
                ]
    cols_mat = cols.reshape(bsz, c_in * k * k * k, n_pos)
    w_mat = np.ascontiguousarray(w.data.reshape(c_out, -1))
    y = np.matmul(w_mat, cols_mat)  # (B, c_out, n_pos)
    if b is not None:
        y += b.data.reshape(1, -1, 1)
    y = y.reshape(bsz, c_out, ox, oy, oz)

    padded_shape = xp.shape

    def vjp(g):
        g_mat = g.reshape(bsz, c_out, n_pos)
        gw = np.matmul(g_mat, cols_mat.transpose(0, 2, 1)).sum(axis=0)
        gw = gw.reshape(w.data.shape)
        gb = g_mat.sum(axis=(0, 2)) if b is not None else None
        d_cols = np.matmul(w_mat.T, g_mat).reshape(cols.shape)
        gxp = np.zeros(padded_shape, dtype=g.dtype)
        for ax in range(k):
            for ay in range(k):
                for az in range(k):
                    gxp[
                        :,
                        :,
                        ax : ax + sx * ox : sx,
                        ay : ay + sy * oy : sy,
                        az : az + sz * oz : sz,
                    ] += d_cols[:, :, ax, ay, az]
        gx = gxp[
            :,
            :,
            pads[0][0] : padded_shape[2] - pads[0][1],
            pads[1][0] : padded_shape[3] - pads[1][1],
            pads[2][0] : padded_shape[4] - pads[2][1],
        ]
        if b is not None:
            return gx, gw, gb
        return gx, gw

    parents = (x5, w) if b is None else (x5, w, b)
    out_t = make_result(y, parents, vjp, "conv3d")
    return _drop_batch(out_t, added)


def conv3d_param_count(c_in: int, c_out: int, k: int, bias: bool = True) -> int:
    """Trainable parameter count of one convolution layer."""
    n = c_out * c_in * k ** 3
    return n + c_out if bias else n


def maxpool3d(x, window, stride=None, rounding: str = "ceil") -> Tensor:
    """Non-overlapping max pooling.

    ``stride`` defaults to ``window`` and must equal it (the only layout
    used here).  ``rounding`` picks the output extent for dimensions that
    do not divide evenly: ``"ceil"`` pads virtually (partial windows at
    the far edge pool over fewer elements), ``"floor"`` drops the
    remainder.
    """
    x = as_tensor(x)
    x5, added = _as_rank5(x)
    win = _triple(window, "window")
    if stride is not None and _triple(stride, "stride") != win:
        raise ValueError("maxpool3d only supports stride == window")
    if rounding not in ("ceil", "floor"):
        raise ValueError(f"rounding must be 'ceil' or 'floor', got {rounding!r}")
    bsz, ch, dx, dy, dz = x5.data.shape
    wx, wy, wz = win
    if rounding == "ceil":
        out = (math.ceil(dx / wx), math.ceil(dy / wy), math.ceil(dz / wz))
        px, py, pz = (out[0] * wx - dx, out[1] * wy - dy, out[2] * wz - dz)
        xp = x5.data
        if px or py or pz:
            xp = np.pad(
                x5.data,
                ((0, 0), (0, 0), (0, px), (0, py), (0, pz)),
                constant_values=-np.inf,
            )
    else:
        out = (dx // wx, dy // wy, dz // wz)
        if any(o == 0 for o in out):
            raise ValueError(
                f"input {(dx, dy, dz)} smaller than window {win} with floor rounding"
            )
        xp = x5.data[:, :, : out[0] * wx, : out[1] * wy, : out[2] * wz]
    ox, oy, oz = out
    blocks = xp.reshape(bsz, ch, ox, wx, oy, wy, oz, wz)
    blocks = blocks.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(
        bsz, ch, ox, oy, oz, wx * wy * wz
    )
    # First maximal element wins ties, matching argmax order.
    arg = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(bsz, ch, ox, oy, oz, wx, wy, wz)
        gb = gb.transpose(0, 1, 2, 5, 3, 6, 4, 7).reshape(
            bsz, ch, ox * wx, oy * wy, oz * wz
        )
        if rounding == "ceil":
            gx = gb[:, :, :dx, :dy, :dz]
        else:
            gx = np.zeros_like(x5.data)
            gx[:, :, : ox * wx, : oy * wy, : oz * wz] = gb
        return (np.ascontiguousarray(gx),)

    out_t = make_result(np.ascontiguousarray(y), (x5,), vjp, "maxpool3d")
    return _drop_batch(out_t, added)


def pooled_dims(dims, window, rounding: str = "ceil") -> tuple[int, int, int]:
    """Spatial shape after ``maxpool3d`` with the given window."""
    win = _triple(window, "window")
    if rounding == "ceil":
        return tuple(math.ceil(d / w) for d, w in zip(dims, win))
    return tuple(d // w for d, w in zip(dims, win))


def upsample3d_nearest(x, factors) -> Tensor:
    """Nearest-neighbour upsampling by integer factors per spatial axis."""
    x = as_tensor(x)
    x5, added = _as_rank5(x)
    fx, fy, fz = _triple(factors, "factors")
    bsz, ch, dx, dy, dz = x5.data.shape
    y = np.repeat(np.repeat(np.repeat(x5.data, fx, axis=2), fy, axis=3), fz, axis=4)

    def vjp(g):
        g8 = g.reshape(bsz, ch, dx, fx, dy, fy, dz, fz)
        return (g8.sum(axis=(3, 5, 7)),)

    out_t = make_result(y, (x5,), vjp, "upsample3d")
    return _drop_batch(out_t, added)
