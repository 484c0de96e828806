/* Compiled 'same'-padded 3x3x3 convolution for the inference fast path.
 *
 * Layouts (all float32, C-contiguous):
 *   pad:  (X+2, Y+2, Z+2, Ci)  zero-padded activation, channels last
 *   w:    (27*Ci, Co)          tap-major weights: (kx, ky, kz, ci) rows
 *   bias: (Co,)
 *   out:  (X, Y, Z, Co)
 *
 * The hot loop holds a block of 4 z-positions x 64 output channels in
 * sixteen 512-bit accumulators, so each weight vector load feeds four
 * FMAs.  Output-channel counts that are not multiples of 16 are handled
 * with masked loads/stores on the last vector.  On targets without
 * AVX-512 a plain-C version of the same loop is compiled instead and
 * left to the compiler's auto-vectorizer.
 *
 * Accumulation order differs from the im2col matmul used by the numpy
 * path, so results agree with it only to float32 rounding.
 */

#define PY_SSIZE_T_CLEAN
#include <Python.h>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

#if defined(__AVX512F__)

/* One block of <=64 aligned output channels.  Masked loads measurably
 * slow the accumulate loop down (~1.8x here), so this nest uses plain
 * loads and is only entered when the block width is a multiple of 16;
 * the ragged remainder, if any, goes through conv3s_tail below. */
static void
conv3s_block(const float *pad, const float *w, const float *bias,
             float *out, int X, int Y, int Z, int ci, int co,
             int cob, int cw, int relu)
{
    const Py_ssize_t sy = (Py_ssize_t)(Z + 2) * ci;
    const Py_ssize_t sx = (Y + 2) * sy;
    const int nv = cw / 16;
    for (int x = 0; x < X; x++) {
        for (int y = 0; y < Y; y++) {
            for (int z0 = 0; z0 < Z; z0 += 4) {
                int zb = Z - z0 < 4 ? Z - z0 : 4;
                __m512 acc[4][4];
                for (int i = 0; i < 4; i++)
                    for (int v = 0; v < nv; v++)
                        acc[i][v] = _mm512_setzero_ps();
                for (int dx = 0; dx < 3; dx++) {
                    for (int dy = 0; dy < 3; dy++) {
                        const float *plane = pad + (x + dx) * sx + (y + dy) * sy;
                        for (int dz = 0; dz < 3; dz++) {
                            const float *col = plane + (Py_ssize_t)(z0 + dz) * ci;
                            const float *wt =
                                w + (Py_ssize_t)((dx * 3 + dy) * 3 + dz) * ci * co + cob;
                            for (int c = 0; c < ci; c++) {
                                const float *wv = wt + (Py_ssize_t)c * co;
                                if (zb == 4) {
                                    __m512 a0 = _mm512_set1_ps(col[c]);
                                    __m512 a1 = _mm512_set1_ps(col[ci + c]);
                                    __m512 a2 = _mm512_set1_ps(col[2 * ci + c]);
                                    __m512 a3 = _mm512_set1_ps(col[3 * ci + c]);
                                    for (int v = 0; v < nv; v++) {
                                        __m512 wz = _mm512_loadu_ps(wv + 16 * v);
                                        acc[0][v] = _mm512_fmadd_ps(a0, wz, acc[0][v]);
                                        acc[1][v] = _mm512_fmadd_ps(a1, wz, acc[1][v]);
                                        acc[2][v] = _mm512_fmadd_ps(a2, wz, acc[2][v]);
                                        acc[3][v] = _mm512_fmadd_ps(a3, wz, acc[3][v]);
                                    }
                                } else {
                                    for (int i = 0; i < zb; i++) {
                                        __m512 ai = _mm512_set1_ps(col[i * ci + c]);
                                        for (int v = 0; v < nv; v++) {
                                            __m512 wz = _mm512_loadu_ps(wv + 16 * v);
                                            acc[i][v] = _mm512_fmadd_ps(ai, wz, acc[i][v]);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                for (int i = 0; i < zb; i++) {
                    float *dst =
                        out + ((Py_ssize_t)(x * Y + y) * Z + z0 + i) * co + cob;
                    for (int v = 0; v < nv; v++) {
                        __m512 b = _mm512_loadu_ps(bias + cob + 16 * v);
                        __m512 r = _mm512_add_ps(acc[i][v], b);
                        if (relu)
                            r = _mm512_max_ps(r, _mm512_setzero_ps());
                        _mm512_storeu_ps(dst + 16 * v, r);
                    }
                }
            }
        }
    }
}

/* Remaining cw < 16 output channels, via masked loads/stores. */
static void
conv3s_tail(const float *pad, const float *w, const float *bias,
            float *out, int X, int Y, int Z, int ci, int co,
            int cob, int cw, int relu)
{
    const Py_ssize_t sy = (Py_ssize_t)(Z + 2) * ci;
    const Py_ssize_t sx = (Y + 2) * sy;
    const __mmask16 m = (__mmask16)((1u << cw) - 1u);
    for (int x = 0; x < X; x++) {
        for (int y = 0; y < Y; y++) {
            for (int z0 = 0; z0 < Z; z0 += 4) {
                int zb = Z - z0 < 4 ? Z - z0 : 4;
                __m512 acc[4];
                for (int i = 0; i < 4; i++)
                    acc[i] = _mm512_setzero_ps();
                for (int dx = 0; dx < 3; dx++) {
                    for (int dy = 0; dy < 3; dy++) {
                        const float *plane = pad + (x + dx) * sx + (y + dy) * sy;
                        for (int dz = 0; dz < 3; dz++) {
                            const float *col = plane + (Py_ssize_t)(z0 + dz) * ci;
                            const float *wt =
                                w + (Py_ssize_t)((dx * 3 + dy) * 3 + dz) * ci * co + cob;
                            for (int c = 0; c < ci; c++) {
                                __m512 wz = _mm512_maskz_loadu_ps(
                                    m, wt + (Py_ssize_t)c * co);
                                for (int i = 0; i < zb; i++) {
                                    __m512 ai = _mm512_set1_ps(col[i * ci + c]);
                                    acc[i] = _mm512_fmadd_ps(ai, wz, acc[i]);
                                }
                            }
                        }
                    }
                }
                __m512 b = _mm512_maskz_loadu_ps(m, bias + cob);
                for (int i = 0; i < zb; i++) {
                    float *dst =
                        out + ((Py_ssize_t)(x * Y + y) * Z + z0 + i) * co + cob;
                    __m512 r = _mm512_add_ps(acc[i], b);
                    if (relu)
                        r = _mm512_max_ps(r, _mm512_setzero_ps());
                    _mm512_mask_storeu_ps(dst, m, r);
                }
            }
        }
    }
}

#endif /* __AVX512F__ */

static void
conv3s_kernel(const float *pad, const float *w, const float *bias,
              float *out, Py_ssize_t X, Py_ssize_t Y, Py_ssize_t Z,
              Py_ssize_t ci, Py_ssize_t co, int relu)
{
#if defined(__AVX512F__)
    Py_ssize_t cob = 0;
    while (co - cob >= 16) {
        Py_ssize_t cw = co - cob < 64 ? (co - cob) & ~(Py_ssize_t)15 : 64;
        conv3s_block(pad, w, bias, out, (int)X, (int)Y, (int)Z,
                     (int)ci, (int)co, (int)cob, (int)cw, relu);
        cob += cw;
    }
    if (cob < co)
        conv3s_tail(pad, w, bias, out, (int)X, (int)Y, (int)Z,
                    (int)ci, (int)co, (int)cob, (int)(co - cob), relu);
#else
    const Py_ssize_t sy = (Z + 2) * ci;
    const Py_ssize_t sx = (Y + 2) * sy;
    for (Py_ssize_t x = 0; x < X; x++) {
        for (Py_ssize_t y = 0; y < Y; y++) {
            for (Py_ssize_t z = 0; z < Z; z++) {
                float *dst = out + ((x * Y + y) * Z + z) * co;
                for (Py_ssize_t o = 0; o < co; o++)
                    dst[o] = bias[o];
                for (int dx = 0; dx < 3; dx++) {
                    for (int dy = 0; dy < 3; dy++) {
                        const float *plane = pad + (x + dx) * sx + (y + dy) * sy;
                        for (int dz = 0; dz < 3; dz++) {
                            const float *col = plane + (z + dz) * ci;
                            const float *wt =
                                w + ((dx * 3 + dy) * 3 + dz) * ci * co;
                            for (Py_ssize_t c = 0; c < ci; c++) {
                                float a = col[c];
                                const float *wv = wt + c * co;
                                for (Py_ssize_t o = 0; o < co; o++)
                                    dst[o] += a * wv[o];
                            }
                        }
                    }
                }
                if (relu)
                    for (Py_ssize_t o = 0; o < co; o++)
                        if (dst[o] < 0.0f)
                            dst[o] = 0.0f;
            }
        }
    }
#endif
}

static int
get_f32(PyObject *obj, Py_buffer *view, int ndim, int writable, const char *name)
{
    int flags = PyBUF_C_CONTIGUOUS | PyBUF_FORMAT;
    if (writable)
        flags |= PyBUF_WRITABLE;
    if (PyObject_GetBuffer(obj, view, flags) != 0)
        return -1;
    if (view->ndim != ndim || view->itemsize != sizeof(float) ||
        view->format == NULL || view->format[0] != 'f' || view->format[1] != '\0') {
        PyErr_Format(PyExc_TypeError,
                     "%s must be a %dD C-contiguous float32 array", name, ndim);
        PyBuffer_Release(view);
        return -1;
    }
    return 0;
}

static PyObject *
py_conv3s(PyObject *self, PyObject *args)
{
    PyObject *pad_o, *w_o, *bias_o, *out_o;
    int relu;
    if (!PyArg_ParseTuple(args, "OOOOp", &pad_o, &w_o, &bias_o, &out_o, &relu))
        return NULL;

    Py_buffer pad, w, bias, out;
    if (get_f32(pad_o, &pad, 4, 0, "pad") != 0)
        return NULL;
    if (get_f32(w_o, &w, 2, 0, "w") != 0) {
        PyBuffer_Release(&pad);
        return NULL;
    }
    if (get_f32(bias_o, &bias, 1, 0, "bias") != 0) {
        PyBuffer_Release(&pad);
        PyBuffer_Release(&w);
        return NULL;
    }
    if (get_f32(out_o, &out, 4, 1, "out") != 0) {
        PyBuffer_Release(&pad);
        PyBuffer_Release(&w);
        PyBuffer_Release(&bias);
        return NULL;
    }

    Py_ssize_t X = out.shape[0], Y = out.shape[1], Z = out.shape[2];
    Py_ssize_t co = out.shape[3], ci = pad.shape[3];
    int ok = pad.shape[0] == X + 2 && pad.shape[1] == Y + 2 &&
             pad.shape[2] == Z + 2 && w.shape[0] == 27 * ci &&
             w.shape[1] == co && bias.shape[0] == co;
    if (!ok) {
        PyErr_SetString(PyExc_ValueError,
                        "inconsistent shapes: expected pad (X+2,Y+2,Z+2,Ci), "
                        "w (27*Ci,Co), bias (Co,), out (X,Y,Z,Co)");
    } else {
        Py_BEGIN_ALLOW_THREADS
        conv3s_kernel((const float *)pad.buf, (const float *)w.buf,
                      (const float *)bias.buf, (float *)out.buf,
                      X, Y, Z, ci, co, relu);
        Py_END_ALLOW_THREADS
    }

    PyBuffer_Release(&pad);
    PyBuffer_Release(&w);
    PyBuffer_Release(&bias);
    PyBuffer_Release(&out);
    if (!ok)
        return NULL;
    Py_RETURN_NONE;
}

static PyMethodDef methods[] = {
    {"conv3s", py_conv3s, METH_VARARGS,
     "conv3s(pad, w, bias, out, relu)\n\n"
     "'Same'-padded 3x3x3 channels-last float32 convolution; writes into\n"
     "out and applies bias (and optionally ReLU) in place."},
    {NULL, NULL, 0, NULL},
};

static struct PyModuleDef module = {
    PyModuleDef_HEAD_INIT, "_convkernel",
    "Compiled convolution kernel used by the inference fast path.",
    -1, methods,
};

PyMODINIT_FUNC
PyInit__convkernel(void)
{
    return PyModule_Create(&module);
}
