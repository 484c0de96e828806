"""vsdt: viscoelastic soft-tissue deformation toolkit.

Explicit finite-element ground truth for quasilinear viscoelastic
bodies, physics-guided neural surrogates trained on it, evaluation
utilities, a binary container format for datasets and checkpoints, and a
live serving layer.

Setting the ``VSDT_THREADS`` environment variable before the first
import caps every parallel section: BLAS thread pools (exported to the
usual knobs unless already set) and the dataset-generation worker pool.
"""

import os as _os

_cap = _os.environ.get("VSDT_THREADS")
if _cap:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _cap)
del _os, _cap

__version__ = "0.1.0"

__all__ = [
    "meshkit",
    "tensorad",
    "femsim",
    "surrogate",
    "trainer",
    "evalkit",
    "store",
    "simserve",
]
