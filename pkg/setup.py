"""Build hooks for the optional compiled convolution kernel.

All package metadata lives in pyproject.toml; this file only registers
the C extension.  The extension is marked optional so installation still
succeeds on hosts without a working C toolchain -- the inference fast
path falls back to its pure-numpy implementation in that case.
"""

import platform

from setuptools import Extension, setup

compile_args = ["-O3"]
if platform.system() != "Windows":
    # Let the compiler use whatever SIMD the build host offers; the
    # kernel source carries a portable fallback for everything else.
    compile_args.append("-march=native")

setup(
    ext_modules=[
        Extension(
            "vsdt._convkernel",
            sources=["src/vsdt/_convkernel.c"],
            extra_compile_args=compile_args,
            optional=True,
        )
    ]
)
