"""Build script: compiles the optional fast kernels.

The package works without the extension (a NumPy fallback is selected at
import time), so any compiler failure downgrades to a pure-Python install
instead of aborting.
"""

import sys

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools.extension import Extension

    ext_modules = cythonize(
        [
            Extension(
                "shjb._kernels",
                ["src/shjb/_kernels.pyx"],
                include_dirs=[numpy.get_include()],
                # -ffp-contract=off: kernel results must match the NumPy
                # fallback bit for bit, so FMA fusion is disabled.
                extra_compile_args=["-O2", "-ffp-contract=off"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except Exception as exc:  # pragma: no cover - exercised only on broken toolchains
    print(f"shjb: skipping compiled kernels ({exc}); using NumPy fallback", file=sys.stderr)
    ext_modules = []

setup(ext_modules=ext_modules)
