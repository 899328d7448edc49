"""Build script for the optional compiled kernel core.

The package is pure Python except for ``cskt._kernels._core``, a Cython
extension holding the fused hot-loop kernels. If the extension cannot be
built (no compiler, no Cython), installation still succeeds and the package
falls back to the NumPy reference kernels at import time.
"""

import sys

from setuptools import setup

try:
    import numpy
    from Cython.Build import cythonize
    from setuptools.extension import Extension

    extensions = cythonize(
        [
            Extension(
                "cskt._kernels._core",
                ["src/cskt/_kernels/_core.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                # fp-contract off: fused multiply-adds would change rounding
                # and break bit parity with the NumPy reference backend
                extra_compile_args=["-O3", "-ffp-contract=off"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except Exception as exc:  # pragma: no cover - build environment dependent
    print(f"cskt: skipping compiled kernels ({exc}); NumPy fallback will be used", file=sys.stderr)
    extensions = []

setup(ext_modules=extensions)
