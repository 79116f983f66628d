"""Build script for the optional compiled convolution core.

The package is fully functional without the extension (a pure-Python
implementation with identical semantics is selected at import time), so the
build degrades gracefully when Cython or a C compiler is unavailable.

    python setup.py build_ext --inplace     # compile into src/ for dev runs
"""

from setuptools import setup

try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    # -ffp-contract=off keeps the C loop bit-identical to the pure-Python
    # reference (no FMA contraction).
    extensions = cythonize(
        [
            Extension(
                "tinydet_kit.kernels._core",
                sources=["src/tinydet_kit/kernels/_core.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O2", "-ffp-contract=off"],
            )
        ],
        compiler_directives={
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "language_level": "3",
        },
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
