"""Build script: compiles the C kernel extension when Cython is available.

The package works without the extension (pure-Python kernels are selected at
import time), so the build degrades gracefully instead of failing hard.
Set DIETATTN_PURE=1 to skip the extension build entirely.
"""

import os
import sys

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("DIETATTN_PURE") != "1":
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "dietattn._kernels_c",
                    ["src/dietattn/_kernels_c.pyx"],
                    # -ffp-contract=off keeps C results bit-comparable with the
                    # pure-Python kernels (no FMA contraction of a*b+c).
                    extra_compile_args=["-O3", "-ffp-contract=off"],
                )
            ],
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
                "initializedcheck": False,
            },
        )
    except ImportError:
        print("Cython not found; installing with pure-Python kernels only", file=sys.stderr)

setup(ext_modules=ext_modules)
