"""Builds the optional Cython kernels; the package works without them.

``RELIGHTBAKE_PORTABLE=1`` drops ``-march=native`` from the fast-math module.
"""
import os

import numpy as np
from setuptools import Extension, setup

_native = [] if os.environ.get("RELIGHTBAKE_PORTABLE") else ["-march=native"]

try:
    from Cython.Build import cythonize
except ImportError:  # pure python install
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "relightbake._ckernels",
                ["src/relightbake/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
                optional=True,
            ),
            Extension(
                "relightbake._cfast",
                ["src/relightbake/_cfast.pyx"],
                include_dirs=[np.get_include(), "src/relightbake"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3", "-ffast-math", "-fopenmp-simd"] + _native,
                libraries=["m", "mvec"],
                optional=True,
            ),
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
