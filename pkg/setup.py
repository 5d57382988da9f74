"""Build the optional Cython kernels.

The extension is marked optional: if it fails to compile the package still
installs and falls back to the NumPy/LAPACK kernels at import time.
"""
import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pragma: no cover
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "crosslabel._kernels._ckernels",
                ["src/crosslabel/_kernels/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                optional=True,
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

setup(ext_modules=ext_modules)
