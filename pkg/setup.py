"""Build script for the optional compiled kernel extension.

The package works without the extension (a pure NumPy backend is selected at
import time), so extension build failures degrade to a warning instead of
aborting the install.
"""

import sys

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "wsag.kernels._core",
                sources=["src/wsag/kernels/_core.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except Exception as exc:  # pragma: no cover - build-environment dependent
    sys.stderr.write(f"wsag: skipping compiled kernels ({exc}); "
                     "falling back to the NumPy backend\n")
    ext_modules = []

setup(ext_modules=ext_modules)
