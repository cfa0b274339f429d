"""Build script: compiles the optional speed kernel, falls back to pure Python."""

import sys

from setuptools import setup

try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "veilvec._kernel",
                ["src/veilvec/_kernel.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except ImportError:
    # Cython/numpy missing at build time: install works, the pure-Python
    # backend is selected at import.
    print("veilvec: building without the compiled kernel", file=sys.stderr)
    ext_modules = []

setup(ext_modules=ext_modules)
