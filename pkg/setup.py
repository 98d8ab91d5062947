"""Build script for the compiled separable-convolution core.

The extension is optional: if the toolchain is unavailable the package
installs anyway and falls back to the pure-numpy kernels at import time.
Build in place for development with

    python setup.py build_ext --inplace
"""

import sys

from setuptools import setup

try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools.extension import Extension

    ext_modules = cythonize(
        [
            Extension(
                "sepkern._sepconv_cy",
                ["src/sepkern/_sepconv_cy.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3", "-ffp-contract=off", "-fopenmp"],
                extra_link_args=["-fopenmp"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError as exc:
    print(f"sepkern: building without compiled core ({exc})", file=sys.stderr)
    ext_modules = []

setup(ext_modules=ext_modules)
