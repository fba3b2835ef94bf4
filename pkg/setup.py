import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if os.path.exists("src/halfsplat/_blend_cy.pyx"):
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "halfsplat._blend_cy",
                    ["src/halfsplat/_blend_cy.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            language_level=3,
        )
    except ImportError:
        # Pure-python fallback is selected at import time when the compiled
        # blend core is unavailable.
        ext_modules = []

setup(ext_modules=ext_modules)
