"""Builds the optional compiled kernels.

The package works without them: ``iotquarantine.kernels`` falls back to the
numpy implementation when the extension is missing.
"""

import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("IOTQ_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "iotquarantine._ckernels",
                    ["src/iotquarantine/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
            },
        )

setup(ext_modules=ext_modules)
