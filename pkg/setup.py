"""Build the optional compiled kernels; the package falls back to scipy without them."""
import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if os.environ.get("ORIENTKIT_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        extensions = [
            Extension(
                "orientkit._kernels",
                ["src/orientkit/_kernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3", "-fopenmp"],
                extra_link_args=["-fopenmp"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ]
        ext_modules = cythonize(extensions, compiler_directives={"language_level": "3"})

setup(ext_modules=ext_modules)
