"""Build script for the compiled network kernel.

The extension is optional at runtime: if it fails to import, the package
falls back to the pure-numpy kernel with identical semantics.
"""

import numpy
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "pinnbalance._netkernel_cy",
        ["src/pinnbalance/_netkernel_cy.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=["-O3", "-march=native", "-fno-math-errno"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

setup(ext_modules=cythonize(extensions, language_level=3))
