"""Builds the optional compiled kernels; the package works without them."""
import os
import sys

from setuptools import setup

ext_modules = []
if os.environ.get("COUINSEG_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext = Extension(
            "couinseg._ckernels",
            sources=["src/couinseg/_ckernels.pyx"],
            include_dirs=[np.get_include()],
            extra_compile_args=["-O3"],
            define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        )
        ext_modules = cythonize([ext], quiet=True)
    except Exception as exc:  # missing Cython or compiler: fall back to numpy kernels
        print(f"couinseg: skipping compiled kernels ({exc})", file=sys.stderr)

setup(ext_modules=ext_modules)
