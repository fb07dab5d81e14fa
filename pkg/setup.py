import os

from setuptools import setup

# The compiled kernels are optional: the package falls back to a numpy
# implementation when the extension is absent or GAPRO_NO_EXT is set.
ext_modules = []
if not os.environ.get("GAPRO_SKIP_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools.extension import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "gapro._kernels._core",
                    ["src/gapro/_kernels/_core.pyx"],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            language_level=3,
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
