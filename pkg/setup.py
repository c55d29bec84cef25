from setuptools import Extension, setup

import numpy

try:
    from Cython.Build import cythonize
except ImportError:
    # Pure-python install: mkr.kernels falls back to the numpy backend.
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "mkr.kernels._core",
                ["src/mkr/kernels/_core.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )

setup(ext_modules=ext_modules)
