import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "sssplat.kernels._core",
                ["src/sssplat/kernels/_core.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except ImportError:
    # The package still works without the compiled core: the numpy fallback
    # kernels are selected at import time.
    ext_modules = []

setup(ext_modules=ext_modules)
