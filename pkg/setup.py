import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

extensions = [
    Extension(
        "cloudadapt.kernels._fastcore",
        ["src/cloudadapt/kernels/_fastcore.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=["-O3"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

if cythonize is not None:
    ext_modules = cythonize(extensions, compiler_directives={"language_level": "3"})
else:
    # The package works without the extension: kernels/__init__.py falls
    # back to the numpy implementation at import time.
    ext_modules = []

setup(ext_modules=ext_modules)
