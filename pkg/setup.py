import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "rbengine.kernels._cyimpl",
                ["src/rbengine/kernels/_cyimpl.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    # Pure-python kernels are selected at import time when the extension is
    # missing, so a Cython-less build still produces a working package.
    extensions = []

setup(ext_modules=extensions)
