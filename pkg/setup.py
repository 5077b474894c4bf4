"""Build script: compiles the recurrence kernel extension when Cython is available.

Without Cython (or a C compiler) the install still succeeds and the package
falls back to the pure-numpy kernels at import time.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "gsaf._kernels._lstm_c",
                ["src/gsaf/_kernels/_lstm_c.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        language_level="3",
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
