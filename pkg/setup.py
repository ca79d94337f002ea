from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "rampmeter._core",
                ["src/rampmeter/_core.pyx"],
                extra_compile_args=["-O3"],
                optional=True,
            )
        ],
        language_level=3,
    )
except ImportError:
    # No Cython: install the pure-Python fallback only.
    ext_modules = []

setup(ext_modules=ext_modules)
