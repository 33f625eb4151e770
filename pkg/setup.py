"""Build script: compiles the optional Cython kernel core.

The package works without the extension (numpy fallback is selected at
import time), so extension build failures are non-fatal by design.
"""

from setuptools import setup

try:
    import numpy
    from Cython.Build import cythonize
    from setuptools.extension import Extension

    extensions = cythonize(
        [
            Extension(
                "metacontrast.backend._ckernels",
                ["src/metacontrast/backend/_ckernels.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
