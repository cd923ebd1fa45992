"""Build script: compiles the optional walk kernel when Cython is available.

The package is fully functional without the extension (a pure-Python twin
is selected at import time); set NEGTREE_PURE_PYTHON=1 to skip compilation.
"""

import os

from setuptools import setup
from setuptools.command.build_ext import build_ext


class optional_build_ext(build_ext):
    """Build the extension if possible, fall back to pure Python otherwise."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing, etc.
            print(f"negtree: skipping compiled kernels ({exc!r}); "
                  "using pure-Python fallback")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"negtree: failed to build {ext.name} ({exc!r}); "
                  "using pure-Python fallback")


ext_modules = []
if os.environ.get("NEGTREE_PURE_PYTHON") != "1":
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "negtree._kernels._walk",
                    ["src/negtree/_kernels/_walk.pyx"],
                    include_dirs=[numpy.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules, cmdclass={"build_ext": optional_build_ext})
