"""Build script. The compiled kernel extension is optional: if Cython or a C
compiler is unavailable the package installs anyway and falls back to the
numpy kernels at import time."""

import os

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    """Skip the extension instead of failing the whole install."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing
            print(f"warning: skipping compiled kernels ({exc}); "
                  "pure numpy fallback will be used")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"warning: failed to build {ext.name} ({exc}); "
                  "pure numpy fallback will be used")


# The extension is compiled on the machine that runs it (source install),
# so target the local CPU: the kernel loops are written to vectorize, and
# generic x86-64 codegen leaves that on the table. Set REFD_PORTABLE=1 when
# building an artifact that must run on other machines.
# Note: no -ffast-math anywhere -- the kernels guarantee exact zeros for
# self-matches and identical inputs, and value-unsafe FP breaks that.
# -fopenmp-simd honors the `omp simd` pragmas in _hot.h without pulling in
# any OpenMP runtime; a compiler without it just warns about the pragma and
# emits correct scalar code.
cflags = ["-O3", "-fopenmp-simd"]
if os.environ.get("REFD_PORTABLE") != "1":
    cflags.append("-march=native")

try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "refd.kernels._core",
                ["src/refd/kernels/_core.pyx"],
                depends=["src/refd/kernels/_hot.h"],
                include_dirs=["src/refd/kernels"],
                extra_compile_args=cflags,
            )
        ],
        compiler_directives={"language_level": 3},
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions, cmdclass={"build_ext": OptionalBuildExt})
