"""Build script for the optional compiled kernels.

The package works without the extension: ``bpminer.kernels`` falls back to
the pure-Python implementations in ``bpminer._kernels_py`` when
``bpminer._kernels`` is not importable. The extension build is therefore
best-effort; a missing compiler or Cython only costs speed.
"""

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    """Build the extension if we can, fall back to pure Python if we can't."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # pragma: no cover - depends on toolchain
            self._warn(exc)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # pragma: no cover - depends on toolchain
            self._warn(exc)

    @staticmethod
    def _warn(exc):
        import warnings

        warnings.warn(
            f"bpminer: compiled kernels unavailable, using pure-Python "
            f"fallback ({exc})"
        )


def extensions():
    try:
        from Cython.Build import cythonize
    except ImportError:  # pragma: no cover - Cython missing at build time
        return []
    return cythonize(
        [Extension("bpminer._kernels", ["src/bpminer/_kernels.pyx"])],
        compiler_directives={"language_level": "3"},
    )


setup(
    ext_modules=extensions(),
    cmdclass={"build_ext": OptionalBuildExt},
)
