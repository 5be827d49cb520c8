import os

from setuptools import setup

ext_modules = []
if os.environ.get("RISKORACLE_NO_EXT", "") != "1":
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [Extension("riskoracle._kernels", ["src/riskoracle/_kernels.pyx"],
                       include_dirs=[numpy.get_include()],
                       extra_compile_args=["-O3"])],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        # no Cython/numpy at build time: the numpy fallback is used
        ext_modules = []

setup(ext_modules=ext_modules)
