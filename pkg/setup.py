import os

from setuptools import setup

ext_modules = []
if os.environ.get("POINTDENOISE_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "pointdenoise._geomkern",
                    ["src/pointdenoise/_geomkern.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        # numpy fallback is picked up at import time
        ext_modules = []

setup(ext_modules=ext_modules)
