"""Build script for the optional compiled coordinate-descent kernel.

The package is fully functional without the extension (a numpy fallback is
selected at import time), so any build failure here should degrade, not
abort the install.  Set DPRKIT_SKIP_EXT=1 to skip the extension on purpose.
"""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("DPRKIT_SKIP_EXT") != "1":
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools.extension import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "dprkit._cd_kernel",
                    ["src/dprkit/_cd_kernel.pyx"],
                    include_dirs=[numpy.get_include()],
                )
            ],
            language_level=3,
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
