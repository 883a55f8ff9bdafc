from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "flowcodec.coder._rc",
                ["src/flowcodec/coder/_rc.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    # The package still works without the extension: flowcodec.coder falls
    # back to the pure-Python backend at import time.
    ext_modules = []

setup(ext_modules=ext_modules)
