from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # the numpy fallback in rfidlab._kernels is used instead
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "rfidlab._kernels._ckernels",
                ["src/rfidlab/_kernels/_ckernels.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
