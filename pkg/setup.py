from setuptools import Extension, setup

try:
    import numpy as np
    from Cython.Build import cythonize
except ImportError:
    # the package still works through the numpy fallback kernels
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "latentbfr._ckernels",
                ["src/latentbfr/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3", "-ffp-contract=off"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
