from setuptools import Extension, setup

try:
    import numpy as np
    from Cython.Build import cythonize
except ImportError:
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "mdil._kernels",
                ["src/mdil/_kernels.pyx"],
                include_dirs=[np.get_include()],
                # no -ffast-math: col2im must keep IEEE addition order
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
