from setuptools import setup, Extension
from Cython.Build import cythonize

ext = Extension(
    "vnn._kernels._core",
    ["src/vnn/_kernels/_core.pyx"],
    extra_compile_args=["-O3"],
)

setup(ext_modules=cythonize(ext, language_level="3"))
