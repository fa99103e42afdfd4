#!/usr/bin/env python

"""
Install the cdsl package.

Local install for developers:
    conda install python numpy scipy dill typer loguru pyyaml pytest -c conda-forge
    pip install -e . --no-deps
"""

import os
import re
from setuptools import setup

# parse version from init.py
with open("cdsl/__init__.py") as init:
    CUR_VERSION = re.search(
        r"^__version__ = ['\"]([^'\"]*)['\"]",
        init.read(),
        re.M,
    ).group(1)

with open("README.md", encoding="utf-8") as readme:
    LONG_DESCRIPTION = readme.read()


# nasty workaround for RTD low memory limits
on_rtd = os.environ.get('READTHEDOCS') == 'True'
if on_rtd:
    install_requires = []
else:
    install_requires = [
        "numpy>=1.21",      # default_rng, SeedSequence.spawn
        "scipy",
        "dill",             # pipeline worker payloads
        "typer",
        "loguru",
        "pyyaml",           # options.yaml
    ]


# setup installation
setup(
    name="cdsl",
    packages=["cdsl"],
    version=CUR_VERSION,
    description="Cross-domain self-supervised pre-training for few-shot domain adaptation",
    long_description=LONG_DESCRIPTION,
    long_description_content_type="text/markdown",
    author="cdsl developers",
    author_email="...",
    python_requires=">=3.8",
    install_requires=install_requires,
    extras_require={"test": ["pytest"]},
    entry_points={
        'console_scripts': ['cdsl = cdsl.__main__:app']},
    license='GPL',
    classifiers=[
        'Programming Language :: Python :: 3',
        'Topic :: Scientific/Engineering :: Artificial Intelligence',
    ],
)
