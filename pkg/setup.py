#!/usr/bin/env python

"""
Setting up program for statesoup.
"""

import re

import setuptools


def read_meta(name):
    """
    Returns a meta variable of the package without importing it.
    """
    with open('statesoup/__init__.py') as input_file:
        pattern = r"^__{0}__ = '([^']*)'".format(name)
        return re.search(pattern, input_file.read(), re.M).group(1)


setuptools.setup(
    name='statesoup',
    description='State soups: mixing and retrieving recurrent model states.',
    long_description=open('README.rst').read(),
    version=read_meta('version'),
    author=read_meta('author'),
    author_email=read_meta('author_email'),
    packages=['statesoup'],
    python_requires='>=3.8',
    install_requires=['numpy>=1.22', 'torch>=1.13', 'scipy>=1.7'],
    tests_require=['pytest', 'mock'],
    entry_points={
        'console_scripts': [
            'statesoup = statesoup.exp_harness:main',
        ],
    },
    classifiers=[
        'Development Status :: 3 - Alpha',
        'Environment :: Console',
        'Intended Audience :: Science/Research',
        'License :: OSI Approved :: MIT License',
        'Programming Language :: Python',
        'Programming Language :: Python :: 3',
        'Topic :: Scientific/Engineering :: Artificial Intelligence',
        'Topic :: Software Development :: Libraries :: Python Modules',
    ]
)
