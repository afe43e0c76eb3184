#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""The setup script."""

from setuptools import setup, find_packages

with open('README.rst') as readme_file:
    readme = readme_file.read()

with open('HISTORY.rst') as history_file:
    history = history_file.read()

requirements = ['torch>=2.0',
                'torchvision>=0.15',
                'einops',
                'fvcore',
                'numpy',
                'scikit-image>=0.19',
                'opencv-python-headless',
                'Pillow>=10.1',
                'PyYAML',
                'pandas',
                'matplotlib',
                'tqdm',
                'requests',
                'python-dateutil']

extra_requirements = {'lpips': ['lpips']}

setup_requirements = ['pytest-runner', ]

test_requirements = ['pytest>=3', ]

setup(
    author="Sjoerd Kerkstra",
    author_email='sjoerdk1@xs4all.nl',
    classifiers=[
        'Development Status :: 2 - Pre-Alpha',
        'Intended Audience :: Science/Research',
        'License :: OSI Approved :: GNU General Public License v3 (GPLv3)',
        'Natural Language :: English',
        'Programming Language :: Python :: 3.8',
        'Topic :: Scientific/Engineering :: Image Processing',
    ],
    description="Joint watermark and noise removal with a hybrid dual-decoder network",
    entry_points={
        'console_scripts': [
            'hybridwm=hybridwm.cli:main',
        ],
    },
    install_requires=requirements,
    extras_require=extra_requirements,
    license="GNU General Public License v3",
    long_description=readme + '\n\n' + history,
    include_package_data=True,
    keywords='hybridwm watermark removal denoising',
    name='hybridwm',
    packages=find_packages(include=['hybridwm', 'hybridwm.*']),
    python_requires='>=3.8',
    setup_requires=setup_requirements,
    test_suite='tests',
    tests_require=test_requirements,
    url='https://github.com/SabGN/hybridwm',
    version='0.1.0',
    zip_safe=False,
)
