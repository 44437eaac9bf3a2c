#! /usr/bin/env python
# -*- coding: utf-8 -*-
#
#  This file is part of advmask-works.
#
#  advmask-works finds adversarial key points in images and turns them
#  into structured occlusion masks for classifier training.
#
#  Licensed under the Apache License, Version 2.0 (the "License");
#  you may not use this file except in compliance with the License.
#  You may obtain a copy of the License at
#
#      http://www.apache.org/licenses/LICENSE-2.0
#
#  Unless required by applicable law or agreed to in writing, software
#  distributed under the License is distributed on an "AS IS" BASIS,
#  WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
#  See the License for the specific language governing permissions and
#  limitations under the License.
#
#  NOTES
#
#  Create source distribution tarball:
#    python setup.py sdist --formats=gztar
#
#  Run the test suite:
#    python -m unittest discover -s src
#  Or:
#    pytest src
#
#  Install:
#    pip install .
#

import sys
import os
sys.path.insert(0, os.path.abspath('src'))

from setuptools import setup

from advmask_works import get_version

def read(fname):
    """Utility function to read the README file."""
    return open(os.path.join(os.path.dirname(__file__), fname)).read()

if __name__=='__main__':
    setup(
        name = 'advmask-works',
        version = get_version(),
        license = 'Apache License version 2',
        description = 'Adversarial key points turned into structured occlusion masks for training image classifiers.',
        long_description = read('README.rst'),
        platforms=['any'],
        classifiers = [
            'Development Status :: 4 - Beta',
            'Environment :: Console',
            'Intended Audience :: Science/Research',
            'License :: OSI Approved :: Apache Software License',
            'Natural Language :: English',
            'Operating System :: OS Independent',
            'Programming Language :: Python :: 3',
            'Topic :: Scientific/Engineering :: Artificial Intelligence',
            'Topic :: Scientific/Engineering :: Image Recognition',
        ],
        package_dir = {'': 'src'},
        packages = ['advmask_works', 'advmask_works.tests'],
        include_package_data = True,
        python_requires = '>=3.8',
        install_requires=read('requirements.txt').splitlines(),
        extras_require = {'test': ['pytest']},
        entry_points = {
            'console_scripts': ['advmask = advmask_works.cli:main'],
        },
        zip_safe = False,
    )
