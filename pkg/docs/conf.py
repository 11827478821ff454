# Sphinx configuration for the iib_descriptor documentation.
import os
import sys

# autodoc imports the package from the repository root
sys.path.insert(0, os.path.abspath('..'))

project = 'iib_descriptor'
copyright = '2024, the iib_descriptor developers'
author = 'the iib_descriptor developers'
release = '0.1.0'

extensions = ['sphinx.ext.autodoc']
exclude_patterns = ['_build']

html_theme = 'sphinx_rtd_theme'
