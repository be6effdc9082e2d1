# Sphinx configuration for the ildm documentation.
# Build from the repository root with: sphinx-build -b html docs/source docs/build

import os
import sys

# Import the package from the working tree
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "..")))

import ildm

# -- Project information -----------------------------------------------------

project = 'intrinsic-ldm'
copyright = '2024, ILDM Team'
author = 'ILDM Team'
release = ildm.__version__

# -- General configuration ---------------------------------------------------

extensions = [
    'sphinx.ext.autodoc',
    'sphinx_autodoc_typehints'
]

autodoc_mock_imports = ['torch']
autodoc_member_order = 'bysource'

templates_path = []
exclude_patterns = []

# -- Options for HTML output -------------------------------------------------

html_theme = 'sphinx_rtd_theme'
