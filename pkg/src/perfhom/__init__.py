"""Numerical homogenization of elliptic problems in domains with small critical holes.

Submodules are imported on demand so that ``perfhom.cli`` can configure
thread counts before numerical libraries load.
"""

__version__ = "0.1.0"
