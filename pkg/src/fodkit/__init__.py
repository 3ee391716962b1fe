"""Fiber orientation distribution toolkit.

Spherical harmonics on the sphere, synthetic multi-tissue diffusion
phantoms, constrained spherical deconvolution (single-tissue, multi-shell
multi-tissue and single-shell three-tissue), peak extraction, agreement
metrics, voxel-wise SH regressors and the experiment drivers built on them.
"""
from . import errors
from ._kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["errors", "BACKEND", "__version__"]
