"""Multimodal late fusion with adaptive token pooling, PCA signal balancing,
and hierarchical in-context classification."""

from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
