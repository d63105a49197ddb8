"""Model-serving sidecar for in-context tabular classification."""

from .app import SidecarConfig, create_app
from .models import BACKENDS, MAX_CLASSES, MAX_DIM, MAX_SUPPORT
from .sessions import SessionStore

__version__ = "0.1.0"

__all__ = [
    "BACKENDS",
    "MAX_CLASSES",
    "MAX_DIM",
    "MAX_SUPPORT",
    "SessionStore",
    "SidecarConfig",
    "create_app",
    "__version__",
]
