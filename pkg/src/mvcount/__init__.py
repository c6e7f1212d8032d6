"""Multi-view crowd counting on a common ground plane.

Per-camera maps are projected onto the scene's average-height plane,
normalized, and fused into a scene-level density map.  The package bundles
the camera geometry, differentiable projection, density/metric utilities,
scale- and rotation-selection modules, toy trainable fusion pipelines, and a
synthetic multi-view scene simulator, plus a CLI (``mvcount``).

The hot kernels (convolution, pooling, bilinear resampling) run through a
compiled Cython extension when available; ``mvcount.kernel_backend()``
reports which implementation was selected.
"""

from ._kernels import BACKEND as _BACKEND
from .geometry import CameraModel, SceneConfig
from .maps import Map2D, read_map, write_map

__version__ = "0.1.0"

__all__ = [
    "CameraModel",
    "SceneConfig",
    "Map2D",
    "read_map",
    "write_map",
    "kernel_backend",
    "__version__",
]


def kernel_backend() -> str:
    """Name of the active kernel implementation: "cython" or "numpy"."""
    return _BACKEND
