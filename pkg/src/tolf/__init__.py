"""Flow-based localization loss for tiny-object box regression, with a
synthetic benchmark, evaluation tools and a command-line front end.

``tolf.kernels.BACKEND`` names the active hot-kernel implementation.
"""
from . import kernels

__version__ = "0.1.0"

__all__ = ["kernels", "__version__"]
