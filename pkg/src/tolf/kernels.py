"""Hot-kernel dispatch: compiled extension when importable, numpy otherwise.

Set ``TOLF_PURE_PYTHON=1`` to force the numpy fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("TOLF_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py


def get_backend(name=None):
    """Return the kernel module for ``name`` ("python", "cython") or the active one."""
    if name is None:
        return _impl
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


def set_backend(name):
    """Switch the active backend at runtime; returns the previous name."""
    global _impl, BACKEND
    previous = BACKEND
    _impl = get_backend(name)
    BACKEND = name
    return previous


def mlp_forward(x, weights, biases):
    return _impl.mlp_forward(x, weights, biases)


def mlp_backward(gy, x, weights, hidden):
    return _impl.mlp_backward(gy, x, weights, hidden)


def iou_aligned(a, b):
    return _impl.iou_aligned(a, b)


def flow_inverse_forward(x, layers, bound):
    return _impl.flow_inverse_forward(x, layers, bound)


def flow_inverse_backward(gz, glog_det, caches):
    return _impl.flow_inverse_backward(gz, glog_det, caches)
