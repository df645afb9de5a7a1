"""Hot convolution/pooling kernels with import-time backend selection.

The compiled Cython module is used when it was built; otherwise the numpy
fallback is loaded. Setting ``CSEFSL_PURE_PYTHON=1`` forces the fallback.
"""

import importlib
import os

from . import _pykernels

BACKENDS = ("cython", "python")


def _load(name):
    if name == "python":
        return _pykernels
    if name == "cython":
        return importlib.import_module("._ckernels", __name__)
    raise ValueError(f"unknown kernel backend {name!r}; expected one of {BACKENDS}")


def available_backends():
    names = []
    for name in BACKENDS:
        try:
            _load(name)
        except ImportError:
            continue
        names.append(name)
    return names


def get_backend(name):
    """Return the kernel module for ``name`` ('cython' or 'python')."""
    return _load(name)


def set_backend(name):
    """Switch the process-wide kernel backend; returns the previous name."""
    global BACKEND, _impl
    previous = BACKEND
    _impl = _load(name)
    BACKEND = name
    return previous


if os.environ.get("CSEFSL_PURE_PYTHON", "") not in ("", "0"):
    BACKEND, _impl = "python", _pykernels
else:
    try:
        BACKEND, _impl = "cython", _load("cython")
    except ImportError:
        BACKEND, _impl = "python", _pykernels


def conv2d_forward(xp, w, stride):
    return _impl.conv2d_forward(xp, w, stride)


def conv2d_backward(xp, w, dout, stride):
    return _impl.conv2d_backward(xp, w, dout, stride)


def maxpool_forward(x, k, stride):
    return _impl.maxpool_forward(x, k, stride)


def maxpool_backward(dout, argmax, h, w):
    return _impl.maxpool_backward(dout, argmax, h, w)
