"""Numerical kernels with a compiled fast path and a NumPy fallback.

The compiled Cython extension (``wsag.kernels._core``) and the pure NumPy
module (``wsag.kernels.pyref``) implement the same masked-convolution
contract. Selection happens at import: the extension is used when present
unless overridden. The ``WSAG_BACKEND`` environment variable or
:func:`set_backend` pick one explicitly ("compiled", "python", or "auto").
"""

from __future__ import annotations

import os

from ..errors import InvalidArgument
from . import pyref

_CHOICES = ("auto", "python", "compiled")
_active = None


def _load(choice: str):
    if choice not in _CHOICES:
        raise InvalidArgument(f"unknown kernel backend {choice!r}; pick one of {_CHOICES}")
    if choice == "python":
        return pyref
    try:
        from . import _core
        return _core
    except ImportError:
        if choice == "compiled":
            raise InvalidArgument(
                "compiled kernel backend requested but the extension is not built"
            )
        return pyref


def set_backend(choice: str) -> str:
    """Select the kernel backend for this process. Returns the backend name."""
    global _active
    _active = _load(choice)
    return _active.NAME


def get_backend():
    """The active backend module (selecting the default on first use)."""
    global _active
    if _active is None:
        set_backend(os.environ.get("WSAG_BACKEND", "auto"))
    return _active


def backend_name() -> str:
    return get_backend().NAME


def conv3x3_forward(x, w, b, mask):
    return get_backend().conv3x3_forward(x, w, b, mask)


def conv3x3_backward(x, w, mask, grad_y):
    return get_backend().conv3x3_backward(x, w, mask, grad_y)


def conv3x3_single_channel(x_1ch, w_1ch, mask):
    return get_backend().conv3x3_single_channel(x_1ch, w_1ch, mask)
