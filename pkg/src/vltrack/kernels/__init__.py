"""Convolution kernel backends.

The compiled extension (``_native``) is used when it imports; otherwise the
numpy implementation in ``_numpy`` takes over. ``VLT_KERNELS=python`` forces
the fallback. :func:`use_backend` switches at runtime, mainly for tests and
the benchmark.
"""
import logging
import os

from . import _numpy

logger = logging.getLogger(__name__)

try:
    from . import _native
except ImportError:  # extension not built
    _native = None

_FUNCS = ("im2col", "col2im", "depthwise_forward", "depthwise_grad_input", "depthwise_grad_weight")

BACKENDS = {"python": _numpy}
if _native is not None:
    BACKENDS["native"] = _native

BACKEND = ""


class _Switch:
    """Returned by :func:`use_backend`; as a context manager it restores the previous backend."""

    def __init__(self, previous):
        self.previous = previous

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        if self.previous:
            use_backend(self.previous)


def use_backend(name):
    """Route the module-level kernel functions to backend ``name``."""
    global BACKEND
    if name not in BACKENDS:
        raise ValueError(f"kernel backend {name!r} unavailable; have {sorted(BACKENDS)}")
    previous = BACKEND
    mod = BACKENDS[name]
    for f in _FUNCS:
        globals()[f] = getattr(mod, f)
    BACKEND = name
    return _Switch(previous)


def available_backends():
    return sorted(BACKENDS)


_requested = os.environ.get("VLT_KERNELS", "native" if _native is not None else "python")
if _requested not in BACKENDS:
    logger.warning("VLT_KERNELS=%s unavailable, using python kernels", _requested)
    _requested = "python"
use_backend(_requested)
