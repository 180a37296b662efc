"""Kernel backend selection.

The compiled extension is used when it imports cleanly; otherwise the numpy
fallback takes over. Set ``CACC_BACKEND=python`` to force the fallback.
"""

import importlib
import os

from . import _kernels_py


def _load(name):
    if name == "python":
        return _kernels_py, "python"
    if name == "compiled":
        return importlib.import_module("cacc._kernels"), "compiled"
    raise ValueError(f"unknown backend {name!r}; expected 'compiled' or 'python'")


def _initial():
    requested = os.environ.get("CACC_BACKEND", "auto").lower()
    if requested != "auto":
        return _load(requested)
    try:
        return _load("compiled")
    except ImportError:
        return _load("python")


_module, _active = _initial()


def active():
    """Name of the backend currently serving kernel calls."""
    return _active


def available():
    names = ["python"]
    try:
        _load("compiled")
        names.insert(0, "compiled")
    except ImportError:
        pass
    return names


def use(name):
    """Switch backend at runtime (mostly for benchmarks and equivalence tests)."""
    global _module, _active
    _module, _active = _load(name)


def _dispatch(name):
    def call(*args):
        return getattr(_module, name)(*args)

    call.__name__ = name
    return call


im2col = _dispatch("im2col")
col2im = _dispatch("col2im")
maxpool2_forward = _dispatch("maxpool2_forward")
maxpool2_backward = _dispatch("maxpool2_backward")
upsample2_forward = _dispatch("upsample2_forward")
upsample2_backward = _dispatch("upsample2_backward")
