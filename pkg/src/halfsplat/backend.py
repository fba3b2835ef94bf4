"""Blend-core selection: compiled extension when available, numpy otherwise.

Override with HALFSPLAT_BACKEND=cython|python; "auto" (default) prefers the
compiled core.
"""

import os

from . import _blend_py

try:
    from . import _blend_cy
except ImportError:
    _blend_cy = None

_forced = None


def available_backends():
    names = ["python"]
    if _blend_cy is not None:
        names.insert(0, "cython")
    return names


def set_backend(name):
    """Force a backend for this process ('cython', 'python', or None=auto)."""
    global _forced
    if name not in (None, "auto", "cython", "python"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "cython" and _blend_cy is None:
        raise RuntimeError("compiled blend core is not available")
    _forced = None if name in (None, "auto") else name


def backend_name():
    choice = _forced or os.environ.get("HALFSPLAT_BACKEND", "auto")
    if choice == "python":
        return "python"
    if choice == "cython":
        if _blend_cy is None:
            raise RuntimeError("HALFSPLAT_BACKEND=cython but the extension is missing")
        return "cython"
    return "cython" if _blend_cy is not None else "python"


def get_backend():
    return _blend_cy if backend_name() == "cython" else _blend_py
