"""Selects the engine kernel: compiled extension when importable, else pure Python.

Set ``SDLATENCY_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _engine_py

try:
    if os.environ.get("SDLATENCY_PURE_PYTHON"):
        raise ImportError("pure-Python kernel requested")
    from . import _engine as _compiled
except ImportError:
    _compiled = None

COMPILED = _compiled is not None
kernel = _compiled if COMPILED else _engine_py


def available():
    """Mapping of kernel name to module for every kernel that can be loaded."""
    out = {"python": _engine_py}
    if _compiled is not None:
        out["compiled"] = _compiled
    return out
