"""Kernel backend selection.

The compiled extension is preferred when present; DIETATTN_BACKEND=python
or DIETATTN_BACKEND=c forces a choice at import time. `use()` switches at
runtime, which the benchmark harness relies on to compare backends. All
call sites go through the module-level proxy `K` so a switch takes effect
immediately.
"""

import os

from . import _kernels_py

_modules = {"python": _kernels_py}
try:
    from . import _kernels_c
    _modules["c"] = _kernels_c
except ImportError:
    _kernels_c = None

_forced = os.environ.get("DIETATTN_BACKEND", "").strip().lower()
if _forced:
    if _forced not in ("c", "python"):
        raise RuntimeError(f"DIETATTN_BACKEND must be 'c' or 'python', got {_forced!r}")
    if _forced == "c" and "c" not in _modules:
        raise RuntimeError("DIETATTN_BACKEND=c but the compiled extension is not built")
    _active = _forced
else:
    _active = "c" if "c" in _modules else "python"


class _Proxy:
    """Forwards kernel lookups to the active backend module."""

    __slots__ = ()

    def __getattr__(self, name):
        return getattr(_modules[_active], name)


K = _Proxy()


def active():
    """Name of the backend currently in use ('c' or 'python')."""
    return _active


def available():
    return sorted(_modules)


def use(name):
    """Switch backends at runtime. Returns the previously active name."""
    global _active
    if name not in _modules:
        raise ValueError(f"backend {name!r} not available; have {available()}")
    prev = _active
    _active = name
    return prev
