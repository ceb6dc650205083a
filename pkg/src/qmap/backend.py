"""Kernel backend selection.

Hot numeric kernels (2-D convolution, per-voxel curve fitting) exist in two
implementations: numba ``@njit`` loops and pure-numpy array code.  The active
backend is chosen once at import from the ``QMAP_NUMBA`` environment variable
and can be overridden at runtime with :func:`set_backend`:

* ``QMAP_NUMBA`` unset or ``1``  -> numba kernels when numba is importable
* ``QMAP_NUMBA=0``               -> pure-numpy fallback everywhere

``benchmarks/bench_backends.py`` times both paths side by side.
"""

from __future__ import annotations

import os

try:
    import numba  # noqa: F401

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only on minimal installs
    HAS_NUMBA = False

_VALID = ("numba", "numpy")


def _from_env() -> str:
    flag = os.environ.get("QMAP_NUMBA", "1").strip().lower()
    if flag in ("0", "false", "no", "off"):
        return "numpy"
    return "numba" if HAS_NUMBA else "numpy"


_BACKEND = _from_env()


def active_backend() -> str:
    """Name of the backend currently used by the hot kernels."""
    return _BACKEND


def set_backend(name: str) -> str:
    """Force a backend (``"numba"`` or ``"numpy"``); returns the previous one.

    Requesting numba without numba installed raises ``RuntimeError``.
    """
    global _BACKEND
    if name not in _VALID:
        raise ValueError(f"unknown backend {name!r}, expected one of {_VALID}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is not installed")
    previous = _BACKEND
    _BACKEND = name
    return previous


def use_numba() -> bool:
    return _BACKEND == "numba"
