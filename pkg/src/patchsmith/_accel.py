"""Backend switch for the numeric kernels.

Kernels come in two flavours: a numba ``@njit`` loop version and a pure
numpy version. ``PATCHSMITH_DISABLE_NUMBA=1`` (or a missing numba install)
selects numpy at import; :func:`set_backend` switches at runtime.
"""

from __future__ import annotations

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_DISABLED = os.environ.get("PATCHSMITH_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}
_backend = "numba" if (numba is not None and not _DISABLED) else "numpy"


def njit(fn):
    if numba is None:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


def backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and numba is None:
        raise RuntimeError("numba is not installed")
    _backend = name
