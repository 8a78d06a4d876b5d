"""Blend-kernel selection.

Set ``LOOPSPLAT_NUMBA=0`` to force the pure-numpy path; the numba path is
used otherwise when numba imports. ``LOOPSPLAT_THREADS`` sets the numba
worker count.
"""
import os

from . import blend_numpy

BACKENDS = {"numpy": blend_numpy}

try:
    import numba

    if "NUMBA_THREADING_LAYER" not in os.environ:
        # skip the TBB probe; workqueue is always available
        numba.config.THREADING_LAYER = "workqueue"

    from . import blend_numba

    BACKENDS["numba"] = blend_numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None


def _default_backend() -> str:
    flag = os.environ.get("LOOPSPLAT_NUMBA", "1").strip().lower()
    if flag in ("0", "false", "no", "off") or "numba" not in BACKENDS:
        return "numpy"
    return "numba"


_active = _default_backend()


def set_threads(n: int | None) -> None:
    if numba is not None and n:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


set_threads(os.environ.get("LOOPSPLAT_THREADS"))


def use_backend(name: str) -> None:
    global _active
    if name not in BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}")
    _active = name


def active_backend() -> str:
    return _active


def get(name: str | None = None):
    return BACKENDS[name or _active]
