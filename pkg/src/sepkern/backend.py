"""Selects the separable-convolution kernel backend at import time.

The compiled Cython core is preferred when its extension module imported
cleanly; otherwise the bit-identical pure-numpy fallback is used. Override
with SEPKERN_BACKEND=ext|py. SEPKERN_THREADS caps the compiled core's
OpenMP worker count (0 or unset = auto); it is re-read on every call so
tests can vary it, and never changes numeric results.
"""

import os

from . import _sepconv_py

try:
    from . import _sepconv_cy
except ImportError:
    _sepconv_cy = None

_BACKENDS = {"py": _sepconv_py}
if _sepconv_cy is not None:
    _BACKENDS["ext"] = _sepconv_cy


def _select_default():
    forced = os.environ.get("SEPKERN_BACKEND", "").strip().lower()
    if forced in ("py", "python", "pure"):
        return "py"
    if forced in ("ext", "cy", "compiled"):
        if _sepconv_cy is None:
            raise RuntimeError(
                "SEPKERN_BACKEND=ext requested but the compiled core is not built"
            )
        return "ext"
    if forced:
        raise RuntimeError(f"unknown SEPKERN_BACKEND value {forced!r}")
    return "ext" if _sepconv_cy is not None else "py"


DEFAULT_BACKEND = _select_default()


def available_backends():
    return tuple(sorted(_BACKENDS))


def get_backend(name=None):
    key = DEFAULT_BACKEND if name is None else name
    try:
        return _BACKENDS[key]
    except KeyError:
        raise RuntimeError(f"backend {key!r} is not available") from None


_CPU_COUNT = os.cpu_count() or 1


def resolve_threads():
    """Worker count for the compiled core from SEPKERN_THREADS (0 = auto)."""
    raw = os.environ.get("SEPKERN_THREADS", "").strip()
    if not raw:
        return _CPU_COUNT
    try:
        n = int(raw)
    except ValueError:
        raise RuntimeError(f"SEPKERN_THREADS must be an integer, got {raw!r}")
    if n < 0:
        raise RuntimeError(f"SEPKERN_THREADS must be >= 0, got {n}")
    return n if n > 0 else _CPU_COUNT
