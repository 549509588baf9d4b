"""Kernel backend selection: compiled Cython core with a numpy fallback.

The compiled extension is used when importable; set SSSPLAT_FORCE_BACKEND to
"fallback" or "compiled" to override (the benchmark uses this to compare).
"""

import os

from . import _fallback

RADIUS_SIGMA = _fallback.RADIUS_SIGMA
G_FLOOR = _fallback.G_FLOOR
ALPHA_MAX = _fallback.ALPHA_MAX
T_CUTOFF = _fallback.T_CUTOFF

_forced = os.environ.get("SSSPLAT_FORCE_BACKEND", "").strip().lower()

if _forced == "fallback":
    _impl = _fallback
else:
    try:
        from . import _core as _impl  # type: ignore[attr-defined]
    except ImportError:
        if _forced == "compiled":
            raise
        _impl = _fallback

BACKEND = _impl.BACKEND
composite_forward = _impl.composite_forward
composite_backward = _impl.composite_backward
raytrace_taus = _impl.raytrace_taus


def get_backend(name: str):
    """Explicit backend module by name (for tests and the benchmark)."""
    if name == "fallback":
        return _fallback
    if name == "compiled":
        from . import _core
        return _core
    raise ValueError(f"unknown backend {name!r}")
