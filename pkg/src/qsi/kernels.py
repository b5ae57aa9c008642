"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the pure-Python
module takes over. ``use_backend`` switches explicitly (tests and benchmarks).
"""
import logging

from . import _kernels_py
from ._kernels_py import LR_FLOOR, V0

__all__ = ["BACKEND", "BACKENDS", "LR_FLOOR", "V0", "use_backend", "antibunched_accept",
           "start_stop_histogram", "propagate_labels"]

log = logging.getLogger(__name__)

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

BACKENDS = {"python": _kernels_py}
if _compiled is not None:
    BACKENDS["compiled"] = _compiled

_active = _compiled if _compiled is not None else _kernels_py
BACKEND = "compiled" if _compiled is not None else "python"
if _compiled is None:
    log.debug("qsi: compiled kernels unavailable, using pure-Python fallback")


def use_backend(name):
    """Select ``"compiled"`` or ``"python"``; returns the previous name."""
    global _active, BACKEND
    if name not in BACKENDS:
        raise ValueError(f"kernel backend {name!r} not available (have {sorted(BACKENDS)})")
    prev = BACKEND
    _active, BACKEND = BACKENDS[name], name
    return prev


def antibunched_accept(times, uniforms, tau_a):
    return _active.antibunched_accept(times, uniforms, tau_a)


def start_stop_histogram(starts, stops, delay, bin_width, nbins):
    return _active.start_stop_histogram(starts, stops, delay, bin_width, nbins)


def propagate_labels(roots, sigma, active, ny, nx, perms):
    return _active.propagate_labels(roots, sigma, active, ny, nx, perms)
