"""Numba switch.

Hot kernels are written twice: an ``@njit`` version and a pure-numpy
version.  ``CANOPY_USE_NUMBA=0`` (or a missing numba install) selects the
numpy path everywhere.  Both paths must return identical integer results;
float results agree to rounding.
"""
import os

try:
    from numba import njit as _njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False
    _njit = None


def _env_enabled():
    val = os.environ.get("CANOPY_USE_NUMBA", "1").strip().lower()
    return val not in ("0", "false", "no", "off", "")


USE_NUMBA = HAVE_NUMBA and _env_enabled()


def njit(*args, **kw):
    """``numba.njit(cache=True)`` when available, identity otherwise."""
    if not HAVE_NUMBA:
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda f: f
    kw.setdefault("cache", True)
    return _njit(*args, **kw)


def use_numba(flag=None):
    """Return (and optionally override) the active backend flag."""
    global USE_NUMBA
    if flag is not None:
        USE_NUMBA = bool(flag) and HAVE_NUMBA
    return USE_NUMBA


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
