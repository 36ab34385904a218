"""Hot kernels: compiled extension when available, numpy fallback otherwise.

Set ``PARN_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _pykernels

STATUS_OK = _pykernels.STATUS_OK
STATUS_MAXITER = _pykernels.STATUS_MAXITER
STATUS_DEGENERATE = _pykernels.STATUS_DEGENERATE
STATUS_ILLCOND = _pykernels.STATUS_ILLCOND
COND_LIMIT = _pykernels.COND_LIMIT

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    BACKENDS["cython"] = _ckernels

if _ckernels is not None and not os.environ.get("PARN_PURE_PYTHON"):
    BACKEND = "cython"
else:
    BACKEND = "python"

_active = BACKENDS[BACKEND]
kalman_track = _active.kalman_track
gauss_newton_batch = _active.gauss_newton_batch


def get_backend(name):
    """Return the kernel module registered under ``name``."""
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} not available; have {sorted(BACKENDS)}") from None
