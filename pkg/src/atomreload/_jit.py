"""Backend selection for the compiled kernels.

Set ``ATOMRELOAD_BACKEND=numpy`` to force the pure-numpy code path.  The
default is ``numba`` when it can be imported and ``numpy`` otherwise.  The
compiled variants are still built when numba is importable so the two paths
can be compared side by side.
"""

import os

ENV_FLAG = "ATOMRELOAD_BACKEND"
_CHOICES = ("numba", "numpy")

try:
    import numba as _numba
except ImportError:  # pragma: no cover - depends on environment
    _numba = None

HAVE_NUMBA = _numba is not None


def _select():
    want = os.environ.get(ENV_FLAG, "numba").strip().lower() or "numba"
    if want not in _CHOICES:
        raise ValueError(f"{ENV_FLAG} must be one of {_CHOICES}, got {want!r}")
    if want == "numba" and not HAVE_NUMBA:
        return "numpy"
    return want


BACKEND = _select()


def njit(fn):
    """Compile ``fn`` with numba if available, else return it unchanged."""
    if _numba is None:
        return fn
    return _numba.njit(cache=True)(fn)
