import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atomreload import kernels
from atomreload._jit import HAVE_NUMBA
from atomreload.prep import TrapModel

needs_numba = pytest.mark.skipif(not HAVE_NUMBA, reason="numba not installed")

cols = st.lists(st.integers(0, 119), max_size=60).map(lambda v: np.array(sorted(set(v)), dtype=np.int64))


@needs_numba
@given(cols, cols)
@settings(max_examples=200, deadline=None)
def test_match_row_backends_agree(src, tgt):
    a = kernels.match_row(src, tgt, backend="numba")
    b = kernels.match_row(src, tgt, backend="numpy")
    assert a[2] == b[2]
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


@needs_numba
def test_recapture_backends_agree():
    rng = np.random.default_rng(0)
    trap = TrapModel()
    pos = rng.normal(0, 1e-7, (5000, 3))
    vel = rng.normal(0, 0.04, (5000, 3))
    g = trap.gravity
    for t in (0.0, 10e-6, 40e-6):
        a = kernels.recapture_mask(pos, vel, t, g, trap.mass, trap.depth_j, trap.waist, trap.rayleigh, "numba")
        b = kernels.recapture_mask(pos, vel, t, g, trap.mass, trap.depth_j, trap.waist, trap.rayleigh, "numpy")
        assert np.array_equal(a, b)


def test_match_row_empty_inputs():
    s, t, c = kernels.match_row(np.array([], dtype=np.int64), np.array([3, 5]))
    assert s.size == 0 and c == 2 * kernels.SKIP_PENALTY
    s, t, c = kernels.match_row(np.array([1, 2]), np.array([], dtype=np.int64))
    assert s.size == 0 and c == 0


def _backend_in_subprocess(value):
    import os
    import subprocess
    import sys
    env = dict(os.environ, ATOMRELOAD_BACKEND=value)
    return subprocess.run([sys.executable, "-c", "from atomreload import kernels; print(kernels.BACKEND)"],
                          env=env, capture_output=True, text=True)


def test_env_flag_selects_numpy():
    out = _backend_in_subprocess("numpy")
    assert out.returncode == 0
    assert out.stdout.strip() == "numpy"


def test_env_flag_rejects_unknown_backend():
    out = _backend_in_subprocess("fortran")
    assert out.returncode != 0
    assert "ATOMRELOAD_BACKEND" in out.stderr
