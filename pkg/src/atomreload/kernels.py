"""Hot loops: order-preserving matching DP and the recapture energy test.

Every kernel exists twice.  The ``*_loop`` functions are scalar loops that
numba compiles; the ``*_numpy`` functions are vectorised and serve as the
fallback.  Both produce identical results, which the test-suite checks.
"""

import numpy as np

from atomreload._jit import BACKEND, njit

# Penalty for leaving a target unfilled.  Large enough that coverage always
# dominates displacement (row width is far below this).
SKIP_PENALTY = 1_000_000_000


def _dp_table_loop(src, tgt, big):
    n = src.shape[0]
    m = tgt.shape[0]
    D = np.empty((n + 1, m + 1), dtype=np.int64)
    for j in range(m + 1):
        D[0, j] = j * big
    for i in range(1, n + 1):
        D[i, 0] = 0
        a = src[i - 1]
        for j in range(1, m + 1):
            best = D[i - 1, j]
            d = a - tgt[j - 1]
            if d < 0:
                d = -d
            c = D[i - 1, j - 1] + d
            if c < best:
                best = c
            s = D[i, j - 1] + big
            if s < best:
                best = s
            D[i, j] = best
    return D


def _backtrack_loop(D, src, tgt, big):
    i = src.shape[0]
    j = tgt.shape[0]
    out_s = np.empty(min(i, j), dtype=np.int64)
    out_t = np.empty(min(i, j), dtype=np.int64)
    k = 0
    while i > 0 and j > 0:
        here = D[i, j]
        if D[i - 1, j] == here:
            i -= 1
            continue
        d = src[i - 1] - tgt[j - 1]
        if d < 0:
            d = -d
        if D[i - 1, j - 1] + d == here:
            out_s[k] = i - 1
            out_t[k] = j - 1
            k += 1
            i -= 1
            j -= 1
        else:
            j -= 1
    return out_s[:k][::-1].copy(), out_t[:k][::-1].copy()


def _dp_table_numpy(src, tgt, big):
    n, m = src.shape[0], tgt.shape[0]
    ramp = np.arange(m + 1, dtype=np.int64) * big
    D = np.empty((n + 1, m + 1), dtype=np.int64)
    D[0] = ramp
    cand = np.empty(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        prev = D[i - 1]
        cand[0] = 0
        np.minimum(prev[1:], prev[:-1] + np.abs(src[i - 1] - tgt), out=cand[1:])
        # skipping targets costs `big` each: a running min over shifted costs
        D[i] = np.minimum.accumulate(cand - ramp) + ramp
    return D


def _match_row_numpy(src, tgt, big):
    D = _dp_table_numpy(src, tgt, big)
    s, t = _backtrack_loop(D, src, tgt, big)
    return s, t, D[src.shape[0], tgt.shape[0]]


def _recapture_loop(pos, vel, t, g, mass, depth_j, waist, z_r):
    n = pos.shape[0]
    out = np.empty(n, dtype=np.bool_)
    for k in range(n):
        x = pos[k, 0] + vel[k, 0] * t + 0.5 * g[0] * t * t
        y = pos[k, 1] + vel[k, 1] * t + 0.5 * g[1] * t * t
        z = pos[k, 2] + vel[k, 2] * t + 0.5 * g[2] * t * t
        vx = vel[k, 0] + g[0] * t
        vy = vel[k, 1] + g[1] * t
        vz = vel[k, 2] + g[2] * t
        q = 1.0 + (z / z_r) ** 2
        u = -depth_j / q * np.exp(-2.0 * (x * x + y * y) / (waist * waist * q))
        e = 0.5 * mass * (vx * vx + vy * vy + vz * vz) + u
        out[k] = e < 0.0
    return out


def _recapture_numpy(pos, vel, t, g, mass, depth_j, waist, z_r):
    r = pos + vel * t + 0.5 * g * t * t
    v = vel + g * t
    q = 1.0 + (r[:, 2] / z_r) ** 2
    u = -depth_j / q * np.exp(-2.0 * (r[:, 0] ** 2 + r[:, 1] ** 2) / (waist * waist * q))
    e = 0.5 * mass * np.einsum("ij,ij->i", v, v) + u
    return e < 0.0


_dp_table_jit = njit(_dp_table_loop)
_backtrack_jit = njit(_backtrack_loop)


def _match_row_loop(src, tgt, big):
    D = _dp_table_jit(src, tgt, big)
    s, t = _backtrack_jit(D, src, tgt, big)
    return s, t, D[src.shape[0], tgt.shape[0]]


match_row_jit = njit(_match_row_loop)
recapture_jit = njit(_recapture_loop)


def match_row(src, tgt, big=SKIP_PENALTY, backend=None):
    """Order-preserving matching of sorted ``src`` onto sorted ``tgt``.

    Returns ``(src_idx, tgt_idx, cost)`` where ``cost`` counts ``big`` once
    per unfilled target plus the total absolute displacement.
    """
    src = np.ascontiguousarray(src, dtype=np.int64)
    tgt = np.ascontiguousarray(tgt, dtype=np.int64)
    backend = backend or BACKEND
    if backend == "numba":
        s, t, c = match_row_jit(src, tgt, np.int64(big))
    else:
        s, t, c = _match_row_numpy(src, tgt, big)
    return s, t, int(c)


def recapture_mask(pos, vel, t, g, mass, depth_j, waist, z_r, backend=None):
    """Boolean mask of atoms still bound after a ballistic flight of ``t`` s."""
    pos = np.ascontiguousarray(pos, dtype=np.float64)
    vel = np.ascontiguousarray(vel, dtype=np.float64)
    g = np.ascontiguousarray(g, dtype=np.float64)
    backend = backend or BACKEND
    if backend == "numba":
        return recapture_jit(pos, vel, float(t), g, float(mass), float(depth_j), float(waist), float(z_r))
    return _recapture_numpy(pos, vel, float(t), g, mass, depth_j, waist, z_r)
