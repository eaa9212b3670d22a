"""Numba-JIT implementations of the hot kernels (row-parallel)."""

from __future__ import annotations

import math
import warnings

import numpy as np
from numba import NumbaWarning, njit, prange

# The threading layer probe warns on slightly-old TBB builds; the workqueue
# fallback it picks is fine for these kernels.
warnings.filterwarnings("ignore", category=NumbaWarning, message=".*TBB.*")


# Serial on purpose: one fused pass beats numpy's temporaries already, and
# thread dispatch costs more than the loop for typical frame sizes.
@njit(cache=True)
def stepping_frame(amp, vis, phase, theta):
    h, w = amp.shape
    out = np.empty((h, w), dtype=np.float64)
    for i in range(h):
        for j in range(w):
            out[i, j] = amp[i, j] * (1.0 + vis[i, j] * math.cos(theta + phase[i, j]))
    return out


@njit(cache=True, parallel=True)
def harmonic_sums(stack, cos_k, sin_k):
    n, h, w = stack.shape
    a0 = np.empty((h, w), dtype=np.float64)
    sc = np.empty((h, w), dtype=np.float64)
    ss = np.empty((h, w), dtype=np.float64)
    inv_n = 1.0 / n
    for i in prange(h):
        for j in range(w):
            acc = 0.0
            c = 0.0
            s = 0.0
            for k in range(n):
                y = stack[k, i, j]
                acc += y
                c += y * cos_k[k]
                s += y * sin_k[k]
            a0[i, j] = acc * inv_n
            sc[i, j] = c
            ss[i, j] = s
    return a0, sc, ss
