"""Pure-numpy reference implementations of the hot kernels."""

from __future__ import annotations

import numpy as np


def stepping_frame(amp: np.ndarray, vis: np.ndarray, phase: np.ndarray, theta: float) -> np.ndarray:
    """Expected counts amp * (1 + vis * cos(theta + phase)), elementwise."""
    return amp * (1.0 + vis * np.cos(theta + phase))


def harmonic_sums(stack: np.ndarray, cos_k: np.ndarray, sin_k: np.ndarray):
    """Per-pixel DC mean and first-harmonic quadrature sums of a step stack.

    ``stack`` is (N, H, W); ``cos_k``/``sin_k`` are the length-N basis
    samples cos(2*pi*k/N), sin(2*pi*k/N). Returns float64 maps
    (mean, sum_cos, sum_sin) of shape (H, W).
    """
    stack = np.asarray(stack, dtype=np.float64)
    a0 = stack.mean(axis=0)
    sc = np.tensordot(cos_k, stack, axes=(0, 0))
    ss = np.tensordot(sin_k, stack, axes=(0, 0))
    return a0, sc, ss
