"""Pixelwise non-local means with the classic Gaussian patch kernel."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sonoct import _backend


class GridSizeError(ValueError):
    pass


@dataclass(frozen=True)
class NlmParams:
    patch_radius: int = 2
    search_radius: int = 5
    h: float = 0.5

    def __post_init__(self):
        if self.patch_radius < 0 or self.search_radius < self.patch_radius:
            raise ValueError("need 0 <= patch_radius <= search_radius")
        if not self.h > 0:
            raise ValueError("h must be positive")


def nlm_denoise(f, p: NlmParams, backend=None) -> np.ndarray:
    """``u_i = sum_j w_ij f_j / sum_j w_ij`` over the (clipped) search window.

    ``w_ij = exp(-||P_i - P_j||^2 / (h^2 |P|))`` with patches taken from the
    reflect-padded image; the pixel itself is included with weight 1.
    """
    f = np.ascontiguousarray(f, dtype=np.float64)
    rows, cols = f.shape
    pr = p.patch_radius
    if min(rows, cols) <= 2 * pr:
        raise GridSizeError(f"{rows}x{cols} grid too small for patch radius {pr}")
    padded = np.ascontiguousarray(np.pad(f, pr, mode="reflect"))
    k = _backend.kernels if backend is None else _backend.get(backend)
    return k.nlm(padded, rows, cols, pr, p.search_radius, float(p.h))
