"""Total-variation (ROF) denoising by Chambolle's dual projection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sonoct import _backend


@dataclass(frozen=True)
class TvParams:
    lam: float
    iters: int = 100
    tau: float = 0.25

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if self.iters < 0:
            raise ValueError("iteration count must be non-negative")
        if not 0 < self.tau <= 0.25:
            raise ValueError("tau must lie in (0, 0.25]")


def gradient(u: np.ndarray):
    """Forward differences with a zero last row/column (Neumann)."""
    gx = np.zeros_like(u)
    gy = np.zeros_like(u)
    gx[:-1, :] = u[1:, :] - u[:-1, :]
    gy[:, :-1] = u[:, 1:] - u[:, :-1]
    return gx, gy


def total_variation(u: np.ndarray) -> float:
    gx, gy = gradient(np.asarray(u, dtype=np.float64))
    return float(np.sum(np.sqrt(gx * gx + gy * gy)))


def rof_objective(u, f, lam: float) -> float:
    """``0.5 * ||u - f||^2 + lam * TV(u)``."""
    u = np.asarray(u, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    return 0.5 * float(np.sum((u - f) ** 2)) + lam * total_variation(u)


def tv_denoise(f, p: TvParams, backend=None) -> np.ndarray:
    """Minimise the ROF energy with a fixed number of dual iterations."""
    k = _backend.kernels if backend is None else _backend.get(backend)
    f = np.ascontiguousarray(f, dtype=np.float64)
    return k.tv_chambolle(f, float(p.lam), float(p.tau), int(p.iters))
