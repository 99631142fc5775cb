"""Two-stage BM3D: grouped hard thresholding, then grouped empirical Wiener.

Groups are stacks of similar 8x8 blocks; the 3D transform is an
orthonormal 2D DCT-II per block followed by an orthonormal Haar transform
along the stack.  The group's overall mean (the DC coefficient of the
Haar average) passes both stages untouched, which makes the filter exact on
constant images and equivariant to adding a constant.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from sonoct import _backend


class GridSizeError(ValueError):
    pass


@dataclass(frozen=True)
class Bm3dParams:
    sigma: Optional[float] = None
    block: int = 8
    step: int = 3
    search: int = 19
    max_matches: int = 16
    hard_lambda3d: float = 2.7
    match_tau: Optional[float] = None

    def __post_init__(self):
        if self.sigma is not None and not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.block < 1 or self.block & (self.block - 1):
            raise ValueError("block size must be a power of two")
        if self.max_matches < 1 or self.max_matches & (self.max_matches - 1):
            raise ValueError("max_matches must be a power of two")
        if not 1 <= self.step <= self.block:
            raise ValueError("step must lie in [1, block]")

    def tau_for(self, sigma: float) -> float:
        """Mean squared block distance above which candidates are rejected."""
        return self.match_tau if self.match_tau is not None else 3.0 * sigma * sigma


@lru_cache(maxsize=None)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix ``C`` (``C @ x`` transforms a column)."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    c = np.sqrt(2.0 / n) * np.cos(np.pi * (2 * i + 1) * k / (2 * n))
    c[0] /= np.sqrt(2.0)
    return c


@lru_cache(maxsize=None)
def haar_matrix(n: int) -> np.ndarray:
    """Orthonormal Haar matrix for power-of-two ``n``; row 0 is the average."""
    if n == 1:
        return np.ones((1, 1))
    half = haar_matrix(n // 2)
    top = np.kron(half, [1.0, 1.0])
    bottom = np.kron(np.eye(n // 2), [1.0, -1.0])
    return np.vstack([top, bottom]) / np.sqrt(2.0)


def estimate_sigma(f) -> float:
    """Robust noise level from the diagonal Haar detail band (MAD / 0.6745)."""
    f = np.asarray(f, dtype=np.float64)
    r, c = (f.shape[0] // 2) * 2, (f.shape[1] // 2) * 2
    x = f[:r, :c]
    hh = (x[0::2, 0::2] - x[0::2, 1::2] - x[1::2, 0::2] + x[1::2, 1::2]) / 2.0
    return float(np.median(np.abs(hh)) / 0.6745)


def forward_3d(group: np.ndarray) -> np.ndarray:
    """``(k, g, b, b)`` stacks -> 3D transform coefficients, same shape."""
    c = dct_matrix(group.shape[-1])
    h = haar_matrix(group.shape[1])
    k, g, b, _ = group.shape
    d = np.matmul(np.matmul(c, group), c.T).reshape(k, g, b * b)
    return np.matmul(h, d).reshape(k, g, b, b)


def inverse_3d(coef: np.ndarray) -> np.ndarray:
    c = dct_matrix(coef.shape[-1])
    h = haar_matrix(coef.shape[1])
    k, g, b, _ = coef.shape
    d = np.matmul(h.T, coef.reshape(k, g, b * b)).reshape(k, g, b, b)
    return np.matmul(np.matmul(c.T, d), c)


def hard_threshold_groups(groups: np.ndarray, sigma: float, lam: float):
    """Stage-1 filtering of ``(k, g, b, b)`` groups.

    Returns the filtered groups and the number of retained coefficients per
    group (the group DC always counts as retained).
    """
    coef = forward_3d(groups)
    keep = np.abs(coef) >= lam * sigma
    keep[:, 0, 0, 0] = True
    coef = np.where(keep, coef, 0.0)
    return inverse_3d(coef), keep.sum(axis=(1, 2, 3))


def wiener_groups(noisy: np.ndarray, basic: np.ndarray, sigma: float):
    """Stage-2 filtering; returns filtered groups and ``sum(w^2)`` per group."""
    cn = forward_3d(noisy)
    cb = forward_3d(basic)
    w = cb * cb / (cb * cb + sigma * sigma)
    w[:, 0, 0, 0] = 1.0
    return inverse_3d(cn * w), np.sum(w * w, axis=(1, 2, 3))


def reference_positions(rows: int, cols: int, block: int, step: int) -> np.ndarray:
    """Top-left corners on the step grid, forcing the last row and column."""
    def axis(n):
        pos = list(range(0, n - block + 1, step))
        if pos[-1] != n - block:
            pos.append(n - block)
        return pos

    ry, rx = axis(rows), axis(cols)
    return np.array([(y, x) for y in ry for x in rx], dtype=np.int64)


def _pow2_floor(n: np.ndarray) -> np.ndarray:
    return (2 ** np.floor(np.log2(np.maximum(n, 1)))).astype(np.int64)


def _gather(img: np.ndarray, pos: np.ndarray, block: int) -> np.ndarray:
    """``pos`` is ``(k, g, 2)``; returns ``(k, g, block, block)`` copies."""
    off = np.arange(block)
    rr = pos[..., 0][..., None, None] + off[:, None]
    cc = pos[..., 1][..., None, None] + off[None, :]
    return img[rr, cc]


def _accumulate(num, den, pos, blocks, weights, block):
    rows, cols = num.shape
    off = np.arange(block)
    rr = pos[..., 0][..., None, None] + off[:, None]
    cc = pos[..., 1][..., None, None] + off[None, :]
    flat = (rr * cols + cc).ravel()
    w = np.broadcast_to(weights[:, None, None, None], blocks.shape).ravel()
    num += np.bincount(flat, weights=(blocks * weights[:, None, None, None]).ravel(), minlength=rows * cols).reshape(rows, cols)
    den += np.bincount(flat, weights=w, minlength=rows * cols).reshape(rows, cols)


def _stage(noisy, guide, p: Bm3dParams, sigma: float, kernels, wiener: bool):
    rows, cols = noisy.shape
    refs = reference_positions(rows, cols, p.block, p.step)
    pos, count = kernels.block_match(guide, refs, p.block, p.search, p.max_matches, p.tau_for(sigma))
    size = _pow2_floor(count)
    num = np.zeros_like(noisy)
    den = np.zeros_like(noisy)
    for g in np.unique(size):
        sel = size == g
        gpos = pos[sel, :g]
        groups = _gather(noisy, gpos, p.block)
        if wiener:
            filt, w2 = wiener_groups(groups, _gather(guide, gpos, p.block), sigma)
            weights = 1.0 / (sigma * sigma * w2)
        else:
            filt, n_kept = hard_threshold_groups(groups, sigma, p.hard_lambda3d)
            weights = 1.0 / (sigma * sigma * n_kept)
        _accumulate(num, den, gpos, filt, weights, p.block)
    return num / den


def bm3d_denoise(f, p: Bm3dParams = Bm3dParams(), backend=None, return_basic: bool = False):
    f = np.ascontiguousarray(f, dtype=np.float64)
    if f.ndim != 2 or min(f.shape) < 2 * p.block:
        raise GridSizeError(f"BM3D needs at least {2 * p.block} pixels per side, got {f.shape}")
    sigma = p.sigma if p.sigma is not None else estimate_sigma(f)
    if sigma <= 0:
        # noise-free input: nothing to remove
        return (f.copy(), f.copy()) if return_basic else f.copy()
    k = _backend.kernels if backend is None else _backend.get(backend)
    basic = _stage(f, f, p, sigma, k, wiener=False)
    final = _stage(f, basic, p, sigma, k, wiener=True)
    return (final, basic) if return_basic else final
