"""Pure numpy implementations of the hot kernels.

Mirrors ``_ckernels.pyx`` operation for operation (same accumulation order),
so the two backends agree to rounding of ``exp``; TV, block matching and
direct correlation agree bit for bit.
"""
import numpy as np

NAME = "python"


def correlate_valid(padded, k):
    """``out[i, j] = sum_ab k[a, b] * padded[i + a, j + b]`` over the valid region."""
    kr, kc = k.shape
    h = padded.shape[0] - kr + 1
    w = padded.shape[1] - kc + 1
    out = np.zeros((h, w))
    for a in range(kr):
        for b in range(kc):
            if k[a, b] != 0.0:
                out += k[a, b] * padded[a:a + h, b:b + w]
    return out


def _grad(g):
    gx = np.zeros_like(g)
    gy = np.zeros_like(g)
    gx[:-1, :] = g[1:, :] - g[:-1, :]
    gy[:, :-1] = g[:, 1:] - g[:, :-1]
    return gx, gy


def _div(px, py):
    d = np.zeros_like(px)
    if px.shape[0] > 1:
        d[0, :] = px[0, :]
        d[1:-1, :] = px[1:-1, :] - px[:-2, :]
        d[-1, :] = -px[-2, :]
    e = np.zeros_like(py)
    if py.shape[1] > 1:
        e[:, 0] = py[:, 0]
        e[:, 1:-1] = py[:, 1:-1] - py[:, :-2]
        e[:, -1] = -py[:, -2]
    return d + e


def tv_chambolle(f, lam, tau, iters):
    f = np.ascontiguousarray(f, dtype=np.float64)
    px = np.zeros_like(f)
    py = np.zeros_like(f)
    inv_lam = 1.0 / lam
    for _ in range(iters):
        g = _div(px, py) - f * inv_lam
        gx, gy = _grad(g)
        norm = np.sqrt(gx * gx + gy * gy)
        den = 1.0 + tau * norm
        px = (px + tau * gx) / den
        py = (py + tau * gy) / den
    return f - lam * _div(px, py)


def nlm(padded, rows, cols, pr, sr, h):
    """Non-local means over a clipped search window.

    ``padded`` is the image reflect-padded by ``pr``.  Returns the filtered
    ``rows x cols`` image.
    """
    f = padded[pr:pr + rows, pr:pr + cols]
    width = 2 * pr + 1
    inv = 1.0 / (h * h * width * width)
    num = np.zeros((rows, cols))
    den = np.zeros((rows, cols))
    for dy in range(-sr, sr + 1):
        i0, i1 = max(0, -dy), min(rows, rows - dy)
        if i0 >= i1:
            continue
        for dx in range(-sr, sr + 1):
            j0, j1 = max(0, -dx), min(cols, cols - dx)
            if j0 >= j1:
                continue
            ni, nj = i1 - i0, j1 - j0
            a = padded[i0:i1 + 2 * pr, j0:j1 + 2 * pr]
            b = padded[i0 + dy:i1 + dy + 2 * pr, j0 + dx:j1 + dx + 2 * pr]
            d = b - a
            d = d * d
            col = d[0:ni, :].copy()
            for t in range(1, width):
                col += d[t:t + ni, :]
            dist = col[:, 0:nj].copy()
            for t in range(1, width):
                dist += col[:, t:t + nj]
            w = np.exp(-(dist * inv))
            num[i0:i1, j0:j1] += w * f[i0 + dy:i1 + dy, j0 + dx:j1 + dx]
            den[i0:i1, j0:j1] += w
    return num / den


def block_match(img, refs, block, search, max_matches, tau):
    """Per reference block, the best ``max_matches`` blocks by mean squared difference.

    ``refs`` is an ``(n, 2)`` int array of top-left corners.  Returns
    ``(pos, count)``: ``pos[k, m]`` the corner of match ``m`` (self first),
    ``count[k]`` the number of accepted matches (``<= max_matches``).
    Candidates with distance ``> tau`` are rejected; ties keep scan order.
    """
    img = np.ascontiguousarray(img, dtype=np.float64)
    refs = np.asarray(refs, dtype=np.int64)
    rows, cols = img.shape
    nr, nc = rows - block + 1, cols - block + 1
    n = refs.shape[0]
    width = 2 * search + 1
    scale = 1.0 / (block * block)
    dists = np.full((n, width * width), np.inf)
    ry, rx = refs[:, 0], refs[:, 1]
    for dy in range(-search, search + 1):
        i0, i1 = max(0, -dy), min(nr, nr - dy)
        if i0 >= i1:
            continue
        for dx in range(-search, search + 1):
            j0, j1 = max(0, -dx), min(nc, nc - dx)
            if j0 >= j1:
                continue
            ni, nj = i1 - i0, j1 - j0
            a = img[i0:i1 + block - 1, j0:j1 + block - 1]
            b = img[i0 + dy:i1 + dy + block - 1, j0 + dx:j1 + dx + block - 1]
            d = b - a
            d = d * d
            col = d[0:ni, :].copy()
            for t in range(1, block):
                col += d[t:t + ni, :]
            ssd = col[:, 0:nj].copy()
            for t in range(1, block):
                ssd += col[:, t:t + nj]
            ok = (ry >= i0) & (ry < i1) & (rx >= j0) & (rx < j1)
            o = (dy + search) * width + (dx + search)
            dists[ok, o] = ssd[ry[ok] - i0, rx[ok] - j0] * scale
    self_o = search * width + search
    dists[dists > tau] = np.inf
    dists[:, self_o] = -1.0  # self always ranks first
    order = np.argsort(dists, axis=1, kind="stable")[:, :max_matches]
    picked = np.take_along_axis(dists, order, axis=1)
    count = np.sum(np.isfinite(picked), axis=1).astype(np.int64)
    oy = order // width - search
    ox = order % width - search
    pos = np.stack([ry[:, None] + oy, rx[:, None] + ox], axis=-1)
    pos[~np.isfinite(picked)] = -1
    return pos.astype(np.int64), count


def conv3x3(x, w, bias, stride):
    """Zero-padded 3x3 convolution of one ``(ci, h, w)`` float32 image."""
    ci, h, wd = x.shape
    co = w.shape[0]
    ho, wo = h // stride, wd // stride
    xp = np.zeros((ci, h + 2, wd + 2), dtype=np.float32)
    xp[:, 1:-1, 1:-1] = x
    cols = np.empty((ci, 3, 3, ho, wo), dtype=np.float32)
    for a in range(3):
        for b in range(3):
            cols[:, a, b] = xp[:, a:a + stride * ho:stride, b:b + stride * wo:stride]
    out = w.reshape(co, -1) @ cols.reshape(ci * 9, ho * wo)
    out += bias[:, None]
    return out.reshape(co, ho, wo)
