# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels.  Same contracts and accumulation order as ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, exp, INFINITY

cnp.import_array()

NAME = "cython"


def correlate_valid(double[:, ::1] padded, double[:, ::1] k):
    cdef Py_ssize_t kr = k.shape[0], kc = k.shape[1]
    cdef Py_ssize_t h = padded.shape[0] - kr + 1
    cdef Py_ssize_t w = padded.shape[1] - kc + 1
    out_arr = np.zeros((h, w))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t a, b, i, j
    cdef double kv
    # tap-major order, matching the numpy fallback bit for bit
    for a in range(kr):
        for b in range(kc):
            kv = k[a, b]
            if kv == 0.0:
                continue
            for i in range(h):
                for j in range(w):
                    out[i, j] = out[i, j] + kv * padded[i + a, j + b]
    return out_arr


cdef void _div(double[:, ::1] px, double[:, ::1] py, double[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t n = px.shape[0], m = px.shape[1]
    cdef Py_ssize_t i, j
    cdef double d, e
    for i in range(n):
        for j in range(m):
            if n == 1:
                d = 0.0
            elif i == 0:
                d = px[0, j]
            elif i == n - 1:
                d = -px[n - 2, j]
            else:
                d = px[i, j] - px[i - 1, j]
            if m == 1:
                e = 0.0
            elif j == 0:
                e = py[i, 0]
            elif j == m - 1:
                e = -py[i, m - 2]
            else:
                e = py[i, j] - py[i, j - 1]
            out[i, j] = d + e


def tv_chambolle(f_in, double lam, double tau, Py_ssize_t iters):
    cdef double[:, ::1] f = np.ascontiguousarray(f_in, dtype=np.float64)
    cdef Py_ssize_t n = f.shape[0], m = f.shape[1]
    cdef double[:, ::1] px = np.zeros((n, m))
    cdef double[:, ::1] py = np.zeros((n, m))
    cdef double[:, ::1] g = np.zeros((n, m))
    cdef Py_ssize_t it, i, j
    cdef double inv_lam = 1.0 / lam
    cdef double gx, gy, den
    with nogil:
        for it in range(iters):
            _div(px, py, g)
            for i in range(n):
                for j in range(m):
                    g[i, j] = g[i, j] - f[i, j] * inv_lam
            for i in range(n):
                for j in range(m):
                    gx = g[i + 1, j] - g[i, j] if i < n - 1 else 0.0
                    gy = g[i, j + 1] - g[i, j] if j < m - 1 else 0.0
                    den = 1.0 + tau * sqrt(gx * gx + gy * gy)
                    px[i, j] = (px[i, j] + tau * gx) / den
                    py[i, j] = (py[i, j] + tau * gy) / den
        _div(px, py, g)
    out_arr = np.empty((n, m))
    cdef double[:, ::1] out = out_arr
    for i in range(n):
        for j in range(m):
            out[i, j] = f[i, j] - lam * g[i, j]
    return out_arr


def nlm(double[:, ::1] padded, Py_ssize_t rows, Py_ssize_t cols, Py_ssize_t pr, Py_ssize_t sr, double h):
    cdef Py_ssize_t width = 2 * pr + 1
    cdef double inv = 1.0 / (h * h * width * width)
    num_arr = np.zeros((rows, cols))
    den_arr = np.zeros((rows, cols))
    cdef double[:, ::1] num = num_arr
    cdef double[:, ::1] den = den_arr
    cdef double[:, ::1] d = np.empty((rows + 2 * pr, cols + 2 * pr))
    cdef double[:, ::1] col = np.empty((rows, cols + 2 * pr))
    cdef Py_ssize_t dy, dx, i0, i1, j0, j1, ni, nj, i, j, t
    cdef double diff, s, w
    with nogil:
        for dy in range(-sr, sr + 1):
            i0 = -dy if -dy > 0 else 0
            i1 = rows - dy if rows - dy < rows else rows
            if i0 >= i1:
                continue
            for dx in range(-sr, sr + 1):
                j0 = -dx if -dx > 0 else 0
                j1 = cols - dx if cols - dx < cols else cols
                if j0 >= j1:
                    continue
                ni = i1 - i0
                nj = j1 - j0
                for i in range(ni + 2 * pr):
                    for j in range(nj + 2 * pr):
                        diff = padded[i0 + dy + i, j0 + dx + j] - padded[i0 + i, j0 + j]
                        d[i, j] = diff * diff
                for i in range(ni):
                    for j in range(nj + 2 * pr):
                        s = d[i, j]
                        for t in range(1, width):
                            s = s + d[i + t, j]
                        col[i, j] = s
                for i in range(ni):
                    for j in range(nj):
                        s = col[i, j]
                        for t in range(1, width):
                            s = s + col[i, j + t]
                        w = exp(-(s * inv))
                        num[i0 + i, j0 + j] += w * padded[pr + i0 + dy + i, pr + j0 + dx + j]
                        den[i0 + i, j0 + j] += w
        for i in range(rows):
            for j in range(cols):
                num[i, j] = num[i, j] / den[i, j]
    return num_arr


def block_match(img_in, refs_in, Py_ssize_t block, Py_ssize_t search, Py_ssize_t max_matches, double tau):
    cdef double[:, ::1] img = np.ascontiguousarray(img_in, dtype=np.float64)
    cdef long long[:, ::1] refs = np.ascontiguousarray(refs_in, dtype=np.int64)
    cdef Py_ssize_t rows = img.shape[0], cols = img.shape[1]
    cdef Py_ssize_t nr = rows - block + 1, nc = cols - block + 1
    cdef Py_ssize_t n = refs.shape[0]
    cdef double scale = 1.0 / (block * block)
    pos_arr = np.full((n, max_matches, 2), -1, dtype=np.int64)
    count_arr = np.zeros(n, dtype=np.int64)
    cdef long long[:, :, ::1] pos = pos_arr
    cdef long long[::1] count = count_arr
    cdef double[::1] best = np.empty(max_matches)
    cdef long long[::1] by = np.empty(max_matches, dtype=np.int64)
    cdef long long[::1] bx = np.empty(max_matches, dtype=np.int64)
    cdef Py_ssize_t k, ry, rx, dy, dx, cy, cx, a, b, filled, q
    cdef double diff, s, t, dist, bound
    with nogil:
        for k in range(n):
            ry = refs[k, 0]
            rx = refs[k, 1]
            best[0] = -1.0
            by[0] = ry
            bx[0] = rx
            filled = 1
            for dy in range(-search, search + 1):
                cy = ry + dy
                if cy < 0 or cy >= nr:
                    continue
                for dx in range(-search, search + 1):
                    cx = rx + dx
                    if cx < 0 or cx >= nc or (dy == 0 and dx == 0):
                        continue
                    bound = tau if filled < max_matches or best[filled - 1] > tau else best[filled - 1]
                    # column sums first, then across columns: same order as the numpy path.
                    # Partial sums only grow, so exceeding the bound early is final.
                    s = 0.0
                    for b in range(block):
                        diff = img[cy, cx + b] - img[ry, rx + b]
                        t = diff * diff
                        for a in range(1, block):
                            diff = img[cy + a, cx + b] - img[ry + a, rx + b]
                            t = t + diff * diff
                        s = t if b == 0 else s + t
                        if s * scale > bound:
                            break
                    if s * scale > bound:
                        continue
                    dist = s * scale
                    if dist > tau:
                        continue
                    if filled == max_matches and dist >= best[filled - 1]:
                        continue
                    q = filled if filled < max_matches else max_matches - 1
                    while q > 1 and best[q - 1] > dist:
                        if q < max_matches:
                            best[q] = best[q - 1]
                            by[q] = by[q - 1]
                            bx[q] = bx[q - 1]
                        q -= 1
                    best[q] = dist
                    by[q] = cy
                    bx[q] = cx
                    if filled < max_matches:
                        filled += 1
            count[k] = filled
            for q in range(filled):
                pos[k, q, 0] = by[q]
                pos[k, q, 1] = bx[q]
    return pos_arr, count_arr


def conv3x3(float[:, :, ::1] x, float[:, :, :, ::1] w, float[::1] bias, int stride):
    """Zero-padded 3x3 convolution of one ``(ci, h, w)`` image, float32.

    Output is ``(co, h // stride, w // stride)``.  The patch matrix is filled
    in C and multiplied by the weights with one BLAS GEMM.
    """
    cdef Py_ssize_t ci = x.shape[0], h = x.shape[1], wd = x.shape[2]
    cdef Py_ssize_t co = w.shape[0]
    cdef Py_ssize_t ho = h // stride, wo = wd // stride
    cols_arr = np.zeros((ci * 9, ho * wo), dtype=np.float32)
    cdef float[:, ::1] cols = cols_arr
    cdef Py_ssize_t c, a, b, y, iy, j, j0, j1, r
    cdef float* crow
    cdef const float* irow
    with nogil:
        for c in range(ci):
            for a in range(3):
                for b in range(3):
                    r = (c * 3 + a) * 3 + b
                    # output columns whose input column stride*j+b-1 is inside the image
                    j0 = 1 if b == 0 else 0
                    j1 = (wd - b) // stride + 1
                    if j1 > wo:
                        j1 = wo
                    for y in range(ho):
                        iy = y * stride + a - 1
                        if iy < 0 or iy >= h:
                            continue
                        crow = &cols[r, y * wo]
                        irow = &x[c, iy, 0]
                        if stride == 1:
                            for j in range(j0, j1):
                                crow[j] = irow[j + b - 1]
                        else:
                            for j in range(j0, j1):
                                crow[j] = irow[stride * j + b - 1]
    out = np.asarray(w).reshape(co, ci * 9) @ cols_arr
    out += np.asarray(bias)[:, None]
    return out.reshape(co, ho, wo)
