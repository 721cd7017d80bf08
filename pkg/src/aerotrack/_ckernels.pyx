# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: dense NCC, peak picking, convex polygon clipping.

Signatures mirror :mod:`aerotrack._pykernels`; the two are interchangeable.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY

cnp.import_array()

# Per-pixel variance below this is treated as a flat patch.
cdef double FLAT_VAR = 1e-6


def ncc_response(frame, template):
    """Dense NCC of ``template`` over every valid top-left placement.

    Flat placements get ``-inf``.
    """
    cdef cnp.ndarray[double, ndim=2, mode="c"] f = np.ascontiguousarray(frame, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2, mode="c"] t = np.ascontiguousarray(template, dtype=np.float64)
    cdef Py_ssize_t H = f.shape[0], W = f.shape[1]
    cdef Py_ssize_t th = t.shape[0], tw = t.shape[1]
    if th > H or tw > W:
        raise ValueError("template larger than frame")
    # shift by the global mean; NCC is unaffected and the sums stay small
    f = f - f.mean()
    cdef cnp.ndarray[double, ndim=2, mode="c"] tz = t - t.mean()
    cdef double tss = float((tz * tz).sum())
    if tss <= 0.0:
        raise ValueError("template has zero variance")
    cdef Py_ssize_t oh = H - th + 1, ow = W - tw + 1
    out_arr = np.empty((oh, ow), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] fv = f
    cdef double[:, ::1] tv = tz
    # integral images of f and f**2 for the window sums
    cdef double[:, ::1] ii = np.zeros((H + 1, W + 1))
    cdef double[:, ::1] ii2 = np.zeros((H + 1, W + 1))
    cdef Py_ssize_t i, j, u, v
    cdef double s, ss, c, x, var, r, n = <double>(th * tw)
    cdef double flat = FLAT_VAR * n
    cdef double rs, rs2
    cdef const double* frow
    cdef const double* trow
    with nogil:
        for i in range(H):
            rs = 0.0
            rs2 = 0.0
            for j in range(W):
                x = fv[i, j]
                rs = rs + x
                rs2 = rs2 + x * x
                ii[i + 1, j + 1] = ii[i, j + 1] + rs
                ii2[i + 1, j + 1] = ii2[i, j + 1] + rs2
        for i in range(oh):
            for j in range(ow):
                s = ii[i + th, j + tw] - ii[i, j + tw] - ii[i + th, j] + ii[i, j]
                ss = ii2[i + th, j + tw] - ii2[i, j + tw] - ii2[i + th, j] + ii2[i, j]
                var = ss - s * s / n
                if var <= flat:
                    out[i, j] = -INFINITY
                    continue
                c = 0.0
                for u in range(th):
                    frow = &fv[i + u, j]
                    trow = &tv[u, 0]
                    for v in range(tw):
                        c = c + frow[v] * trow[v]
                r = c / sqrt(var * tss)
                if r > 1.0:
                    r = 1.0
                elif r < -1.0:
                    r = -1.0
                out[i, j] = r
    return out_arr


def local_peaks(response, double threshold, double tol=1e-9):
    """8-neighbourhood maxima above ``threshold``; returns (rows, cols).

    Values within ``tol`` tie; a tied plateau keeps its first cell in raster order.
    """
    cdef cnp.ndarray[double, ndim=2, mode="c"] r = np.ascontiguousarray(response, dtype=np.float64)
    cdef Py_ssize_t H = r.shape[0], W = r.shape[1]
    cdef double[:, ::1] rv = r
    cdef Py_ssize_t i, j, di, dj, ni, nj
    cdef double val
    cdef bint ok
    rows = []
    cols = []
    for i in range(H):
        for j in range(W):
            val = rv[i, j]
            if not val > threshold:
                continue
            ok = True
            for di in range(-1, 2):
                ni = i + di
                if ni < 0 or ni >= H:
                    continue
                for dj in range(-1, 2):
                    nj = j + dj
                    if (di == 0 and dj == 0) or nj < 0 or nj >= W:
                        continue
                    if rv[ni, nj] > val + tol or (rv[ni, nj] >= val - tol and (di < 0 or (di == 0 and dj < 0))):
                        ok = False
                        break
                if not ok:
                    break
            if ok:
                rows.append(i)
                cols.append(j)
    return np.asarray(rows, dtype=np.intp), np.asarray(cols, dtype=np.intp)


cdef inline double _cross(double ax, double ay, double bx, double by, double px, double py) nogil:
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def convex_intersection_area(poly_a, poly_b):
    """Area of the intersection of two convex CCW polygons (Sutherland-Hodgman)."""
    cdef cnp.ndarray[double, ndim=2] a = np.asarray(poly_a, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] b = np.asarray(poly_b, dtype=np.float64)
    cdef Py_ssize_t na = a.shape[0], nb = b.shape[0]
    cdef Py_ssize_t cap = na + nb + 4
    cdef cnp.ndarray[double, ndim=2] buf1 = np.empty((cap * 2, 2))
    cdef cnp.ndarray[double, ndim=2] buf2 = np.empty((cap * 2, 2))
    cdef double[:, :] cur = buf1
    cdef double[:, :] nxt = buf2
    cdef double[:, :] tmp
    cdef Py_ssize_t n = na, m, k, e
    cdef double ex0, ey0, ex1, ey1, px, py, qx, qy, dp, dq, t, area
    for k in range(na):
        cur[k, 0] = a[k, 0]
        cur[k, 1] = a[k, 1]
    for e in range(nb):
        if n == 0:
            break
        ex0 = b[e, 0]
        ey0 = b[e, 1]
        ex1 = b[(e + 1) % nb, 0]
        ey1 = b[(e + 1) % nb, 1]
        m = 0
        for k in range(n):
            px = cur[k, 0]
            py = cur[k, 1]
            qx = cur[(k + 1) % n, 0]
            qy = cur[(k + 1) % n, 1]
            dp = _cross(ex0, ey0, ex1, ey1, px, py)
            dq = _cross(ex0, ey0, ex1, ey1, qx, qy)
            if dp >= 0.0:
                nxt[m, 0] = px
                nxt[m, 1] = py
                m += 1
                if dq < 0.0:
                    t = dp / (dp - dq)
                    nxt[m, 0] = px + t * (qx - px)
                    nxt[m, 1] = py + t * (qy - py)
                    m += 1
            elif dq >= 0.0:
                t = dp / (dp - dq)
                nxt[m, 0] = px + t * (qx - px)
                nxt[m, 1] = py + t * (qy - py)
                m += 1
        tmp = cur
        cur = nxt
        nxt = tmp
        n = m
    if n < 3:
        return 0.0
    area = 0.0
    for k in range(n):
        area += cur[k, 0] * cur[(k + 1) % n, 1] - cur[(k + 1) % n, 0] * cur[k, 1]
    return abs(area) * 0.5
