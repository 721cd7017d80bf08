"""Pure numpy fallbacks for the compiled kernels in ``_ckernels.pyx``.

The NCC numerator is computed by FFT correlation here rather than the direct
sum used by the compiled kernel, so the two backends double as cross-checks.
"""
import numpy as np
from scipy.signal import fftconvolve

FLAT_VAR = 1e-6


def _box_sums(a, th, tw):
    ii = np.zeros((a.shape[0] + 1, a.shape[1] + 1))
    ii[1:, 1:] = a.cumsum(0).cumsum(1)
    return ii[th:, tw:] - ii[:-th, tw:] - ii[th:, :-tw] + ii[:-th, :-tw]


def ncc_response(frame, template):
    """Dense NCC of ``template`` over every valid top-left placement.

    Flat placements get ``-inf``.
    """
    f = np.asarray(frame, dtype=np.float64)
    t = np.asarray(template, dtype=np.float64)
    H, W = f.shape
    th, tw = t.shape
    if th > H or tw > W:
        raise ValueError("template larger than frame")
    f = f - f.mean()
    tz = t - t.mean()
    tss = float((tz * tz).sum())
    if tss <= 0.0:
        raise ValueError("template has zero variance")
    n = th * tw

    num = fftconvolve(f, tz[::-1, ::-1], mode="valid")

    s = _box_sums(f, th, tw)
    ss = _box_sums(f * f, th, tw)
    var = ss - s * s / n
    flat = var <= FLAT_VAR * n
    with np.errstate(invalid="ignore", divide="ignore"):
        out = num / np.sqrt(np.where(flat, 1.0, var) * tss)
    np.clip(out, -1.0, 1.0, out=out)
    out[flat] = -np.inf
    return out


def local_peaks(response, threshold, tol=1e-9):
    """8-neighbourhood maxima above ``threshold``; returns (rows, cols).

    Values within ``tol`` tie; a tied plateau keeps its first cell in raster order.
    """
    r = np.asarray(response, dtype=np.float64)
    padded = np.pad(r, 1, constant_values=-np.inf)
    H, W = r.shape
    mask = r > threshold
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            nb = padded[1 + di:1 + di + H, 1 + dj:1 + dj + W]
            earlier = di < 0 or (di == 0 and dj < 0)
            mask &= (r > nb + tol) if earlier else (r >= nb - tol)
    rows, cols = np.nonzero(mask)
    return rows.astype(np.intp), cols.astype(np.intp)


def _clip(poly, a, b):
    out = []
    n = len(poly)
    ax, ay = a
    bx, by = b
    for k in range(n):
        px, py = poly[k]
        qx, qy = poly[(k + 1) % n]
        dp = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
        dq = (bx - ax) * (qy - ay) - (by - ay) * (qx - ax)
        if dp >= 0.0:
            out.append((px, py))
            if dq < 0.0:
                t = dp / (dp - dq)
                out.append((px + t * (qx - px), py + t * (qy - py)))
        elif dq >= 0.0:
            t = dp / (dp - dq)
            out.append((px + t * (qx - px), py + t * (qy - py)))
    return out


def convex_intersection_area(poly_a, poly_b):
    """Area of the intersection of two convex CCW polygons (Sutherland-Hodgman)."""
    poly = [tuple(map(float, p)) for p in poly_a]
    clip = [tuple(map(float, p)) for p in poly_b]
    for e in range(len(clip)):
        if not poly:
            break
        poly = _clip(poly, clip[e], clip[(e + 1) % len(clip)])
    if len(poly) < 3:
        return 0.0
    area = 0.0
    for k in range(len(poly)):
        x0, y0 = poly[k]
        x1, y1 = poly[(k + 1) % len(poly)]
        area += x0 * y1 - x1 * y0
    return abs(area) * 0.5
