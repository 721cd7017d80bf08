"""Frame container, PGM I/O and the preprocessing chain feeding detection."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class Frame:
    """Single-channel intensity raster.

    ``data`` is a 2-D array (rows = height). Preprocessing outputs are uint8;
    pyramid levels keep float64 to avoid requantising before matching.
    """

    data: np.ndarray
    timestamp_index: int = 0
    fps: float = 25.0

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ValueError(f"frame data must be 2-D, got shape {data.shape}")
        if data.size == 0:
            raise ValueError("frame has zero size")
        if data.dtype != np.uint8:
            data = data.astype(np.float64)
            if np.isnan(data).any() or data.min() < 0 or data.max() > 255:
                raise ValueError("frame intensities must lie in [0, 255]")
        if not self.fps > 0:
            raise ValueError(f"fps must be positive, got {self.fps}")
        object.__setattr__(self, "data", data)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def with_data(self, data) -> "Frame":
        return replace(self, data=data)


@dataclass(frozen=True)
class Pyramid:
    levels: list
    scale_factor: float
    scales: list = field(default_factory=list)

    def scale(self, k: int) -> float:
        """Cumulative scale of level ``k`` relative to level 0."""
        return self.scale_factor ** k


def quantize(a) -> np.ndarray:
    """Round half up and clamp to uint8."""
    return np.clip(np.floor(np.asarray(a, dtype=np.float64) + 0.5), 0, 255).astype(np.uint8)


def to_grayscale(rgb, timestamp_index: int = 0, fps: float = 25.0) -> Frame:
    """BT.601 luma of an H x W x 3 raster."""
    a = np.asarray(rgb, dtype=np.float64)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 raster, got shape {a.shape}")
    if a.min() < 0 or a.max() > 255:
        raise ValueError("channel values must lie in [0, 255]")
    luma = 0.299 * a[..., 0] + 0.587 * a[..., 1] + 0.114 * a[..., 2]
    return Frame(quantize(luma), timestamp_index, fps)


def gaussian_kernel(sigma: float) -> np.ndarray:
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = max(1, int(math.ceil(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(a, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with edge replication, no quantisation."""
    k = gaussian_kernel(sigma)
    out = ndimage.correlate1d(np.asarray(a, dtype=np.float64), k, axis=0, mode="nearest")
    return ndimage.correlate1d(out, k, axis=1, mode="nearest")


def denoise(frame: Frame, method: str = "gaussian", sigma: float = 1.0, window: int = 3) -> Frame:
    """Gaussian (``sigma``) or median (odd ``window``) filtering, edge-replicated."""
    if method == "gaussian":
        return frame.with_data(quantize(gaussian_blur(frame.data, sigma)))
    if method == "median":
        if window < 3 or window % 2 == 0:
            raise ValueError(f"median window must be odd and >= 3, got {window}")
        out = ndimage.median_filter(frame.data, size=window, mode="nearest")
        return frame.with_data(quantize(out))
    raise ValueError(f"unknown denoise method {method!r}")


def _histogram(frame: Frame) -> np.ndarray:
    q = quantize(frame.data) if frame.data.dtype != np.uint8 else frame.data
    return np.bincount(q.ravel(), minlength=256)


def otsu_threshold(frame: Frame) -> int:
    """Otsu threshold ``t``: pixels ``< t`` form the dark class.

    Exhaustive over t = 0..255 with exact integer arithmetic; ties resolve
    to the smallest t.
    """
    hist = [int(c) for c in _histogram(frame)]
    if sum(1 for c in hist if c) < 2:
        raise ValueError("otsu threshold undefined for a constant frame")
    total_n = sum(hist)
    total_s = sum(i * c for i, c in enumerate(hist))
    best_t, best_num, best_den = 0, 0, 1
    n0 = s0 = 0
    for t in range(256):
        n1 = total_n - n0
        if n0 and n1:
            # between-class variance * N^2 == (S0*N1 - S1*N0)^2 / (N0*N1)
            num = (s0 * n1 - (total_s - s0) * n0) ** 2
            den = n0 * n1
            if num * best_den > best_num * den:
                best_t, best_num, best_den = t, num, den
        n0 += hist[t]
        s0 += t * hist[t]
    return best_t


def binarize(frame: Frame, threshold: int) -> Frame:
    return frame.with_data(np.where(frame.data >= threshold, 255, 0).astype(np.uint8))


def adaptive_threshold(frame: Frame, window: int = 15, c: float = 5.0) -> Frame:
    """Foreground where the pixel exceeds its window mean minus ``c``."""
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    mean = ndimage.uniform_filter(frame.data.astype(np.float64), size=window, mode="nearest")
    return frame.with_data(np.where(frame.data > mean - c, 255, 0).astype(np.uint8))


def _tile_lut(tile: np.ndarray, clip_limit: float) -> np.ndarray:
    hist = np.bincount(tile.ravel(), minlength=256).astype(np.float64)
    n = tile.size
    if np.count_nonzero(hist) == 1:
        # nothing to equalise in a flat tile
        return np.arange(256, dtype=np.float64)
    if math.isfinite(clip_limit):
        clip = max(1.0, clip_limit * n / 256.0)
        excess = np.maximum(hist - clip, 0.0).sum()
        hist = np.minimum(hist, clip) + excess / 256.0
    cdf = np.cumsum(hist)
    return np.floor(cdf * 255.0 / n + 0.5)


def clahe(frame: Frame, tile_grid=(8, 8), clip_limit: float = 2.0) -> Frame:
    """Contrast limited adaptive histogram equalisation.

    ``clip_limit`` is relative to the mean bin height (``inf`` disables
    clipping). Tile mappings are blended bilinearly between tile centres.
    """
    rows, cols = tile_grid
    if rows <= 0 or cols <= 0:
        raise ValueError(f"tile grid must be positive, got {tile_grid}")
    if not clip_limit >= 1:
        raise ValueError(f"clip_limit must be >= 1, got {clip_limit}")
    img = quantize(frame.data) if frame.data.dtype != np.uint8 else frame.data
    H, W = img.shape
    th = -(-H // rows)
    tw = -(-W // cols)
    if th == 0 or tw == 0:
        raise ValueError("tiles have zero size")
    padded = np.pad(img, ((0, th * rows - H), (0, tw * cols - W)), mode="edge")

    luts = np.empty((rows, cols, 256))
    for r in range(rows):
        for c in range(cols):
            luts[r, c] = _tile_lut(padded[r * th:(r + 1) * th, c * tw:(c + 1) * tw], clip_limit)

    # position of each pixel in tile-centre coordinates
    gy = (np.arange(H) + 0.5) / th - 0.5
    gx = (np.arange(W) + 0.5) / tw - 0.5
    y0 = np.clip(np.floor(gy).astype(int), 0, rows - 1)
    x0 = np.clip(np.floor(gx).astype(int), 0, cols - 1)
    y1 = np.minimum(y0 + 1, rows - 1)
    x1 = np.minimum(x0 + 1, cols - 1)
    wy = np.clip(gy - y0, 0.0, 1.0)[:, None]
    wx = np.clip(gx - x0, 0.0, 1.0)[None, :]

    v = img.astype(np.intp)
    Y0, X0 = y0[:, None], x0[None, :]
    Y1, X1 = y1[:, None], x1[None, :]
    top = (1 - wx) * luts[Y0, X0, v] + wx * luts[Y0, X1, v]
    bot = (1 - wx) * luts[Y1, X0, v] + wx * luts[Y1, X1, v]
    return frame.with_data(quantize((1 - wy) * top + wy * bot))


def bilinear_sample(a: np.ndarray, xs: np.ndarray, ys: np.ndarray, fill=None) -> np.ndarray:
    """Sample ``a`` at fractional (x, y) positions.

    Coordinates within 1e-9 of an integer are snapped so exact placements
    reproduce source pixels. With ``fill`` set, samples outside the pixel
    grid take that value; otherwise coordinates are clamped (edge replication).
    """
    a = np.asarray(a, dtype=np.float64)
    H, W = a.shape
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    rx, ry = np.rint(xs), np.rint(ys)
    xs = np.where(np.abs(xs - rx) < 1e-9, rx, xs)
    ys = np.where(np.abs(ys - ry) < 1e-9, ry, ys)
    outside = (xs < 0) | (xs > W - 1) | (ys < 0) | (ys > H - 1)
    xc = np.clip(xs, 0, W - 1)
    yc = np.clip(ys, 0, H - 1)
    x0 = np.floor(xc).astype(np.intp)
    y0 = np.floor(yc).astype(np.intp)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = xc - x0
    fy = yc - y0
    out = ((1 - fy) * ((1 - fx) * a[y0, x0] + fx * a[y0, x1])
           + fy * ((1 - fx) * a[y1, x0] + fx * a[y1, x1]))
    if fill is not None:
        out = np.where(outside, fill, out)
    return out


def downsample(a: np.ndarray, factor: float) -> np.ndarray:
    """Gaussian-smooth then resample by ``factor`` (pixel-centre aligned)."""
    H, W = a.shape
    h, w = int(math.floor(H * factor)), int(math.floor(W * factor))
    if h <= 0 or w <= 0:
        raise ValueError(f"pyramid level would have zero size ({h}x{w})")
    sigma = 0.5 * math.sqrt(1.0 / factor ** 2 - 1.0)
    smooth = gaussian_blur(a, sigma)
    ys = (np.arange(h) + 0.5) / factor - 0.5
    xs = (np.arange(w) + 0.5) / factor - 0.5
    return bilinear_sample(smooth, xs[None, :], ys[:, None])


def build_pyramid(frame: Frame, levels: int = 4, scale_factor: float = 0.8) -> Pyramid:
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    if not 0 < scale_factor < 1:
        raise ValueError(f"scale_factor must lie in (0, 1), got {scale_factor}")
    out = [frame]
    cur = np.asarray(frame.data, dtype=np.float64)
    for _ in range(1, levels):
        cur = np.clip(downsample(cur, scale_factor), 0.0, 255.0)
        out.append(frame.with_data(cur))
    return Pyramid(out, scale_factor, [scale_factor ** k for k in range(levels)])


def level_to_base(x: float, y: float, scale: float):
    """Map a pixel coordinate at a level of cumulative ``scale`` back to level 0."""
    return (x + 0.5) / scale - 0.5, (y + 0.5) / scale - 0.5


def base_to_level(x: float, y: float, scale: float):
    return (x + 0.5) * scale - 0.5, (y + 0.5) * scale - 0.5


# -- PGM I/O ----------------------------------------------------------------

_PGM_HEADER = re.compile(rb"P5\s+(?:#.*\s+)*(\d+)\s+(?:#.*\s+)*(\d+)\s+(?:#.*\s+)*(\d+)\s")


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = _PGM_HEADER.match(raw)
    if not m:
        raise ValueError(f"{path}: not a binary (P5) PGM file")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    body = raw[m.end():m.end() + w * h]
    if len(body) != w * h:
        raise ValueError(f"{path}: truncated PGM data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def write_pgm(path, data) -> None:
    a = quantize(data) if np.asarray(data).dtype != np.uint8 else np.asarray(data)
    h, w = a.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + a.tobytes())


def frame_path(directory, index: int) -> Path:
    return Path(directory) / f"frame_{index:06d}.pgm"


def load_frames(directory, fps: float):
    """Load ``frame_%06d.pgm`` files from ``directory`` in index order."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(directory)
    found = []
    for p in directory.iterdir():
        m = re.fullmatch(r"frame_(\d{6})\.pgm", p.name)
        if m:
            found.append((int(m.group(1)), p))
    return [Frame(read_pgm(p), idx, fps) for idx, p in sorted(found)]


def save_frames(directory, frames) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for f in frames:
        write_pgm(frame_path(directory, f.timestamp_index), f.data)
