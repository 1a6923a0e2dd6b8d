"""Distance-to-boundary transform and ordinal bin maps.

Masks are plain 2-d boolean numpy arrays; distance fields are float arrays
of the same shape. Bin maps carry ``-1`` on background so that bin 0 always
means the boundary stratum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import EmptyRegionError, ShapeError

BACKGROUND = -1


class NoBackgroundError(ValueError):
    """The distance to the nearest background pixel is undefined."""


@dataclass(frozen=True)
class BinMap:
    bins: np.ndarray  # int array, -1 on background
    K: int

    @property
    def foreground(self) -> np.ndarray:
        return self.bins >= 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.bins.shape


def as_mask(mask) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ShapeError(f"mask must be 2-d, got shape {m.shape}")
    return m.astype(bool, copy=False)


def _column_pass(bg: np.ndarray) -> np.ndarray:
    """Vertical distance from each pixel to the nearest background pixel in its column."""
    h, w = bg.shape
    rows = np.arange(h)[:, None].astype(np.float64)
    inf = np.inf
    # index of last background at or above, and first at or below
    above = np.where(bg, rows, -inf)
    above = np.maximum.accumulate(above, axis=0)
    below = np.where(bg, rows, inf)
    below = np.minimum.accumulate(below[::-1], axis=0)[::-1]
    return np.minimum(rows - above, below - rows)


def edt(mask) -> np.ndarray:
    """Exact Euclidean distance from every foreground pixel to the nearest background pixel.

    Two separable passes: per-column distances first, then for each row the
    exact minimum of ``(x - x')**2 + g(x')**2`` over all columns ``x'``.
    Background pixels get 0. An all-background mask gives an all-zero field.
    """
    m = as_mask(mask)
    if not m.any():
        return np.zeros(m.shape)
    bg = ~m
    if not bg.any():
        raise NoBackgroundError("mask has no background pixel; EDT is undefined")
    g = _column_pass(bg)
    g2 = g * g  # inf where a column has no background
    w = m.shape[1]
    cols = np.arange(w, dtype=np.float64)
    dx2 = (cols[:, None] - cols[None, :]) ** 2  # (x, x')
    # d2[y, x] = min_x' dx2[x, x'] + g2[y, x']
    d2 = (dx2[None, :, :] + g2[:, None, :]).min(axis=2)
    out = np.sqrt(d2)
    out[bg] = 0.0
    return out


def edt_bruteforce(mask) -> np.ndarray:
    """O(N^2) reference: minimum over all background pixels of the Euclidean distance."""
    m = as_mask(mask)
    out = np.zeros(m.shape)
    fg = np.argwhere(m)
    bgp = np.argwhere(~m)
    if len(fg) == 0:
        return out
    if len(bgp) == 0:
        raise NoBackgroundError("mask has no background pixel; EDT is undefined")
    for y, x in fg:
        out[y, x] = np.sqrt(((bgp - (y, x)) ** 2).sum(axis=1).min())
    return out


def quantise(field: np.ndarray, mask, K: int) -> BinMap:
    """z = min(K-1, floor(EDT / max EDT * (K-1))) on foreground, -1 elsewhere."""
    if K < 2:
        raise ValueError(f"K must be >= 2, got {K}")
    m = as_mask(mask)
    field = np.asarray(field, dtype=np.float64)
    if field.shape != m.shape:
        raise ShapeError(f"field {field.shape} vs mask {m.shape}")
    if not m.any():
        raise EmptyRegionError("quantise needs a nonempty foreground")
    top = field[m].max()
    bins = np.full(m.shape, BACKGROUND, dtype=np.int64)
    if top <= 0:
        bins[m] = K - 1
        return BinMap(bins, K)
    scaled = field[m] / top * (K - 1)
    # ratios that land a hair under an integer through rounding go up to it
    z = np.floor(scaled + 1e-9).astype(np.int64)
    bins[m] = np.minimum(K - 1, z)
    return BinMap(bins, K)


def bin_map(mask, K: int) -> BinMap:
    m = as_mask(mask)
    return quantise(edt(m), m, K)


def bin_histogram(binmap: BinMap) -> np.ndarray:
    fg = binmap.bins[binmap.bins >= 0]
    if fg.size == 0:
        raise EmptyRegionError("histogram of an empty foreground")
    counts = np.bincount(fg, minlength=binmap.K).astype(np.float64)
    return counts / counts.sum()


def downsample_mask(mask, h: int, w: int) -> np.ndarray:
    """Block-average to h x w and keep blocks with occupancy >= 0.5."""
    m = as_mask(mask)
    H, W = m.shape
    if h > H or w > W or H % h or W % w:
        raise ShapeError(f"cannot downsample {H}x{W} to {h}x{w} by an integral ratio")
    fy, fx = H // h, W // w
    occ = m.reshape(h, fy, w, fx).mean(axis=(1, 3))
    return occ >= 0.5


def feature_bin_map(mask, h: int, w: int, K: int) -> BinMap:
    """Bin supervision at feature resolution: downsample first, then EDT and quantise."""
    small = downsample_mask(mask, h, w)
    return bin_map(small, K)


def binmap_to_gray(binmap: BinMap) -> np.ndarray:
    """8-bit rendering used for PGM export: background 0, bin k -> round(255 (k+1) / K)."""
    out = np.zeros(binmap.shape, dtype=np.uint8)
    fg = binmap.bins >= 0
    out[fg] = np.round(255.0 * (binmap.bins[fg] + 1) / binmap.K).astype(np.uint8)
    return out
