"""Raster tile quality pipeline: luminance, Otsu mask, grid, filters.

The filters reproduce three fixed rejection rules, applied in order with
first-match-wins semantics:

1. ``occupancy``   - foreground (tissue) fraction below 10%;
2. ``low_std``     - mean over RGB channels of the per-channel pixel
                     standard deviation below 5 on the 0-255 scale;
3. ``zero_pixels`` - more than 50% of pixels with all three channels zero.

Foreground is the Otsu mask of the full-image luminance; tissue is the
dark class (luminance at or below the threshold).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

TILE_SIZE = 224

OCCUPANCY_MIN = 0.10
STD_MIN = 5.0
ZERO_MAX = 0.50


@dataclass
class TileReport:
    row: int
    col: int
    verdict: str  # "keep" | "reject"
    reject_reason: str | None  # "occupancy" | "low_std" | "zero_pixels"
    occupancy: float
    mean_std: float
    zero_fraction: float


def luminance(rgb: np.ndarray) -> np.ndarray:
    """Rec. 601 luma of an 8-bit RGB image, rounded to nearest integer."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) RGB, got shape {rgb.shape}")
    lum = (0.299 * rgb[..., 0].astype(np.float64)
           + 0.587 * rgb[..., 1].astype(np.float64)
           + 0.114 * rgb[..., 2].astype(np.float64))
    return np.clip(np.rint(lum), 0, 255).astype(np.uint8)


def otsu_threshold(histogram: np.ndarray) -> int:
    """Threshold in [0, 255] maximizing between-class variance.

    Classes are bins ``[0..t]`` vs ``[t+1..255]``; candidates with an empty
    low class are excluded, and ties resolve to the lowest threshold.
    """
    hist = np.asarray(histogram, dtype=np.float64)
    if hist.shape != (256,):
        raise ValueError(f"expected a 256-bin histogram, got shape {hist.shape}")
    total = hist.sum()
    if total < 1:
        raise ValueError("histogram is empty")
    levels = np.arange(256, dtype=np.float64)
    w0 = np.cumsum(hist)
    w1 = total - w0
    sum0 = np.cumsum(hist * levels)
    mu0 = np.divide(sum0, w0, out=np.zeros(256), where=w0 > 0)
    mu1 = np.divide(sum0[-1] - sum0, w1, out=np.zeros(256), where=w1 > 0)
    var_between = w0 * w1 * (mu0 - mu1) ** 2
    var_between[w0 == 0] = -np.inf
    return int(np.argmax(var_between))


def foreground_mask(rgb: np.ndarray) -> tuple[np.ndarray, int]:
    """Otsu mask of the image luminance; tissue is the dark class."""
    lum = luminance(rgb)
    hist = np.bincount(lum.ravel(), minlength=256).astype(np.int64)
    threshold = otsu_threshold(hist)
    return lum <= threshold, threshold


def tile_grid(width: int, height: int, tile: int = TILE_SIZE) -> list[tuple[int, int]]:
    """(row, col) grid indices of non-overlapping tiles; margins discarded."""
    n_cols = width // tile
    n_rows = height // tile
    if n_cols == 0 or n_rows == 0:
        warnings.warn(f"image {width}x{height} smaller than one {tile}x{tile} tile")
        return []
    return [(r, c) for r in range(n_rows) for c in range(n_cols)]


def tile_filter(tile: np.ndarray, mask: np.ndarray, row: int = 0,
                col: int = 0) -> TileReport:
    """Apply the three rejection rules to one tile.

    ``tile`` is ``(TILE_SIZE, TILE_SIZE, 3)`` uint8 and ``mask`` the
    matching boolean foreground restriction.  Exactly one reason is set
    when rejected; rule order is fixed.
    """
    tile = np.asarray(tile)
    mask = np.asarray(mask, dtype=bool)
    if tile.shape != (TILE_SIZE, TILE_SIZE, 3):
        raise ValueError(f"expected ({TILE_SIZE}, {TILE_SIZE}, 3) tile, got {tile.shape}")
    if mask.shape != (TILE_SIZE, TILE_SIZE):
        raise ValueError(f"mask shape {mask.shape} does not match tile")

    occupancy = float(mask.mean())
    pixels = tile.reshape(-1, 3).astype(np.float64)
    mean_std = float(pixels.std(axis=0).mean())
    zero_fraction = float(np.all(tile == 0, axis=2).mean())

    if occupancy < OCCUPANCY_MIN:
        reason = "occupancy"
    elif mean_std < STD_MIN:
        reason = "low_std"
    elif zero_fraction > ZERO_MAX:
        reason = "zero_pixels"
    else:
        reason = None
    return TileReport(
        row=row, col=col,
        verdict="keep" if reason is None else "reject",
        reject_reason=reason,
        occupancy=occupancy, mean_std=mean_std, zero_fraction=zero_fraction,
    )


def process_image(rgb: np.ndarray, tile: int = TILE_SIZE):
    """Grid + Otsu + filters over a full raster.

    Returns ``(reports, kept_tiles, threshold)`` where ``kept_tiles`` maps
    ``(row, col)`` to the tile array for every kept tile.
    """
    rgb = np.asarray(rgb)
    mask, threshold = foreground_mask(rgb)
    height, width = rgb.shape[0], rgb.shape[1]
    reports: list[TileReport] = []
    kept: dict[tuple[int, int], np.ndarray] = {}
    for row, col in tile_grid(width, height, tile):
        ys, xs = row * tile, col * tile
        patch = rgb[ys : ys + tile, xs : xs + tile]
        report = tile_filter(patch, mask[ys : ys + tile, xs : xs + tile], row, col)
        reports.append(report)
        if report.verdict == "keep":
            kept[(row, col)] = patch
    return reports, kept, threshold
