"""Landmark <-> mask conversion: disc rasterization and heatmap blob decoding."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass
class Blob:
    pixel_set: list[tuple[int, int]]
    area: int
    equivalent_radius: float
    cog: tuple[float, float]


def rasterize_mask(points, delta: float, height: int, width: int) -> np.ndarray:
    """Union of discs of radius ``delta`` centred on the rounded landmark points.

    Discs are clipped at the frame border. ``points`` is a (tau, 2) array of
    (row, col) coordinates, or a ``LandmarkLabel``.
    """
    pts = np.asarray(getattr(points, "points", points), dtype=np.float64).reshape(-1, 2)
    if delta < 0:
        raise ValueError(f"delta must be >= 0, got {delta}")
    out_of_bounds = (pts[:, 0] < 0) | (pts[:, 0] > height - 1) | (pts[:, 1] < 0) | (pts[:, 1] > width - 1)
    if np.any(out_of_bounds) or not np.all(np.isfinite(pts)):
        raise ValueError(f"landmark outside the {height}x{width} frame: {pts[out_of_bounds].tolist()}")
    centres = np.rint(pts)
    rr, cc = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    mask = np.zeros((height, width), dtype=np.uint8)
    for r, c in centres:
        mask[(rr - r) ** 2 + (cc - c) ** 2 <= delta * delta] = 1
    return mask


def extract_blobs(heatmap: np.ndarray, bin_threshold: float = 0.5) -> list[Blob]:
    """8-connected components of ``heatmap >= bin_threshold``.

    The centre of gravity is weighted by the heatmap values. Blobs are sorted
    by area (largest first), ties broken by COG (row, col) ascending.
    """
    heatmap = np.asarray(heatmap, dtype=np.float64)
    labels, n = ndimage.label(heatmap >= bin_threshold, structure=EIGHT_CONNECTED)
    blobs = []
    for idx in range(1, n + 1):
        rows, cols = np.nonzero(labels == idx)
        weights = heatmap[rows, cols]
        total = weights.sum()
        if total > 0:
            cog = (float((weights * rows).sum() / total), float((weights * cols).sum() / total))
        else:  # only reachable with bin_threshold == 0
            cog = (float(rows.mean()), float(cols.mean()))
        area = int(rows.size)
        blobs.append(Blob(
            pixel_set=list(zip(rows.tolist(), cols.tolist())),
            area=area,
            equivalent_radius=math.sqrt(area / math.pi),
            cog=cog,
        ))
    blobs.sort(key=lambda b: (-b.area, b.cog[0], b.cog[1]))
    return blobs


def decode_landmarks(blobs: list[Blob], tau: int, delta: float) -> tuple[int, list[tuple[float, float]]]:
    """Count blobs with equivalent radius strictly above ``delta``; return their COGs.

    ``tau`` is not used for filtering; it is accepted so the caller can pass
    the full landmark spec and compare the returned count against it.
    """
    kept = [b.cog for b in blobs if b.equivalent_radius > delta]
    return len(kept), kept


def two_largest_cogs(blobs: list[Blob]):
    """COGs of the two largest blobs, or None. Used by the ungated baselines."""
    if len(blobs) < 2:
        return None
    return [blobs[0].cog, blobs[1].cog]
