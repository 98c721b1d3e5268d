"""Continuous alignment between a target pixel grid and a latent feature grid.

Coordinates use the pixel-center convention on [-1, 1]: index ``i`` of an
axis with ``n`` cells sits at ``-1 + (2i + 1) / n``. A target pixel is
projected to a continuous (row, col) position on the latent grid, supported by
the four latent cells around it. Everything here is separable per axis, so the
per-axis arrays are computed once and broadcast to the full pixel grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WEIGHT_FLOOR = 1e-9

# Corner order: (row offset, col offset) relative to (floor(u), floor(v)).
CORNERS = ((0, 0), (0, 1), (1, 0), (1, 1))


def axis_coords(n: int) -> np.ndarray:
    if n < 1:
        raise ValueError(f"axis length must be >= 1, got {n}")
    return -1.0 + (2.0 * np.arange(n) + 1.0) / n


@dataclass(frozen=True)
class CoordGrid:
    ys: np.ndarray
    xs: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.ys), len(self.xs)


def make_coord_grid(n_h: int, n_w: int) -> CoordGrid:
    return CoordGrid(axis_coords(n_h), axis_coords(n_w))


def project(target_grid: CoordGrid, feat_shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Map normalized target coordinates to continuous latent indices.

    Returns per-axis arrays ``(u, v)``; pixel (i, j) lands at ``(u[i], v[j])``.
    """
    h, w = feat_shape
    if h < 1 or w < 1:
        raise ValueError(f"feature shape must be >= (1, 1), got {feat_shape}")
    u = (target_grid.ys + 1.0) / 2.0 * h - 0.5
    v = (target_grid.xs + 1.0) / 2.0 * w - 0.5
    return _snap(u), _snap(v)


def _snap(u: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    # round-off puts grid-aligned queries at e.g. -1e-16 instead of 0, which
    # would hand the weight to the neighbouring corner
    r = np.round(u)
    return np.where(np.abs(u - r) < tol, r, u)


@dataclass(frozen=True)
class AxisSupport:
    """The two supporting latent indices along one axis for every target index."""

    index: np.ndarray   # (2, n) clamped latent indices
    offset: np.ndarray  # (2, n) query minus gathered index, in latent cells
    weight: np.ndarray  # (2, n) weight of each support: the query's distance to the other one

    @property
    def nearest(self) -> np.ndarray:
        # ties go to the lower index
        return (self.weight[1] > self.weight[0]).astype(np.int64)


def axis_support(u: np.ndarray, n: int) -> AxisSupport:
    lo = np.floor(u)
    frac = u - lo
    raw = np.stack([lo, lo + 1.0]).astype(np.int64)
    index = np.clip(raw, 0, n - 1)
    offset = u[None, :] - index
    weight = np.stack([1.0 - frac, frac])
    return AxisSupport(index, offset, weight)


@dataclass(frozen=True)
class Corners:
    """Four supporting corners for every pixel of a target grid.

    ``index`` holds flat latent indices (row * w + col), ``rel`` the per-corner
    relative offset C_r as (d_row, d_col), ``weight`` the normalized area
    weights. Shapes: (4, H_t, W_t), (4, 2, H_t, W_t), (4, H_t, W_t).
    """

    index: np.ndarray
    rel: np.ndarray
    weight: np.ndarray


def corner_offsets_and_weights(u: np.ndarray, v: np.ndarray, feat_shape: tuple[int, int]) -> Corners:
    """Corner indices, relative offsets and area weights for projected queries.

    The weight of corner k is the area of the box spanned by the query and
    the corner diagonally opposite to k, so the nearest corner gets the most
    weight. Areas are floored at 1e-9 and normalized to sum to one. Indices are
    clamped to the latent grid; areas use the unclamped geometry so border
    pixels reduce to replicate-padded bilinear interpolation.
    """
    h, w = feat_shape
    sy = axis_support(np.asarray(u, dtype=np.float64), h)
    sx = axis_support(np.asarray(v, dtype=np.float64), w)
    idx, rel, wt = [], [], []
    for a, b in CORNERS:
        idx.append(sy.index[a][:, None] * w + sx.index[b][None, :])
        rel.append(np.stack(np.broadcast_arrays(sy.offset[a][:, None], sx.offset[b][None, :])))
        wt.append(sy.weight[a][:, None] * sx.weight[b][None, :])
    weight = np.maximum(np.stack(wt), WEIGHT_FLOOR)
    weight /= weight.sum(axis=0, keepdims=True)
    return Corners(np.stack(idx), np.stack(rel), weight)


def feature_ratio(feat_shape: tuple[int, int], target_shape: tuple[int, int]) -> tuple[float, float]:
    return feat_shape[0] / target_shape[0], feat_shape[1] / target_shape[1]


def position_channels(
    rel: np.ndarray, ratio: tuple[float, float], grid: CoordGrid
) -> np.ndarray:
    """Stack [C_r (2), r (2), C_t (2)] for one corner as an (H_t, W_t, 6) array."""
    ht, wt = grid.shape
    cy, cx = np.meshgrid(grid.ys, grid.xs, indexing="ij")
    return np.stack(
        [rel[0], rel[1], np.full((ht, wt), ratio[0]), np.full((ht, wt), ratio[1]), cy, cx],
        axis=-1,
    )


@dataclass(frozen=True)
class AlignedQuerySet:
    """Per-pixel, per-corner decoder inputs.

    ``features`` is (4, H_t, W_t, C + 6) laid out as [C_r, r, C_t, latent];
    ``weights`` is (4, H_t, W_t) and sums to one over the corner axis.
    """

    features: np.ndarray
    weights: np.ndarray
    index: np.ndarray

    @property
    def target_shape(self) -> tuple[int, int]:
        return self.weights.shape[1:]


def assemble(latent, target_shape: tuple[int, int]) -> AlignedQuerySet:
    """Build the explicit aligned feature set for a C x h x w latent map.

    ``latent`` may be a LatentFeature, a Tensor or an array. This materializes
    4 * H_t * W_t * (C + 6) values; the decoder uses an equivalent fused path
    for large targets.
    """
    arr = getattr(latent, "tensor", latent)
    arr = np.asarray(getattr(arr, "data", arr))
    if arr.ndim != 3:
        raise ValueError(f"assemble expects a C x h x w latent map, got {arr.shape}")
    c, h, w = arr.shape
    ht, wt = target_shape
    if ht < 1 or wt < 1:
        raise ValueError(f"target shape must be >= (1, 1), got {target_shape}")
    grid = make_coord_grid(ht, wt)
    u, v = project(grid, (h, w))
    corners = corner_offsets_and_weights(u, v, (h, w))
    ratio = feature_ratio((h, w), (ht, wt))
    flat = arr.reshape(c, h * w).T
    feats = np.empty((4, ht, wt, c + 6), dtype=np.result_type(arr.dtype, np.float32))
    for k in range(4):
        feats[k, :, :, :6] = position_channels(corners.rel[k], ratio, grid)
        feats[k, :, :, 6:] = flat[corners.index[k]]
    return AlignedQuerySet(feats, corners.weight, corners.index)
