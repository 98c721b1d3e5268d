"""Random morphological degradation of a ground-truth mask down to an IoU floor."""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from ..diffcore.ops import bilinear_matrix
from ..metrics import iou

MAX_OPS = 16
MAX_REJECTS = 8


def _dilate(m, rng, s):
    r = max(1.0, rng.uniform(0.01, 0.06) * s)
    return ndimage.distance_transform_edt(~m) <= r


def _erode(m, rng, s):
    r = max(1.0, rng.uniform(0.01, 0.06) * s)
    return ndimage.distance_transform_edt(m) > r


def _signed_distance(m):
    return ndimage.distance_transform_edt(m) - ndimage.distance_transform_edt(~m)


def _smooth_noise(shape, rng, cells):
    g = rng.standard_normal((cells, cells))
    ry = bilinear_matrix(cells, shape[0])
    rx = bilinear_matrix(cells, shape[1])
    return ry @ g @ rx.T


def _jitter(m, rng, s):
    amp = rng.uniform(0.02, 0.08) * s
    noise = _smooth_noise(m.shape, rng, int(rng.integers(4, 13)))
    return _signed_distance(m) + amp * noise > 0


def _disk(shape, cy, cx, r):
    yy, xx = np.ogrid[: shape[0], : shape[1]]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _hole(m, rng, s):
    ys, xs = np.nonzero(m)
    k = int(rng.integers(len(ys)))
    r = max(1.0, rng.uniform(0.03, 0.12) * s)
    return m & ~_disk(m.shape, ys[k], xs[k], r)


def _blob(m, rng, s):
    r = max(1.0, rng.uniform(0.03, 0.15) * s)
    d = ndimage.distance_transform_edt(~m)
    ys, xs = np.nonzero((d > 0) & (d <= r))
    if len(ys) == 0:
        return m
    k = int(rng.integers(len(ys)))
    return m | _disk(m.shape, ys[k], xs[k], r)


def _simplify(m, rng, s):
    # area-downsample by a block factor, then bilinear-upsample and threshold
    h, w = m.shape
    b = max(2, int(round(rng.uniform(0.04, 0.15) * s)))
    hs, ws = math.ceil(h / b), math.ceil(w / b)
    pad = np.pad(m.astype(np.float64), ((0, hs * b - h), (0, ws * b - w)), mode="edge")
    small = pad.reshape(hs, b, ws, b).mean(axis=(1, 3))
    up = bilinear_matrix(hs, hs * b) @ small @ bilinear_matrix(ws, ws * b).T
    return up[:h, :w] >= 0.5


PERTURBATIONS = {
    "dilate": _dilate,
    "erode": _erode,
    "jitter": _jitter,
    "hole": _hole,
    "blob": _blob,
    "simplify": _simplify,
}
_NAMES = tuple(PERTURBATIONS)


def perturb_mask(gt, tau: float, seed: int, scale: float | None = None, return_ops: bool = False):
    """Coarse version of ``gt`` with IoU(coarse, gt) >= tau.

    Random operations are applied one after another; an operation that would
    push IoU below ``tau`` (or empty the mask) is discarded. The walk stops
    after MAX_OPS accepted or MAX_REJECTS consecutive discarded operations.
    Structuring sizes are proportional to ``scale``, by default the square
    root of the foreground area, so the same shape degrades alike at any
    resolution. Pass the full image's scale when perturbing a crop.
    """
    a = np.asarray(gt)
    squeeze = a.ndim == 3
    if squeeze:
        if a.shape[0] != 1:
            raise ValueError(f"mask must be H x W or 1 x H x W, got {a.shape}")
        a = a[0]
    if a.ndim != 2:
        raise ValueError(f"mask must be H x W or 1 x H x W, got {a.shape}")
    g = a >= 0.5 if a.dtype != bool else a
    if not g.any():
        raise ValueError("cannot perturb a mask with empty foreground")
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")

    rng = np.random.default_rng(seed)
    if scale is None:
        scale = math.sqrt(np.count_nonzero(g))
    cur = g.copy()
    applied: list[str] = []
    if tau < 1.0:
        rejects = 0
        while len(applied) < MAX_OPS and rejects < MAX_REJECTS:
            name = _NAMES[int(rng.integers(len(_NAMES)))]
            cand = PERTURBATIONS[name](cur, rng, scale)
            if cand.any() and iou(cand, g) >= tau:
                cur = cand
                applied.append(name)
                rejects = 0
            else:
                rejects += 1
    out = cur.astype(np.uint8)
    if squeeze:
        out = out[None]
    return (out, applied) if return_ops else out
