"""IoU, mean boundary accuracy, and corpus evaluation reports."""

from __future__ import annotations

import io
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

# Band radii for mBA: N_BANDS values evenly spaced from BAND_MIN_PX to
# BAND_MAX_FRAC of the image diagonal, rounded half-up and deduplicated.
N_BANDS = 5
BAND_MIN_PX = 3.0
BAND_MAX_FRAC = 0.02


def _binary(m) -> np.ndarray:
    a = np.asarray(m)
    if a.dtype == bool:
        return a
    return a >= 0.5


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = _binary(a), _binary(b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def iou(a, b) -> float:
    """|a & b| / |a | b|, with two empty masks counting as perfect agreement."""
    a, b = _pair(a, b)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def _as_2d(m: np.ndarray) -> np.ndarray:
    if m.ndim == 3 and m.shape[0] == 1:
        return m[0]
    if m.ndim != 2:
        raise ValueError(f"expected an H x W or 1 x H x W mask, got {m.shape}")
    return m


def boundary(mask) -> np.ndarray:
    """Pixels with at least one 4-neighbour of a different value (both sides of an edge)."""
    m = _as_2d(_binary(mask))
    out = np.zeros_like(m)
    dv = m[1:] != m[:-1]
    dh = m[:, 1:] != m[:, :-1]
    out[1:] |= dv
    out[:-1] |= dv
    out[:, 1:] |= dh
    out[:, :-1] |= dh
    return out


def band_radii(shape: tuple[int, int]) -> list[int]:
    diag = math.hypot(*shape)
    hi = max(BAND_MIN_PX, BAND_MAX_FRAC * diag)
    raw = np.linspace(BAND_MIN_PX, hi, N_BANDS)
    return sorted({int(math.floor(r + 0.5)) for r in raw})


def boundary_sq_distance(mask) -> np.ndarray:
    """Exact squared Euclidean distance (integer) from every pixel to the nearest boundary pixel."""
    b = boundary(mask)
    if not b.any():
        raise ValueError("ground truth has no boundary (mask is entirely one value)")
    idx = ndimage.distance_transform_edt(~b, return_distances=False, return_indices=True)
    rows, cols = np.indices(b.shape)
    return (idx[0] - rows) ** 2 + (idx[1] - cols) ** 2


def mba(pred, gt) -> float:
    """Mean over band radii of pixel accuracy within distance r of the gt boundary."""
    p, g = _pair(pred, gt)
    p, g = _as_2d(p), _as_2d(g)
    d2 = boundary_sq_distance(g)
    correct = p == g
    accs = []
    for r in band_radii(g.shape):
        band = d2 <= r * r
        accs.append(np.count_nonzero(correct & band) / np.count_nonzero(band))
    return float(sum(accs) / len(accs))


# ----------------------------------------------------------------- reports

@dataclass
class ItemResult:
    stem: str
    iou_coarse: float
    mba_coarse: float
    iou_refined: float
    mba_refined: float
    seconds: float
    stage_iou: list[float] = field(default_factory=list)
    stage_mba: list[float] = field(default_factory=list)


@dataclass
class EvalReport:
    schedule: tuple[float, ...]
    items: list[ItemResult]
    skipped: list[tuple[str, str]] = field(default_factory=list)
    checkpoint: str = ""

    def _mean(self, attr: str) -> float:
        if not self.items:
            return float("nan")
        return float(np.mean([getattr(it, attr) for it in self.items]))

    @property
    def mean_iou(self) -> float:
        return self._mean("iou_refined")

    @property
    def mean_mba(self) -> float:
        return self._mean("mba_refined")

    @property
    def mean_iou_coarse(self) -> float:
        return self._mean("iou_coarse")

    @property
    def mean_mba_coarse(self) -> float:
        return self._mean("mba_coarse")

    @property
    def delta_iou(self) -> float:
        return self.mean_iou - self.mean_iou_coarse

    @property
    def delta_mba(self) -> float:
        return self.mean_mba - self.mean_mba_coarse

    def stage_means(self) -> list[tuple[float, float, float]]:
        """(ratio, mean IoU, mean mBA) after each stage of the schedule."""
        out = []
        for k, r in enumerate(self.schedule):
            out.append((
                r,
                float(np.mean([it.stage_iou[k] for it in self.items])),
                float(np.mean([it.stage_mba[k] for it in self.items])),
            ))
        return out

    def to_tsv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# schedule\t{','.join(f'{r:g}' for r in self.schedule)}\n")
        buf.write(
            f"# mba_bands\t{N_BANDS} radii from {BAND_MIN_PX:g} px to {BAND_MAX_FRAC:g} of the diagonal,"
            " rounded half-up, deduplicated; exact Euclidean distance to 4-neighbour boundary\n"
        )
        buf.write(f"# checkpoint\t{self.checkpoint or '-'}\n")
        buf.write(f"# mean\tiou_coarse={self.mean_iou_coarse:.6f}\tmba_coarse={self.mean_mba_coarse:.6f}\t"
                  f"iou_refined={self.mean_iou:.6f}\tmba_refined={self.mean_mba:.6f}\t"
                  f"delta_iou={self.delta_iou:.6f}\tdelta_mba={self.delta_mba:.6f}\n")
        for stem, reason in self.skipped:
            buf.write(f"# skipped\t{stem}\t{reason}\n")
        buf.write("stem\tiou_coarse\tmba_coarse\tiou_refined\tmba_refined\tdelta_iou\tdelta_mba\tseconds\n")
        for it in self.items:
            buf.write(
                f"{it.stem}\t{it.iou_coarse:.6f}\t{it.mba_coarse:.6f}\t{it.iou_refined:.6f}\t{it.mba_refined:.6f}\t"
                f"{it.iou_refined - it.iou_coarse:.6f}\t{it.mba_refined - it.mba_coarse:.6f}\t{it.seconds:.3f}\n"
            )
        return buf.getvalue()

    def write_tsv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_tsv(), encoding="utf-8")
        return path


def _item_arrays(item):
    """(stem, image, gt, coarse) from a CorpusItem or a 4-tuple of arrays."""
    if hasattr(item, "load"):
        img, gt, coarse = item.load()
        return item.stem, img, gt, coarse
    stem, img, gt, coarse = item
    return stem, img, gt, coarse


def evaluate(
    corpus: Sequence,
    model,
    schedule,
    *,
    chunk_pixels: Optional[int] = None,
    checkpoint: str = "",
    progress=None,
) -> EvalReport:
    """Refine every item with ``schedule`` and score refined and coarse masks against gt.

    ``corpus`` holds CorpusItems or (stem, image, gt, coarse) tuples. Items
    that fail to load or lack a coarse mask are recorded as skipped.
    """
    from .inference import binarize, refine_multires

    items = list(corpus)
    if not items:
        raise ValueError("empty corpus")
    results, skipped = [], []
    used = None
    for k, item in enumerate(items):
        stem = getattr(item, "stem", None) or (item[0] if isinstance(item, tuple) else str(k))
        try:
            stem, img, gt, coarse = _item_arrays(item)
        except (OSError, ValueError) as exc:
            skipped.append((str(stem), f"unreadable: {exc}"))
            continue
        if coarse is None:
            skipped.append((str(stem), "no coarse mask"))
            continue
        t0 = time.perf_counter()
        stages: list[np.ndarray] = []
        soft, used = refine_multires(img, coarse, schedule, model, chunk_pixels=chunk_pixels, stages=stages, return_schedule=True)
        secs = time.perf_counter() - t0
        gt_b = _binary(gt)
        refined = binarize(soft)
        res = ItemResult(
            str(stem),
            iou(coarse, gt_b), mba(coarse, gt_b),
            iou(refined, gt_b), mba(refined, gt_b),
            secs,
            [iou(binarize(s), gt_b) for s in stages],
            [mba(binarize(s), gt_b) for s in stages],
        )
        results.append(res)
        if progress is not None:
            progress(k, res)
    ratios = tuple(used.ratios) if used is not None else tuple(getattr(schedule, "ratios", schedule))
    return EvalReport(ratios, results, skipped, checkpoint)
