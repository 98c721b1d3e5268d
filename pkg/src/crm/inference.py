"""Multi-resolution refinement.

Each stage feeds the full-resolution image and the current mask, rescaled by
the stage ratio, through the encoder, and always decodes at the full output
resolution. The mask passed between stages stays soft.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .decoder import CRM, CRMConfig, N_POSITION, decode
from .diffcore import PreconditionError, Tensor, no_grad, ops

DEFAULT_RATIOS = (0.125, 0.25, 0.5, 1.0)


def scaled_size(n: int, ratio: float) -> int:
    """Side length after rescaling by ``ratio`` (round half up, at least 1)."""
    return max(1, int(math.floor(n * ratio + 0.5)))


@dataclass(frozen=True)
class RefinementSchedule:
    ratios: tuple[float, ...]
    min_side: int = 32

    def __post_init__(self):
        r = tuple(float(x) for x in self.ratios)
        object.__setattr__(self, "ratios", r)
        if not r:
            raise PreconditionError("schedule has no ratios")
        if any(not (0.0 < x <= 1.0) for x in r):
            raise PreconditionError(f"ratios must lie in (0, 1], got {r}")
        if any(b <= a for a, b in zip(r, r[1:])):
            raise PreconditionError(f"ratios must be strictly increasing, got {r}")
        if r[-1] != 1.0:
            raise PreconditionError(f"the last ratio must be 1.0, got {r[-1]}")
        if self.min_side < 1:
            raise PreconditionError("min_side must be >= 1")

    def __len__(self) -> int:
        return len(self.ratios)

    def __iter__(self):
        return iter(self.ratios)

    def for_shape(self, h: int, w: int) -> "RefinementSchedule":
        """Drop ratios whose rescaled long side falls below ``min_side``."""
        long_side = max(h, w)
        kept = tuple(r for r in self.ratios if scaled_size(long_side, r) >= self.min_side)
        if not kept:
            raise PreconditionError(f"no ratio keeps the long side {long_side} at >= {self.min_side} px")
        return RefinementSchedule(kept, self.min_side)


def default_schedule(min_side: int = 32) -> RefinementSchedule:
    return RefinementSchedule(DEFAULT_RATIOS, min_side)


def uniform_schedule(n: int, min_side: int = 32) -> RefinementSchedule:
    """n ratios k/n for k = 1..n."""
    if n < 1:
        raise PreconditionError(f"n must be >= 1, got {n}")
    return RefinementSchedule(tuple(k / n for k in range(1, n + 1)), min_side)


def parse_schedule(text: str, min_side: int = 32) -> RefinementSchedule:
    """``default``, ``uniform:N`` or a comma-separated ratio list."""
    t = text.strip().lower()
    if t == "default":
        return default_schedule(min_side)
    if t.startswith("uniform:"):
        try:
            n = int(t.split(":", 1)[1])
        except ValueError:
            raise PreconditionError(f"bad schedule spec {text!r}") from None
        return uniform_schedule(n, min_side)
    try:
        ratios = tuple(float(x) for x in t.split(",") if x.strip())
    except ValueError:
        raise PreconditionError(f"bad schedule spec {text!r}") from None
    return RefinementSchedule(ratios, min_side)


def _as_schedule(schedule) -> RefinementSchedule:
    if isinstance(schedule, RefinementSchedule):
        return schedule
    if isinstance(schedule, str):
        return parse_schedule(schedule)
    return RefinementSchedule(tuple(schedule))


def refine_stage(
    image: np.ndarray,
    mask: np.ndarray,
    ratio: float,
    model: CRM,
    chunk_pixels: Optional[int] = None,
) -> np.ndarray:
    """One stage: rescale [image, mask] by ``ratio``, encode, decode at full size."""
    h, w = image.shape[-2:]
    x = ops.concat([Tensor(image), Tensor(mask)], axis=-3)
    if ratio != 1.0:
        x = ops.resize_bilinear(x, scaled_size(h, ratio), scaled_size(w, ratio))
    latent = model.encode(x).tensor
    out = ops.sigmoid(decode(latent, (h, w), model, chunk_pixels=chunk_pixels))
    return out.data.reshape(1, h, w)


def refine_multires(
    image,
    coarse,
    schedule,
    model: CRM,
    *,
    chunk_pixels: Optional[int] = None,
    trace_dir=None,
    stages: Optional[list] = None,
    return_schedule: bool = False,
):
    """Soft refined mask (1 x H x W) after running every stage of ``schedule``.

    ``stages``, if given, receives each stage's soft mask; ``trace_dir`` gets
    one PNG per stage.
    """
    img = np.asarray(getattr(image, "data", image), dtype=np.float32)
    msk = np.asarray(getattr(coarse, "data", coarse), dtype=np.float32)
    if msk.ndim == 2:
        msk = msk[None]
    if img.ndim != 3 or img.shape[0] != 3:
        raise PreconditionError(f"image must be 3 x H x W, got {img.shape}")
    if msk.shape != (1, *img.shape[1:]):
        raise PreconditionError(f"coarse mask {msk.shape} is not aligned with image {img.shape}")
    sched = _as_schedule(schedule).for_shape(*img.shape[1:])
    if trace_dir is not None:
        from .data.io import write_mask_png

        trace_dir = Path(trace_dir)
        trace_dir.mkdir(parents=True, exist_ok=True)
    cur = msk
    with no_grad():
        for i, r in enumerate(sched.ratios):
            cur = refine_stage(img, cur, r, model, chunk_pixels)
            if stages is not None:
                stages.append(cur)
            if trace_dir is not None:
                write_mask_png(cur, trace_dir / f"stage{i}_r{r:g}.png")
    return (cur, sched) if return_schedule else cur


def encoder_macs(cfg, in_shape: tuple[int, int]) -> int:
    """Multiply-accumulates of one encoder pass on an ``in_shape`` input."""
    h, w = in_shape
    total = 0

    def conv(c_out, c_in, k, hh, ww):
        return c_out * c_in * k * k * hh * ww

    total += conv(cfg.base_channels, 4, 3, h, w)
    c_prev = cfg.base_channels
    skip_c = c_prev
    for c in cfg.stage_channels():
        skip_c = c_prev
        h, w = -(-h // 2), -(-w // 2)
        total += conv(c, c_prev, 3, h, w) + cfg.depth * 2 * conv(c, c, 3, h, w)
        c_prev = c
    C = cfg.latent_channels
    total += conv(C, 2 * C if cfg.global_context else C, 1, h, w) + conv(C, skip_c, 1, h, w)
    return total


def decoder_macs(cfg: CRMConfig, latent_shape: tuple[int, int], target_shape: tuple[int, int]) -> int:
    """Multiply-accumulates of the decoder as executed (latent projection shared across pixels)."""
    widths = cfg.mlp.widths
    h0 = widths[1]
    n_lat = latent_shape[0] * latent_shape[1]
    q = target_shape[0] * target_shape[1]
    proj = n_lat * cfg.encoder.latent_channels * h0
    tail = sum(a * b for a, b in zip(widths[1:-1], widths[2:]))
    if cfg.use_cam:
        evals = 4 if cfg.use_implicit else 1
        per_eval = N_POSITION * h0 + tail
        return proj + q * evals * per_eval
    if cfg.use_implicit:
        return proj + q * (4 * h0 + tail)
    return proj + q * tail


def stage_macs(cfg: CRMConfig, in_shape: tuple[int, int], target_shape: tuple[int, int]) -> int:
    s = cfg.encoder.output_stride
    lat = (-(-in_shape[0] // s), -(-in_shape[1] // s))
    return encoder_macs(cfg.encoder, in_shape) + decoder_macs(cfg, lat, target_shape)


def binarize(soft, threshold: float = 0.5) -> np.ndarray:
    """1 where ``soft >= threshold``, else 0 (uint8)."""
    return (np.asarray(getattr(soft, "data", soft)) >= threshold).astype(np.uint8)
