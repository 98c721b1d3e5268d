"""Small residual CNN mapping [image, coarse mask] to a latent feature map.

stem conv -> strided residual stages -> global-context fusion -> skip fusion
from the stage one octave above the output stride.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .diffcore import PreconditionError, Tensor, ops

IN_CHANNELS = 4


@dataclass(frozen=True)
class EncoderConfig:
    base_channels: int = 32
    latent_channels: int = 64
    output_stride: int = 4
    depth: int = 2
    global_context: bool = True

    def __post_init__(self):
        s = self.output_stride
        if s not in (4, 8):
            raise ValueError(f"output_stride must be 4 or 8, got {s}")
        if self.latent_channels < 8:
            raise ValueError(f"latent_channels must be >= 8, got {self.latent_channels}")
        if self.base_channels < 1 or self.depth < 0:
            raise ValueError("base_channels must be >= 1 and depth >= 0")

    @property
    def n_stages(self) -> int:
        return int(math.log2(self.output_stride))

    def stage_channels(self) -> list[int]:
        chans = [self.base_channels * 2**j for j in range(self.n_stages - 1)]
        return chans + [self.latent_channels]


@dataclass
class LatentFeature:
    tensor: Tensor  # C x h x w, or N x C x h x w for a batch
    source_shape: tuple[int, int]

    @property
    def channels(self) -> int:
        return self.tensor.shape[-3]

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return self.tensor.shape[-2:]


def latent_shape(h: int, w: int, stride: int) -> tuple[int, int]:
    return -(-h // stride), -(-w // stride)


def _conv_param(rng, c_out, c_in, k, scale=1.0, dtype=np.float32):
    std = scale * math.sqrt(2.0 / (c_in * k * k))
    w = Tensor((rng.standard_normal((c_out, c_in, k, k)) * std).astype(dtype), requires_grad=True)
    b = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
    return w, b


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator, prefix: str = "encoder", dtype=np.float32) -> dict[str, Tensor]:
    """Kaiming fan-in init; the second conv of each residual block starts at half scale."""
    params: dict[str, Tensor] = {}

    def put(name, c_out, c_in, k, scale=1.0):
        w, b = _conv_param(rng, c_out, c_in, k, scale, dtype)
        params[f"{prefix}.{name}.weight"] = w
        params[f"{prefix}.{name}.bias"] = b

    put("stem", cfg.base_channels, IN_CHANNELS, 3)
    c_prev = cfg.base_channels
    for j, c in enumerate(cfg.stage_channels(), start=1):
        put(f"stage{j}.down", c, c_prev, 3)
        for d in range(cfg.depth):
            put(f"stage{j}.block{d}.conv1", c, c, 3)
            put(f"stage{j}.block{d}.conv2", c, c, 3, scale=0.5)
        c_prev = c
    C = cfg.latent_channels
    put("context", C, 2 * C, 1)
    skip_c = cfg.stage_channels()[-2] if cfg.n_stages > 1 else cfg.base_channels
    put("skip", C, skip_c, 1)
    return params


def encode(
    i_coarse,
    cfg: EncoderConfig,
    params: dict[str, Tensor],
    prefix: str = "encoder",
) -> LatentFeature:
    """Encode a 4 x H x W (or N x 4 x H x W) input to C x ceil(H/s) x ceil(W/s)."""
    x = i_coarse if isinstance(i_coarse, Tensor) else Tensor(i_coarse)
    if x.ndim not in (3, 4):
        raise PreconditionError(f"encoder input must be 4 x H x W or N x 4 x H x W, got {x.shape}")
    if x.shape[-3] != IN_CHANNELS:
        raise PreconditionError(f"encoder expects {IN_CHANNELS} input channels, got {x.shape[-3]}")
    H, W = x.shape[-2:]
    s = cfg.output_stride
    if H < s or W < s:
        raise PreconditionError(f"input {H}x{W} is smaller than the output stride {s}")

    def conv(name, t, stride=1, pad=None):
        w = params[f"{prefix}.{name}.weight"]
        k = w.shape[-1]
        return ops.conv2d(t, w, params[f"{prefix}.{name}.bias"], stride=stride, pad=k // 2 if pad is None else pad)

    h = ops.relu(conv("stem", x))
    skip = h
    for j in range(1, cfg.n_stages + 1):
        skip = h
        h = ops.relu(conv(f"stage{j}.down", h, stride=2))
        for d in range(cfg.depth):
            r = ops.relu(conv(f"stage{j}.block{d}.conv1", h))
            r = conv(f"stage{j}.block{d}.conv2", r)
            h = ops.relu(ops.add(h, r))

    C = cfg.latent_channels
    spatial = (-2, -1)
    if cfg.global_context:
        pooled = ops.mean(h, axis=spatial, keepdims=True)
        ctx_in = ops.concat([h, ops.broadcast_to(pooled, h.shape)], axis=-3)
        fused = conv("context", ctx_in)
    else:
        w = params[f"{prefix}.context.weight"]
        fused = ops.conv2d(h, ops.getitem(w, (slice(None), slice(0, C))), params[f"{prefix}.context.bias"])
    fused = ops.relu(fused)
    out = ops.add(fused, conv("skip", skip, stride=2, pad=0))
    expect = latent_shape(H, W, s)
    assert out.shape[-2:] == expect, (out.shape, expect)
    return LatentFeature(out, (H, W))


EncoderFn = Callable[[Tensor], LatentFeature]


def make_encoder_fn(cfg: EncoderConfig, params: dict[str, Tensor], prefix: str = "encoder") -> EncoderFn:
    """Bind config and params; any callable with this signature and shape law can stand in."""
    return lambda x: encode(x, cfg, params, prefix)
