"""Implicit decoder: a five-layer MLP evaluated at the four supporting corners
of every target pixel, blended with area weights into one mask logit.

The MLP's first layer is affine in the concatenated input [P, latent(z_k)],
so the fused path projects every latent cell once (W_lat @ latent) and then
gathers, instead of materializing (C + 6)-vectors for all pixels and corners.
That is algebraically identical to the explicit path in :func:`decode_explicit`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import cam
from .diffcore import PreconditionError, Tensor, ops
from .encoder import EncoderConfig, LatentFeature, encode, init_encoder

N_POSITION = 6


@dataclass(frozen=True)
class MLPConfig:
    in_dim: int = 64 + N_POSITION
    hidden: tuple[int, ...] = (256, 256, 256, 256)
    out_dim: int = 1

    def __post_init__(self):
        if len(self.hidden) != 4:
            raise ValueError("the decoder MLP has exactly five affine layers (four hidden widths)")

    @property
    def widths(self) -> list[int]:
        return [self.in_dim, *self.hidden, self.out_dim]

    @property
    def n_params(self) -> int:
        d = self.widths
        return sum(d[i] * d[i + 1] + d[i + 1] for i in range(len(d) - 1))


def init_mlp(cfg: MLPConfig, rng: np.random.Generator, prefix: str = "decoder", dtype=np.float32) -> dict[str, Tensor]:
    params = {}
    d = cfg.widths
    for i in range(len(d) - 1):
        std = math.sqrt(2.0 / d[i])
        params[f"{prefix}.fc{i}.weight"] = Tensor(
            (rng.standard_normal((d[i + 1], d[i])) * std).astype(dtype), requires_grad=True
        )
        params[f"{prefix}.fc{i}.bias"] = Tensor(np.zeros(d[i + 1], dtype=dtype), requires_grad=True)
    return params


def _n_layers(params: dict[str, Tensor], prefix: str) -> int:
    n = 0
    while f"{prefix}.fc{n}.weight" in params:
        n += 1
    return n


def mlp_forward(vec, params: dict[str, Tensor], prefix: str = "decoder") -> Tensor:
    """Logit(s) for input vector(s) of length in_dim; (..., in_dim) -> (...)."""
    x = vec if isinstance(vec, Tensor) else Tensor(vec)
    n = _n_layers(params, prefix)
    in_dim = params[f"{prefix}.fc0.weight"].shape[1]
    if x.shape[-1] != in_dim:
        raise PreconditionError(f"MLP expects input length {in_dim}, got {x.shape[-1]}")
    for i in range(n):
        x = ops.linear(x, params[f"{prefix}.fc{i}.weight"], params[f"{prefix}.fc{i}.bias"])
        if i < n - 1:
            x = ops.relu(x)
    return ops.reshape(x, x.shape[:-1])


def _mlp_tail(h: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    """Layers 1..n-1 applied to first-layer pre-activations."""
    n = _n_layers(params, prefix)
    x = ops.relu(h)
    for i in range(1, n):
        x = ops.linear(x, params[f"{prefix}.fc{i}.weight"], params[f"{prefix}.fc{i}.bias"])
        if i < n - 1:
            x = ops.relu(x)
    return x


def aggregate(logits, weights):
    """Normalized weighted mean over the leading (corner) axis."""
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("aggregation weights must be non-negative")
    total = w.sum(axis=0)
    if np.any(total == 0):
        raise ValueError("aggregation weights are all zero")
    w = w / total
    if isinstance(logits, Tensor) or (isinstance(logits, (list, tuple)) and any(isinstance(l, Tensor) for l in logits)):
        out = None
        for k in range(len(w)):
            lk = logits[k] if isinstance(logits, (list, tuple)) else ops.getitem(logits, k)
            term = ops.mul(lk, w[k].astype(lk.dtype) if np.ndim(w[k]) else float(w[k]))
            out = term if out is None else ops.add(out, term)
        return out
    logits = np.asarray(logits, dtype=np.float64)
    return (w * logits).sum(axis=0)


# ------------------------------------------------------------------ model

@dataclass(frozen=True)
class CRMConfig:
    """Full refinement model: encoder, decoder widths and the two ablation switches.

    ``use_cam`` feeds the six position channels to the MLP. ``use_implicit``
    blends over the four supporting corners: MLP outputs when position
    channels are on, bilinearly upsampled features otherwise (without position
    channels the corners differ only in their latent vector). When off, only
    the nearest corner is evaluated.
    """

    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    hidden: tuple[int, ...] = (256, 256, 256, 256)
    use_cam: bool = True
    use_implicit: bool = True

    @property
    def mlp(self) -> MLPConfig:
        extra = N_POSITION if self.use_cam else 0
        return MLPConfig(self.encoder.latent_channels + extra, tuple(self.hidden), 1)

    def to_dict(self) -> dict:
        e = self.encoder
        return {
            "base_channels": e.base_channels,
            "latent_channels": e.latent_channels,
            "output_stride": e.output_stride,
            "depth": e.depth,
            "global_context": e.global_context,
            "hidden": list(self.hidden),
            "use_cam": self.use_cam,
            "use_implicit": self.use_implicit,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CRMConfig":
        enc = EncoderConfig(
            base_channels=int(d["base_channels"]),
            latent_channels=int(d["latent_channels"]),
            output_stride=int(d["output_stride"]),
            depth=int(d["depth"]),
            global_context=bool(d["global_context"]),
        )
        return cls(enc, tuple(int(h) for h in d["hidden"]), bool(d["use_cam"]), bool(d["use_implicit"]))


@dataclass
class CRM:
    config: CRMConfig
    params: dict[str, Tensor]

    @classmethod
    def init(cls, config: CRMConfig, seed: int = 0, dtype=np.float32) -> "CRM":
        rng = np.random.default_rng(seed)
        params = init_encoder(config.encoder, rng, dtype=dtype)
        params.update(init_mlp(config.mlp, rng, dtype=dtype))
        return cls(config, params)

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(k, self.params[k]) for k in sorted(self.params)]

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def encode(self, i_coarse) -> LatentFeature:
        return encode(i_coarse, self.config.encoder, self.params)


# ----------------------------------------------------------------- decode

def _row_chunks(ht: int, chunk_pixels: Optional[int], wt: int) -> list[tuple[int, int]]:
    if not chunk_pixels:
        return [(0, ht)]
    rows = max(1, chunk_pixels // max(wt, 1))
    return [(r, min(r + rows, ht)) for r in range(0, ht, rows)]


def decode(
    latent: Tensor,
    target_shape: tuple[int, int],
    model: CRM,
    chunk_pixels: Optional[int] = None,
    prefix: str = "decoder",
) -> Tensor:
    """Mask logits (N x 1 x H_t x W_t) for a batch of latent maps (N x C x h x w).

    ``chunk_pixels`` bounds memory by decoding groups of whole target rows;
    chunking never changes the result.
    """
    if latent.ndim == 3:
        latent = ops.reshape(latent, (1, *latent.shape))
    n, c, h, w = latent.shape
    ht, wt = target_shape
    if ht < 1 or wt < 1:
        raise PreconditionError(f"target shape must be >= (1, 1), got {target_shape}")
    cfg = model.config
    params = model.params
    W0 = params[f"{prefix}.fc0.weight"]
    b0 = params[f"{prefix}.fc0.bias"]
    if W0.shape[1] != c + (N_POSITION if cfg.use_cam else 0):
        raise PreconditionError(f"decoder input width {W0.shape[1]} does not fit {c} latent channels")
    dtype = latent.dtype

    lat_flat = ops.reshape(ops.transpose(latent, (0, 2, 3, 1)), (n * h * w, c))
    if cfg.use_cam:
        W_pos = ops.getitem(W0, (slice(None), slice(0, N_POSITION)))
        W_lat = ops.getitem(W0, (slice(None), slice(N_POSITION, None)))
    else:
        W_lat = W0
    proj = ops.linear(lat_flat, W_lat)  # (n*h*w, hidden)

    grid = cam.make_coord_grid(ht, wt)
    u, v = cam.project(grid, (h, w))
    ratio = cam.feature_ratio((h, w), (ht, wt))
    batch_off = (np.arange(n) * (h * w))[:, None]

    pieces = []
    for r0, r1 in _row_chunks(ht, chunk_pixels, wt):
        sub = cam.CoordGrid(grid.ys[r0:r1], grid.xs)
        corners = cam.corner_offsets_and_weights(u[r0:r1], v, (h, w))
        q = (r1 - r0) * wt

        def gathered(flat_idx):
            idx = (batch_off + flat_idx.reshape(1, -1)).reshape(-1)
            return ops.gather_rows(proj, idx)

        if cfg.use_cam or not cfg.use_implicit:
            if cfg.use_implicit:
                ks = range(4)
                weights = corners.weight.reshape(4, 1, q, 1).astype(dtype)
            else:
                near = _nearest_corner(corners.weight)
                ks = [None]
            logits = []
            for k in ks:
                if k is None:
                    flat_idx = np.take_along_axis(corners.index, near[None], 0)[0]
                    rel = np.take_along_axis(corners.rel, near[None, None], 0)[0]
                else:
                    flat_idx, rel = corners.index[k], corners.rel[k]
                pre = gathered(flat_idx)
                if cfg.use_cam:
                    pos = cam.position_channels(rel, ratio, sub).reshape(q, N_POSITION).astype(dtype)
                    pos_term = ops.linear(Tensor(pos), W_pos, b0)
                    pre = ops.add(ops.reshape(pre, (n, q, -1)), pos_term)
                else:
                    pre = ops.add(ops.reshape(pre, (n, q, -1)), b0)
                logits.append(_mlp_tail(pre, params, prefix))
            if cfg.use_implicit:
                out = None
                for k, lk in enumerate(logits):
                    term = ops.mul(lk, weights[k])
                    out = term if out is None else ops.add(out, term)
            else:
                out = logits[0]
        else:
            # bilinear feature upsampling; the first layer is linear so blending
            # projected features equals projecting blended features
            weights = corners.weight.reshape(4, 1, q, 1).astype(dtype)
            pre = None
            for k in range(4):
                term = ops.mul(ops.reshape(gathered(corners.index[k]), (n, q, -1)), weights[k])
                pre = term if pre is None else ops.add(pre, term)
            out = _mlp_tail(ops.add(pre, b0), params, prefix)
        pieces.append(ops.reshape(out, (n, r1 - r0, wt)))
    logits = pieces[0] if len(pieces) == 1 else ops.concat(pieces, axis=1)
    return ops.reshape(logits, (n, 1, ht, wt))


def _nearest_corner(weight: np.ndarray) -> np.ndarray:
    """Index (0..3) of the highest-weight corner per pixel; ties go to the first."""
    return np.argmax(weight, axis=0)


def decode_explicit(latent: Tensor, target_shape: tuple[int, int], model: CRM, prefix: str = "decoder") -> Tensor:
    """Reference path: assemble (C+6)-vectors, run the MLP per corner, aggregate.

    Only for the full model (CAM + implicit aggregation) on a single latent
    map; meant for verification on small targets.
    """
    if not (model.config.use_cam and model.config.use_implicit):
        raise ValueError("decode_explicit covers the full model only")
    q = cam.assemble(latent, target_shape)
    logits = mlp_forward(Tensor(q.features.astype(latent.dtype)), model.params, prefix)
    return ops.reshape(aggregate(logits, q.weights), (1, *target_shape))


def refine_once(
    image,
    mask,
    target_shape: tuple[int, int],
    model: CRM,
    chunk_pixels: Optional[int] = None,
) -> Tensor:
    """Soft refined mask (1 x H_t x W_t, or N x 1 x H_t x W_t for batches).

    concat -> encode -> align to the target grid -> MLP per corner -> blend -> sigmoid.
    """
    img = image if isinstance(image, Tensor) else Tensor(image)
    msk = mask if isinstance(mask, Tensor) else Tensor(mask)
    if img.shape[-2:] != msk.shape[-2:]:
        raise PreconditionError(f"image {img.shape} and mask {msk.shape} are not aligned")
    if img.shape[-3] != 3 or msk.shape[-3] != 1:
        raise PreconditionError("expected a 3-channel image and a 1-channel mask")
    batched = img.ndim == 4
    x = ops.concat([img, msk], axis=-3)
    latent = model.encode(x).tensor
    logits = decode(latent, target_shape, model, chunk_pixels=chunk_pixels)
    out = ops.sigmoid(logits)
    return out if batched else ops.reshape(out, (1, *target_shape))
