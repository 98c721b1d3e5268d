"""Optimization loop with a step learning-rate schedule and periodic checkpoints."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from ..decoder import CRM, CRMConfig, refine_once
from ..diffcore import NonFiniteGradientError, OptimizerState, adam_step
from ..encoder import EncoderConfig
from .checkpoint import Checkpoint, save_checkpoint
from .loss import LossWeights, total_loss
from .sampling import TAU_RANGE, sample_batch

log = logging.getLogger(__name__)

LR = 2.25e-4
DESK_LR = 1e-3
LR_DECAY = 0.1


def desk_model_config(**overrides) -> CRMConfig:
    """The small model used for CPU-scale runs."""
    base = dict(encoder=EncoderConfig(base_channels=32, latent_channels=64, output_stride=4, depth=2), hidden=(32,) * 4)
    base.update(overrides)
    return CRMConfig(**base)


def desk_train_config(**overrides) -> "TrainConfig":
    """Training settings for the desk model: from-scratch weights need a larger step size."""
    return TrainConfig(**{"lr": DESK_LR, **overrides})


@dataclass(frozen=True)
class TrainConfig:
    patch_size: int = 64
    total_steps: int = 3000
    lr: float = LR
    lr_decay_steps: Optional[tuple[int, ...]] = None  # default: total/2 and 5*total/6
    batch_size: int = 8
    loss_weights: tuple[float, float, float, float] = (1.0, 0.5, 0.5, 5.0)
    seed: int = 0
    checkpoint_every: int = 500
    tau_range: tuple[float, float] = TAU_RANGE
    # each batch's input is rescaled by a ratio drawn log-uniformly from this
    # range before encoding; the target stays at patch size. (1, 1) = off

    def __post_init__(self):
        if self.total_steps < 1 or self.batch_size < 1 or self.patch_size < 8:
            raise ValueError("total_steps and batch_size must be >= 1 and patch_size >= 8")
        if self.lr_decay_steps is None:
            t = self.total_steps
            # very short runs collapse the two drops into one
            object.__setattr__(self, "lr_decay_steps", tuple(sorted({t // 2, (5 * t) // 6})))
        steps = tuple(int(s) for s in self.lr_decay_steps)
        object.__setattr__(self, "lr_decay_steps", steps)
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError(f"decay steps must be strictly increasing, got {steps}")
        if steps and steps[-1] >= self.total_steps:
            raise ValueError(f"decay steps must be < total_steps ({self.total_steps}), got {steps}")
        object.__setattr__(self, "loss_weights", tuple(float(w) for w in self.loss_weights))
        LossWeights(*self.loss_weights)
        object.__setattr__(self, "tau_range", tuple(float(t) for t in self.tau_range))

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        """Patch 224 and 45,000 steps (drops at 22,500 and 37,500)."""
        return cls(**{"patch_size": 224, "total_steps": 45000, **overrides})

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lr_decay_steps"] = list(self.lr_decay_steps)
        d["loss_weights"] = list(self.loss_weights)
        d["tau_range"] = list(self.tau_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        kw = {k: v for k, v in d.items() if k in names}
        for k in ("lr_decay_steps", "loss_weights", "tau_range"):
            if kw.get(k) is not None:
                kw[k] = tuple(kw[k])
        return cls(**kw)


def lr_at(step: int, config: TrainConfig) -> float:
    """Learning rate for 0-based ``step``: base rate times 0.1 per decay step already reached."""
    drops = sum(1 for s in config.lr_decay_steps if step >= s)
    return config.lr * LR_DECAY**drops


class TrainingAborted(RuntimeError):
    """Raised on a non-finite loss or gradient; carries the last good checkpoint."""

    def __init__(self, message: str, checkpoint: Checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: list[float] = field(default_factory=list)
    terms: list[dict] = field(default_factory=list)

    def to_model(self) -> CRM:
        return self.checkpoint.to_model()


def train_step(model: CRM, state: OptimizerState, batch, weights, lr: float) -> tuple[float, dict]:
    imgs, gts, coarse = batch
    params = model.parameters()
    for p in params:
        p.grad = None
    pred = refine_once(imgs, coarse, imgs.shape[-2:], model)
    loss, terms = total_loss(pred, gts, weights)
    value = float(loss.data)
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite loss {value}")
    loss.backward()
    adam_step(params, [p.grad for p in params], state, lr=lr)
    return value, terms


def train(
    config: TrainConfig,
    dataset,
    model_config: Optional[CRMConfig] = None,
    *,
    out_dir=None,
    init: Optional[Checkpoint] = None,
    callback: Optional[Callable[[int, float, dict], None]] = None,
    fixed_batch=None,
) -> TrainResult:
    """Train a refinement model; deterministic for a given config and dataset.

    ``out_dir`` receives ``ckpt_<step>.crm`` every ``checkpoint_every`` steps
    and ``final.crm`` at the end. ``fixed_batch`` reuses one batch for every
    step (overfitting checks).
    """
    model_config = model_config or desk_model_config()
    model = init.to_model() if init is not None else CRM.init(model_config, seed=config.seed)
    start = init.step if init is not None else 0
    params = model.parameters()
    state = OptimizerState.for_params(params, lr=config.lr)
    rng = np.random.default_rng([config.seed, 0x7A1])
    weights = LossWeights(*config.loss_weights)
    cfg_dict = config.to_dict()
    out = Path(out_dir) if out_dir is not None else None

    last_good = Checkpoint.from_model(model, start, cfg_dict)
    losses, all_terms = [], []
    for step in range(start, config.total_steps):
        batch = fixed_batch if fixed_batch is not None else sample_batch(
            dataset, config.patch_size, config.batch_size, rng, config.tau_range
        )
        try:
            value, terms = train_step(model, state, batch, weights, lr_at(step, config))
        except (FloatingPointError, NonFiniteGradientError) as exc:
            if out is not None:
                save_checkpoint(last_good, out / "last_good.crm")
            raise TrainingAborted(f"step {step}: {exc}", last_good) from exc
        losses.append(value)
        all_terms.append(terms)
        if callback is not None:
            callback(step, value, terms)
        done = step + 1
        if config.checkpoint_every and done % config.checkpoint_every == 0:
            last_good = Checkpoint.from_model(model, done, cfg_dict)
            if out is not None:
                save_checkpoint(last_good, out / f"ckpt_{done:06d}.crm")
    final = Checkpoint.from_model(model, config.total_steps, cfg_dict)
    if out is not None:
        save_checkpoint(final, out / "final.crm")
        write_loss_log(out / "loss.tsv", losses, all_terms, start)
    return TrainResult(final, losses, all_terms)


def write_loss_log(path, losses, terms, start: int = 0) -> None:
    lines = ["step\tloss\tce\tl1\tl2\tgrad"]
    for k, (v, t) in enumerate(zip(losses, terms)):
        lines.append(f"{start + k}\t{v:.8g}\t{t['ce']:.8g}\t{t['l1']:.8g}\t{t['l2']:.8g}\t{t['grad']:.8g}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
