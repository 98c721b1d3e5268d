"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import ops
from .tensor import Tensor

FD_STEP = 1e-5
# Entries whose true gradient is below this magnitude are compared in absolute terms.
REL_FLOOR = 1e-4


@dataclass(frozen=True)
class GradCheckReport:
    op_id: str
    max_rel_err: float
    max_abs_err: float
    n_checked: int


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    *,
    op_id: str = "custom",
    seed: int = 0,
    step: float = FD_STEP,
    max_entries: Optional[int] = None,
) -> GradCheckReport:
    """Compare backward() against central differences of ``sum(fn(*x) * w)``.

    ``w`` is a fixed random weighting so every output element contributes.
    With ``max_entries`` only a random subset of each input's entries is
    perturbed (useful for models with many parameters).
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    w = rng.standard_normal(out.shape)
    ops.sum(ops.mul(out, Tensor(w))).backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def objective() -> float:
        return float(np.sum(fn(*[Tensor(a) for a in arrays]).data * w))

    max_rel = 0.0
    max_abs = 0.0
    count = 0
    for arr, grad in zip(arrays, analytic):
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        gflat = grad.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = objective()
            flat[i] = orig - step
            fm = objective()
            flat[i] = orig
            num = (fp - fm) / (2 * step)
            err = abs(gflat[i] - num)
            rel = err / max(abs(gflat[i]), abs(num), REL_FLOOR)
            max_abs = max(max_abs, err)
            max_rel = max(max_rel, rel)
            count += 1
    return GradCheckReport(op_id, max_rel, max_abs, count)


def _normal(rng, shape):
    return rng.standard_normal(shape)


def _away_from_zero(rng, shape):
    x = rng.standard_normal(shape)
    return np.sign(x) * (np.abs(x) + 0.1)


def _clip_safe(rng, shape):
    # magnitudes in [0, 0.04] or [0.06, 0.18]; the clip bounds are +-0.05
    u = rng.uniform(0.0, 0.16, shape)
    return np.where(u < 0.04, u, u + 0.02) * rng.choice([-1.0, 1.0], size=shape)


def _positive(rng, shape):
    return rng.uniform(0.5, 2.0, shape)


@dataclass(frozen=True)
class _OpSpec:
    fn: Callable[..., Tensor]
    shapes: tuple[tuple[int, ...], ...]
    gens: tuple[Callable, ...] = ()

    def generate(self, rng, shapes):
        gens = self.gens or (_normal,) * len(shapes)
        return [g(rng, s) for g, s in zip(gens, shapes)]


OPS: dict[str, _OpSpec] = {
    "add": _OpSpec(ops.add, ((3, 4), (3, 4))),
    "add_broadcast": _OpSpec(ops.add, ((2, 3, 4), (4,))),
    "sub": _OpSpec(ops.sub, ((3, 4), (3, 1))),
    "mul": _OpSpec(ops.mul, ((3, 4), (3, 4))),
    "div": _OpSpec(ops.div, ((3, 4), (3, 4)), (_normal, _away_from_zero)),
    "neg": _OpSpec(ops.neg, ((5,),)),
    "abs": _OpSpec(ops.abs, ((4, 5),), (_away_from_zero,)),
    "square": _OpSpec(ops.square, ((4, 5),)),
    "exp": _OpSpec(ops.exp, ((4, 5),)),
    "log": _OpSpec(ops.log, ((4, 5),), (_positive,)),
    "relu": _OpSpec(ops.relu, ((4, 5),), (_away_from_zero,)),
    "sigmoid": _OpSpec(ops.sigmoid, ((4, 5),)),
    "clip": _OpSpec(lambda x: ops.clip(x, -0.05, 0.05), ((4, 5),), (_clip_safe,)),
    "sum": _OpSpec(ops.sum, ((3, 4),)),
    "sum_axis": _OpSpec(lambda x: ops.sum(x, axis=1), ((3, 4, 2),)),
    "mean": _OpSpec(ops.mean, ((3, 4),)),
    "mean_axis": _OpSpec(lambda x: ops.mean(x, axis=(1, 2), keepdims=True), ((3, 4, 5),)),
    "reshape": _OpSpec(lambda x: ops.reshape(x, (6, 2)), ((3, 4),)),
    "transpose": _OpSpec(lambda x: ops.transpose(x, (2, 0, 1)), ((2, 3, 4),)),
    "broadcast_to": _OpSpec(lambda x: ops.broadcast_to(x, (3, 4, 5)), ((4, 1),)),
    "concat": _OpSpec(lambda a, b: ops.concat([a, b], axis=0), ((2, 3, 3), (3, 3, 3))),
    "getitem": _OpSpec(lambda x: ops.getitem(x, (slice(None), slice(1, 3))), ((3, 4),)),
    "gather_rows": _OpSpec(lambda x: ops.gather_rows(x, np.array([0, 2, 2, 1, 0])), ((3, 4),)),
    "matmul": _OpSpec(ops.matmul, ((3, 4), (4, 2))),
    "linear": _OpSpec(ops.linear, ((5, 4), (3, 4), (3,))),
    "conv2d": _OpSpec(lambda x, w, b: ops.conv2d(x, w, b, stride=1, pad=1), ((2, 6, 6), (3, 2, 3, 3), (3,))),
    "conv2d_valid": _OpSpec(lambda x, w, b: ops.conv2d(x, w, b), ((2, 6, 6), (3, 2, 3, 3), (3,))),
    "conv2d_strided": _OpSpec(
        lambda x, w, b: ops.conv2d(x, w, b, stride=2, pad=1), ((2, 7, 6), (3, 2, 3, 3), (3,))
    ),
    "conv2d_1x1_strided": _OpSpec(
        lambda x, w: ops.conv2d(x, w, stride=2), ((2, 5, 6), (3, 2, 1, 1))
    ),
    "conv2d_batched": _OpSpec(lambda x, w: ops.conv2d(x, w, pad=1), ((2, 2, 5, 5), (2, 2, 3, 3))),
    "resize_bilinear_up": _OpSpec(lambda x: ops.resize_bilinear(x, 7, 9), ((2, 3, 4),)),
    "resize_bilinear_down": _OpSpec(lambda x: ops.resize_bilinear(x, 3, 2), ((2, 7, 5),)),
}


def grad_check(op_id: str, input_shapes: Optional[Sequence[Sequence[int]]] = None, seed: int = 0) -> GradCheckReport:
    """Grad-check a registered op on random float64 inputs.

    Inputs for ops with kinks (relu, abs, clip) are kept away from the kink so
    the central difference never straddles it.
    """
    spec = OPS[op_id]
    shapes = tuple(tuple(s) for s in input_shapes) if input_shapes is not None else spec.shapes
    rng = np.random.default_rng(seed)
    inputs = spec.generate(rng, shapes)
    return check_gradients(spec.fn, inputs, op_id=op_id, seed=seed)
