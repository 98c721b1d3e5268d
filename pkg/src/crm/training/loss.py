"""Four-term training loss: BCE, L1, L2 and a Sobel gradient term."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..diffcore import PreconditionError, Tensor, ops

BCE_EPS = 1e-6
SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL = np.stack([SOBEL_X, SOBEL_X.T])[:, None]  # 2 x 1 x 3 x 3


@dataclass(frozen=True)
class LossWeights:
    ce: float = 1.0
    l1: float = 0.5
    l2: float = 0.5
    grad: float = 5.0

    def __post_init__(self):
        if min(self.ce, self.l1, self.l2, self.grad) < 0:
            raise ValueError("loss weights must be non-negative")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.ce, self.l1, self.l2, self.grad)


def sobel(x: Tensor) -> Tensor:
    """Sobel x/y responses (N x 2 x H-2 x W-2) of an N x 1 x H x W map, no padding.

    Differences are taken before smoothing so a constant map gives exact zeros.
    """
    h, w = x.shape[-2:]
    dx = ops.sub(ops.getitem(x, (..., slice(None), slice(2, None))), ops.getitem(x, (..., slice(None), slice(0, w - 2))))
    dy = ops.sub(ops.getitem(x, (..., slice(2, None), slice(None))), ops.getitem(x, (..., slice(0, h - 2), slice(None))))

    def smooth(t, axis):
        n = t.shape[axis]
        part = [ops.getitem(t, (..., *(slice(k, n - 2 + k) if a == axis else slice(None) for a in (-2, -1)))) for k in range(3)]
        return ops.add(ops.add(part[0], ops.mul(part[1], 2.0)), part[2])

    return ops.concat([smooth(dx, -2), smooth(dy, -1)], axis=1)


def _nchw(t: Tensor) -> Tensor:
    if t.ndim == 2:
        return ops.reshape(t, (1, 1, *t.shape))
    if t.ndim == 3:
        return ops.reshape(t, (1, *t.shape))
    return t


def total_loss(pred, gt, weights: LossWeights | tuple = LossWeights()) -> tuple[Tensor, dict[str, float]]:
    """Weighted loss of a soft mask against the target.

    Returns the scalar loss tensor and the unweighted value of each term.
    """
    if not isinstance(weights, LossWeights):
        weights = LossWeights(*weights)
    p = pred if isinstance(pred, Tensor) else Tensor(pred)
    g = Tensor(np.asarray(getattr(gt, "data", gt), dtype=p.dtype))
    if p.shape != g.shape:
        raise PreconditionError(f"prediction {p.shape} and target {g.shape} differ in shape")
    pc = ops.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    one = Tensor(np.ones((), dtype=p.dtype))
    ll = ops.add(ops.mul(g, ops.log(pc)), ops.mul(ops.sub(one, g), ops.log(ops.sub(one, pc))))
    bce = ops.neg(ops.mean(ll))
    diff = ops.sub(p, g)
    l1 = ops.mean(ops.abs(diff))
    l2 = ops.mean(ops.square(diff))
    p4, g4 = _nchw(p), _nchw(g)
    if min(p4.shape[-2:]) >= 3:
        grad = ops.mean(ops.abs(ops.sub(sobel(p4), sobel(g4))))
    else:
        grad = Tensor(np.zeros((), dtype=p.dtype))
    terms = {"ce": bce, "l1": l1, "l2": l2, "grad": grad}
    total = None
    for name, w in zip(terms, weights.as_tuple()):
        t = ops.mul(terms[name], float(w))
        total = t if total is None else ops.add(total, t)
    return total, {k: float(v.data) for k, v in terms.items()}
