"""Multi-task training objective: focal classification + smooth-L1 regression.

Classification covers every non-ignored anchor; regression covers only
positives.  Both sums divide by ``max(n_pos, normalizer_floor)`` and the
classification term carries the balance weight.  All logs go through
softplus so no path ever evaluates ``log(0)`` (stable for |logit| up to
~80).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anchors import AssignmentResult
from .exceptions import ConfigError, ContractError
from .heads import HeadOutputs, flatten_cls, flatten_deltas, unflatten_cls, unflatten_deltas
from .tensor import OpNode, Tensor


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.25
    gamma: float = 2.0
    lambda_: float = 3.0  # classification balance weight
    normalizer_floor: int = 1

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must be in (0,1), got {self.alpha}")
        if self.gamma < 0.0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.lambda_ <= 0.0:
            raise ConfigError(f"lambda must be > 0, got {self.lambda_}")
        if self.normalizer_floor < 1:
            raise ConfigError(f"normalizer_floor must be >= 1, got {self.normalizer_floor}")


def sigmoid(x):
    x = np.asarray(x)
    if x.dtype.kind != "f":
        x = x.astype(np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(x):
    x = np.asarray(x)
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def focal_loss_values(logits, positive, alpha: float, gamma: float) -> np.ndarray:
    """Per-anchor focal loss; ``positive`` is a boolean mask.

    Positive: -alpha * (1-p)^gamma * log(p); negative mirrors with 1-alpha
    and 1-p.  Expressed via softplus: a_t * sigmoid(q)^gamma * softplus(q)
    with q = -logit for positives, +logit for negatives.
    """
    logits = np.asarray(logits)
    positive = np.asarray(positive, dtype=bool)
    q = np.where(positive, -logits, logits)
    a_t = np.where(positive, alpha, 1.0 - alpha)
    return a_t * np.power(sigmoid(q), gamma) * softplus(q)


def focal_loss_grads(logits, positive, alpha: float, gamma: float) -> np.ndarray:
    """d(focal)/d(logit), elementwise."""
    logits = np.asarray(logits)
    positive = np.asarray(positive, dtype=bool)
    p = sigmoid(logits)
    log_p = -softplus(-logits)
    log_1mp = -softplus(logits)
    one_mp = sigmoid(-logits)
    pos_grad = alpha * np.power(one_mp, gamma) * (gamma * p * log_p - one_mp)
    neg_grad = (1.0 - alpha) * np.power(p, gamma) * (p - gamma * one_mp * log_1mp)
    return np.where(positive, pos_grad, neg_grad)


def focal_loss(logit: float, positive: bool, cfg: LossConfig = LossConfig()) -> float:
    """Scalar focal loss of one non-ignored anchor."""
    return float(focal_loss_values(np.float64(logit), positive, cfg.alpha, cfg.gamma))


def smooth_l1(x):
    """0.5*x^2 inside |x| < 1, |x| - 0.5 outside; elementwise."""
    x = np.asarray(x)
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def smooth_l1_grad(x):
    return np.clip(np.asarray(x), -1.0, 1.0)


@dataclass
class LossReport:
    """Differentiable total plus its already-normalized components."""

    total: Tensor
    cls_term: float
    reg_term: float
    n_pos: int

    @property
    def value(self) -> float:
        return self.total.item()


def focal_loss_sum(logits: Tensor, positive, cfg: LossConfig = LossConfig()) -> Tensor:
    """Differentiable sum of focal losses over a tensor of logits."""
    positive = np.asarray(positive, dtype=bool)
    if positive.shape != logits.shape:
        raise ContractError(
            f"focal_loss_sum: mask shape {positive.shape} != logits shape {logits.shape}"
        )
    values = focal_loss_values(logits.data, positive, cfg.alpha, cfg.gamma)
    out = np.array([values.sum()], dtype=logits.dtype)
    if not logits.requires_grad:
        return Tensor(out)

    def backward(grad: np.ndarray):
        g = focal_loss_grads(logits.data, positive, cfg.alpha, cfg.gamma)
        return (grad[0] * g.astype(logits.dtype),)

    return Tensor(out, node=OpNode("focal_loss_sum", (logits,), backward))


def multitask_loss(
    outputs: HeadOutputs, assignment: AssignmentResult, cfg: LossConfig = LossConfig()
) -> LossReport:
    """Joint objective over one image's head outputs.

    Ignored anchors contribute nothing to either term — their gradient is
    exactly zero.
    """
    a = outputs.anchors_per_loc
    counts = [l.grid_size ** 2 * a for l in outputs.levels]
    n = sum(counts)
    if n != len(assignment):
        raise ContractError(
            f"multitask_loss: head outputs carry {n} anchors but assignment has "
            f"{len(assignment)}; orderings must refer to the same anchor set"
        )

    dtype = outputs.levels[0].cls_logits.dtype
    flat_logits = np.concatenate(
        [flatten_cls(l.cls_logits.data, a) for l in outputs.levels]
    )
    flat_deltas = np.concatenate(
        [flatten_deltas(l.box_deltas.data, a) for l in outputs.levels]
    )

    pos = assignment.positive_mask
    valid = pos | assignment.negative_mask
    n_pos = assignment.n_pos
    normalizer = float(max(n_pos, cfg.normalizer_floor))

    cls_sum = focal_loss_values(flat_logits[valid], pos[valid], cfg.alpha, cfg.gamma).sum()
    targets = assignment.target_deltas.astype(flat_deltas.dtype)
    diff = flat_deltas[pos] - targets[pos]
    reg_sum = smooth_l1(diff).sum() if n_pos else 0.0

    cls_term = cfg.lambda_ * cls_sum / normalizer
    reg_term = reg_sum / normalizer
    total_value = np.array([cls_term + reg_term], dtype=dtype)

    inputs = tuple(l.cls_logits for l in outputs.levels) + tuple(
        l.box_deltas for l in outputs.levels
    )
    if not any(t.requires_grad for t in inputs):
        return LossReport(Tensor(total_value), float(cls_term), float(reg_term), n_pos)

    def backward(grad: np.ndarray):
        g = grad[0]
        dlogits = np.zeros(n, dtype=dtype)
        dlogits[valid] = (
            (cfg.lambda_ / normalizer)
            * focal_loss_grads(flat_logits[valid], pos[valid], cfg.alpha, cfg.gamma)
            * g
        )
        ddeltas = np.zeros((n, 4), dtype=dtype)
        if n_pos:
            ddeltas[pos] = (smooth_l1_grad(diff) / normalizer) * g
        contribs = []
        offset = 0
        for l, count in zip(outputs.levels, counts):
            contribs.append(unflatten_cls(dlogits[offset : offset + count], a, l.grid_size))
            offset += count
        offset = 0
        for l, count in zip(outputs.levels, counts):
            contribs.append(
                unflatten_deltas(ddeltas[offset : offset + count], a, l.grid_size)
            )
            offset += count
        return tuple(contribs)

    node = OpNode("multitask_loss", inputs, backward)
    return LossReport(Tensor(total_value, node=node), float(cls_term), float(reg_term), n_pos)
