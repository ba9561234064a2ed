"""Causal, complement and intervened losses and their weighted sum."""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor

VARIANTS = ("erm-baseline", "c-only", "c+t", "c+v", "full")
_TERMS = {
    "erm-baseline": (False, False),
    "c-only": (False, False),
    "c+t": (True, False),
    "c+v": (False, True),
    "full": (True, True),
}


def check_variant(variant):
    if variant not in _TERMS:
        raise ContractError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return variant


def uses_complement(variant):
    return _TERMS[check_variant(variant)][0]


def uses_intervention(variant):
    return _TERMS[check_variant(variant)][1]


def loss_causal(logits_c, answer):
    return T.cross_entropy(logits_c, answer)


def loss_complement(logits_t):
    """KL from the complement prediction to the uniform answer distribution."""
    n = logits_t.shape[-1]
    if n < 2:
        raise ContractError("loss_complement: need at least 2 answers")
    return T.kl_divergence(logits_t, np.full(n, 1.0 / n))


def loss_intervened(logits_vstar, logits_c):
    """KL from the intervened prediction to the (detached) causal prediction."""
    if logits_vstar.shape != logits_c.shape:
        raise ContractError(
            f"loss_intervened: shapes {logits_vstar.shape} and {logits_c.shape} differ")
    z = logits_c.data if isinstance(logits_c, Tensor) else np.asarray(logits_c, float)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return T.kl_divergence(logits_vstar, e / e.sum(axis=-1, keepdims=True))


@dataclass
class LossBreakdown:
    loss_c: float
    loss_t: Optional[float]
    loss_v: Optional[float]
    total: Tensor
    lambda1: float
    lambda2: float


def total_loss(loss_c, loss_t, loss_v, lambda1, lambda2, variant):
    """L_c + lambda1 * L_t + lambda2 * L_v*, keeping only the terms the variant trains.

    Terms passed as None (or dropped by the variant) are reported as absent
    and contribute nothing.
    """
    use_t, use_v = _TERMS[check_variant(variant)]
    if lambda1 < 0 or lambda2 < 0:
        raise ContractError(f"loss weights must be nonnegative, got {lambda1}, {lambda2}")
    loss_t = loss_t if use_t else None
    loss_v = loss_v if use_v else None
    total = loss_c
    if loss_t is not None:
        total = T.add(total, T.scale(loss_t, lambda1))
    if loss_v is not None:
        total = T.add(total, T.scale(loss_v, lambda2))
    return LossBreakdown(
        loss_c=loss_c.item(),
        loss_t=None if loss_t is None else loss_t.item(),
        loss_v=None if loss_v is None else loss_v.item(),
        total=total, lambda1=lambda1, lambda2=lambda2)


def masked_mean(values, weights):
    """Mean of ``values`` over entries with nonzero weight, or None if there are none."""
    weights = np.asarray(weights, dtype=np.float64)
    count = weights.sum()
    if count == 0:
        return None
    return T.scale(T.sum(T.multiply(values, weights)), 1.0 / count)
