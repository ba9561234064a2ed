"""Adam with bias correction, and the halve-on-plateau learning-rate rule."""

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamState:
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params, grads, state, lr, beta1=BETA1, beta2=BETA2, eps=EPS):
    """Apply one bias-corrected Adam update in place.

    ``params`` maps names to tensors, ``grads`` maps the same names to
    arrays. Parameters without a gradient keep their moments frozen but the
    shared step counter still advances.
    """
    for name, g in grads.items():
        if name not in params:
            raise ContractError(f"adam_step: gradient for unknown parameter {name!r}")
        if np.shape(g) != params[name].shape:
            raise ContractError(
                f"adam_step: gradient shape {np.shape(g)} != parameter shape "
                f"{params[name].shape} for {name!r}")
    state.step += 1
    t = state.step
    for name, g in grads.items():
        p = params[name]
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        elif m.shape != p.shape:
            raise ContractError(f"adam_step: moment shape {m.shape} != {p.shape} for {name!r}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        if not np.isfinite(p.data).all():
            raise NumericError(f"parameter {name!r} became non-finite after update", kind="adam")
        state.first_moment[name] = m
        state.second_moment[name] = v
    return params, state


@dataclass
class PlateauHalving:
    """Halve the learning rate after ``patience`` epochs without improvement."""

    lr: float
    patience: int = 5
    best: float = float("-inf")
    since_improvement: int = 0
    halvings: int = 0

    def update(self, score):
        if score > self.best:
            self.best = score
            self.since_improvement = 0
            return False
        self.since_improvement += 1
        if self.since_improvement >= self.patience:
            self.lr *= 0.5
            self.halvings += 1
            self.since_improvement = 0
            return True
        return False
