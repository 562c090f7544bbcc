"""SGD with heavy-ball momentum, weight decay and cosine-annealed LR.

The momentum buffer is part of the coordination surface: strategies that
permute optimizer state act on it with the same coordinate permutations as
the parameters, so its shape must always equal the parameter shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericAbort, ValidationError
from .params import LayeredParams


@dataclass
class OptState:
    """Per-model optimizer state and hyperparameters."""

    momentum: LayeredParams
    mu: float = 0.9
    weight_decay: float = 1e-4
    lr_max: float = 0.1
    lr_min: float = 1e-4

    @classmethod
    def for_params(cls, params: LayeredParams, mu: float = 0.9, weight_decay: float = 1e-4,
                   lr_max: float = 0.1, lr_min: float = 1e-4) -> "OptState":
        return cls(momentum=LayeredParams.zeros_like(params), mu=mu,
                   weight_decay=weight_decay, lr_max=lr_max, lr_min=lr_min)


def cosine_lr(t: int, t_total: int, lr_max: float = 0.1, lr_min: float = 1e-4) -> float:
    """Cosine annealing: lr_max at t=0 down to lr_min at t=t_total.

    Steps past t_total clamp to lr_min.
    """
    if t < 0:
        raise ValidationError(f"step must be non-negative, got {t}")
    if t_total <= 0:
        raise ValidationError(f"t_total must be positive, got {t_total}")
    if t > t_total:
        return lr_min
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / t_total))


def sgd_step(params: LayeredParams, grads: LayeredParams, state: OptState, lr: float,
             step: int | None = None, model: int | None = None) -> None:
    """One in-place update: g' = g + wd*theta; v <- mu*v + g'; theta <- theta - lr*v.

    Weight decay folds into the gradient before the buffer update
    (heavy-ball convention, not Nesterov).  The caller owns params and
    state exclusively.
    """
    if params.shapes != grads.shapes:
        raise ValidationError(f"grad shapes {grads.shapes} != param shapes {params.shapes}")
    for k, g in enumerate(grads.layers):
        if not np.all(np.isfinite(g)):
            raise NumericAbort(f"non-finite gradient in tensor {k}", step=step, model=model)
    for theta, g, v in zip(params.layers, grads.layers, state.momentum.layers):
        np.multiply(v, state.mu, out=v)
        v += g
        if state.weight_decay:
            v += state.weight_decay * theta
        theta -= lr * v
