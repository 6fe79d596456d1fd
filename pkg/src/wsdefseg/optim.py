"""SGD with heavy-ball momentum and L2 weight decay folded into the gradient."""

from __future__ import annotations

import logging
from typing import Mapping, MutableMapping, Optional

import numpy as np

from .config import SgdConfig
from .errors import NumericsError
from .tensor import Tensor

logger = logging.getLogger(__name__)


def sgd_step(
    params: MutableMapping[str, Tensor],
    grads: Mapping[str, Optional[np.ndarray]],
    velocity: MutableMapping[str, np.ndarray],
    cfg: SgdConfig,
    lr: Optional[float] = None,
) -> None:
    """One update, in place on ``params`` and ``velocity``::

        v <- momentum * v + grad + weight_decay * p
        p <- p - lr * v

    A missing gradient counts as zero. Every gradient is checked before anything changes.

    Raises:
        NumericsError: If any gradient holds NaN or Inf; no parameter is touched.
    """
    lr = cfg.learning_rate if lr is None else lr
    bad = [name for name, g in grads.items() if g is not None and not np.all(np.isfinite(g))]
    if bad:
        raise NumericsError(f"non-finite gradients for {bad}; step aborted")
    for name, param in params.items():
        g = grads.get(name)
        g = np.zeros(param.shape) if g is None else g
        v = velocity.get(name)
        v = np.zeros(param.shape) if v is None else v
        v = cfg.momentum * v + g + cfg.weight_decay * param.data
        velocity[name] = v
        params[name] = Tensor(param.data - lr * v, requires_grad=True, name=name)


def clip_grad_norm(grads: MutableMapping[str, Optional[np.ndarray]], max_norm: float) -> float:
    """Scale every gradient in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values() if g is not None)))
    if norm > max_norm:
        scale = max_norm / norm
        for name, g in grads.items():
            if g is not None:
                grads[name] = g * scale
    return norm


class Sgd:
    """Optimizer state for one model: velocities plus the epoch-decayed learning rate."""

    def __init__(self, params: MutableMapping[str, Tensor], cfg: SgdConfig):
        self.params = params
        self.cfg = cfg
        self.lr = cfg.learning_rate
        self.velocity: dict[str, np.ndarray] = {}
        self.steps = 0

    def step(self) -> None:
        grads = {name: t.grad for name, t in self.params.items()}
        if self.cfg.max_grad_norm is not None:
            norm = clip_grad_norm(grads, self.cfg.max_grad_norm)
            if norm > self.cfg.max_grad_norm:
                logger.debug("gradient norm %.4g clipped to %.4g", norm, self.cfg.max_grad_norm)
        sgd_step(self.params, grads, self.velocity, self.cfg, self.lr)
        self.steps += 1

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def end_epoch(self) -> float:
        self.lr *= self.cfg.lr_decay
        logger.debug("learning rate decayed to %.6g", self.lr)
        return self.lr
