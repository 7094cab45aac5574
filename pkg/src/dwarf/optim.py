"""Adam with bias correction."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autograd import Tensor

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kwargs) -> "AdamState":
        state = cls(**kwargs)
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
        return state


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState) -> bool:
    """Apply one Adam update in place. Returns False (and leaves everything
    untouched) when any gradient is non-finite."""
    if len(state.m) != len(params):
        raise ValueError(f"AdamState tracks {len(state.m)} params, got {len(params)}")
    for p, g in zip(params, grads):
        if g is not None and not np.all(np.isfinite(g)):
            logger.warning("non-finite gradient in %s at step %d; update skipped", p.name or "param", state.step + 1)
            return False
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    step_size = state.lr * np.sqrt(1 - b2**t) / (1 - b1**t)
    eps_hat = state.eps * np.sqrt(1 - b2**t)
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.data.shape:
            raise ValueError(f"moment shape {m.shape} does not match parameter {p.data.shape}")
        if g is None:
            g = np.zeros_like(p.data)
        # in place to keep temporaries down on large models
        buf = np.multiply(g, 1 - b1)
        m *= b1
        m += buf
        np.multiply(g, g, out=buf)
        buf *= 1 - b2
        v *= b2
        v += buf
        np.sqrt(v, out=buf)
        buf += eps_hat
        np.divide(m, buf, out=buf)
        buf *= step_size
        p.data -= buf.astype(p.data.dtype, copy=False)
    return True
