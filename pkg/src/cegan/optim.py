"""Adam and the loss functions used for GAN pretraining and finetuning."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import ParamSet
from .tensor import ShapeError

CLAMP = 1e-7


@dataclass
class AdamState:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")


def adam_step(state: AdamState, params: ParamSet, grads: dict[str, np.ndarray]) -> ParamSet:
    """One bias-corrected Adam update, applied in place to ``params``.

    Every trainable entry needs a gradient. Gradients for frozen entries are
    accepted and ignored, so callers can backpropagate through frozen layers
    without filtering.
    """
    missing = [k for k, t in params.trainable.items() if t and k not in grads]
    if missing:
        raise KeyError(f"no gradient for trainable parameters {missing[:5]}")
    unknown = [k for k in grads if k not in params]
    if unknown:
        raise KeyError(f"gradient for unknown parameters {unknown[:5]}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for name, g in grads.items():
        if not params.trainable[name]:
            continue
        p = params.entries[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)).astype(p.dtype)
    return params


@dataclass
class LossValue:
    value: float
    grad: np.ndarray


def _clamped(p):
    pc = np.clip(p, CLAMP, 1 - CLAMP)
    inside = (p >= CLAMP) & (p <= 1 - CLAMP)
    return pc, inside


def bce_loss(predictions: np.ndarray, targets: np.ndarray,
             class_weights: np.ndarray | None = None) -> LossValue:
    """Mean over batch and classes of ``-w_c [t log p + (1-t) log(1-p)]``.

    Predictions are clamped to [1e-7, 1 - 1e-7]; the returned gradient is
    the exact derivative of the clamped loss (zero where the clamp is active).
    """
    if predictions.shape != targets.shape:
        raise ShapeError(f"predictions {predictions.shape} vs targets {targets.shape}")
    if not np.all((targets == 0) | (targets == 1)):
        raise ValueError("targets must be 0 or 1")
    p, inside = _clamped(predictions)
    t = targets.astype(p.dtype)
    w = np.ones(p.shape[-1], p.dtype) if class_weights is None else np.asarray(class_weights, p.dtype)
    terms = -w * (t * np.log(p) + (1 - t) * np.log1p(-p))
    grad = -w * (t / p - (1 - t) / (1 - p)) / p.size
    return LossValue(float(terms.mean()), (grad * inside).astype(predictions.dtype))


@dataclass
class PairLoss:
    value: float
    grad_real: np.ndarray
    grad_fake: np.ndarray


def gan_d_loss(d_real: np.ndarray, d_fake: np.ndarray) -> PairLoss:
    """``mean(-log D(x)) + mean(-log(1 - D(G(z))))``."""
    real = bce_loss(d_real, np.ones_like(d_real))
    fake = bce_loss(d_fake, np.zeros_like(d_fake))
    return PairLoss(real.value + fake.value, real.grad, fake.grad)


def gan_g_loss(d_fake: np.ndarray) -> LossValue:
    """Non-saturating generator loss ``mean(-log D(G(z)))``."""
    return bce_loss(d_fake, np.ones_like(d_fake))
