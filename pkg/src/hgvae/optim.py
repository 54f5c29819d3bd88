import logging
import math
from collections.abc import Mapping

import numpy as np
from pydantic import ConfigDict, Field

from .base import BaseHGVAEObject
from .errors import NonFiniteError
from .tensor import Tensor

logger = logging.getLogger(__name__)


class AdamState(BaseHGVAEObject):
    """Moment accumulators and hyperparameters of the Adam update rule.

    The moment buffers are created lazily, one pair per parameter name, with the parameter's shape.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, extra="forbid")

    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    eps: float = Field(default=1e-8, gt=0.0)
    step: int = Field(default=0, ge=0)
    first_moment: dict[str, np.ndarray] = Field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = Field(default_factory=dict)


def check_finite(grads: Mapping[str, np.ndarray]) -> None:
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError(f"gradient of parameter '{name}'")


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    """L2 norm of all gradients taken together."""
    return math.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values()))


def clip_global_norm(
    grads: Mapping[str, np.ndarray], max_norm: float
) -> tuple[dict[str, np.ndarray], float]:
    """Rescale ``grads`` so their global norm is at most ``max_norm``.

    Returns the (possibly scaled) gradients and the norm measured before clipping.
    """
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    check_finite(grads)
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads), norm
    scale = min(1.0, max_norm / norm)
    clipped = {name: g * scale for name, g in grads.items()}
    # rounding can leave the rescaled norm a few ulps above max_norm
    while global_norm(clipped) > max_norm:
        scale = math.nextafter(scale, 0.0)
        clipped = {name: g * scale for name, g in grads.items()}
    return clipped, norm


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> dict[str, Tensor]:
    """One bias-corrected Adam descent step.

    Parameters without a gradient entry are returned unchanged. ``state`` is updated in place.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    check_finite(grads)
    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1**t
    correction2 = 1.0 - state.beta2**t
    updated: dict[str, Tensor] = {}
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            updated[name] = param
            continue
        if grad.shape != param.shape:
            raise ValueError(
                f"gradient for '{name}' has shape {grad.shape}, parameter has {param.shape}"
            )
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None or v is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.first_moment[name] = m
        state.second_moment[name] = v
        step = lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        updated[name] = Tensor(
            param.data - step, requires_grad=param.requires_grad, dtype=param.dtype, name=name
        )
    return updated
