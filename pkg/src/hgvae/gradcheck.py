"""Central finite-difference checks of tape gradients."""

from collections.abc import Callable

import numpy as np

from .base import BaseHGVAEObject
from .tensor import GradientTape, Tensor, backward

STEP = 1e-5


class GradientCheck(BaseHGVAEObject):
    errors: list[float]
    """Relative error per input: ``|analytic - numeric| / (|analytic| + |numeric|)`` in L2 norm."""
    checked: list[int]

    @property
    def max_error(self) -> float:
        return max(self.errors, default=0.0)

    def ok(self, tolerance: float = 1e-4) -> bool:
        return self.max_error < tolerance


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_gradients(
    fn: Callable[..., Tensor],
    *inputs: np.ndarray,
    h: float = STEP,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradientCheck:
    """Compare the tape gradient of ``fn`` with central differences of step ``h``.

    ``fn`` receives one tensor per input. A non-scalar output is reduced with fixed
    random weights first. ``max_entries`` limits how many randomly chosen entries
    of each input are perturbed.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    weights: np.ndarray | None = None

    def scalar(*tensors: Tensor) -> Tensor:
        nonlocal weights
        out = fn(*tensors)
        if out.size == 1:
            return out.sum()
        if weights is None:
            weights = rng.standard_normal(out.shape)
        return (out * Tensor(weights)).sum()

    params = [Tensor(a, requires_grad=True) for a in arrays]
    with GradientTape() as tape:
        loss = scalar(*params)
    grads = backward(loss, tape)

    errors = []
    checked = []
    for i, array in enumerate(arrays):
        analytic_full = grads[params[i]].reshape(-1)
        entries = np.arange(array.size)
        if max_entries is not None and array.size > max_entries:
            entries = np.sort(rng.choice(array.size, size=max_entries, replace=False))
        numeric = np.empty(len(entries))
        for k, flat in enumerate(entries):
            values = []
            for sign in (1.0, -1.0):
                shifted = array.copy().reshape(-1)
                shifted[flat] += sign * h
                args = [Tensor(a) for a in arrays]
                args[i] = Tensor(shifted.reshape(array.shape))
                values.append(scalar(*args).item())
            numeric[k] = (values[0] - values[1]) / (2.0 * h)
        errors.append(_relative_error(analytic_full[entries], numeric))
        checked.append(len(entries))
    return GradientCheck(errors=errors, checked=checked)
