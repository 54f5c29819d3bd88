"""Graph convolutional layer (GCL) and block (GCB).

A graph is a ``nodes x features`` matrix, optionally with leading batch axes.
``GCL(A) = gelu(S A W + b)`` mixes nodes with ``S`` and features with ``W`` and
can change both counts. ``GCB(A) = gelu(S2 gelu(S1 A W1 + b1) W2 + b2) + alpha A``
keeps the shape; ``alpha`` starts at exactly zero.
"""

import sys
from collections.abc import Mapping

import numpy as np
from pydantic import ConfigDict, model_validator

from .base import BaseHGVAEObject
from .errors import ShapeError
from .tensor import Tensor, gelu, matmul

if sys.version_info[1] >= 11:
    from typing import Self
else:
    from typing_extensions import Self  # pragma: no cover

S_INIT_NOISE = 0.01

RngLike = np.random.Generator | int | None


def as_rng(rng: RngLike) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


class _TensorRecord(BaseHGVAEObject):
    model_config = ConfigDict(arbitrary_types_allowed=True, extra="forbid")

    def named(self, prefix: str) -> dict[str, Tensor]:
        """Parameters keyed ``prefix.field``."""
        return {f"{prefix}.{k}": getattr(self, k) for k in type(self).model_fields}

    @classmethod
    def from_named(cls, params: Mapping[str, Tensor], prefix: str) -> Self:
        try:
            return cls(**{k: params[f"{prefix}.{k}"] for k in cls.model_fields})
        except KeyError as missing:
            raise KeyError(f"no parameter {missing} for layer '{prefix}'") from None

    @property
    def size(self) -> int:
        return sum(getattr(self, k).size for k in type(self).model_fields)


class GclParams(_TensorRecord):
    """Node mixing ``S`` (N_out x N_in), feature map ``W`` (F_in x F_out), bias ``b`` (N_out x F_out)."""

    S: Tensor
    W: Tensor
    b: Tensor

    @model_validator(mode="after")
    def _check_shapes(self) -> Self:
        if self.S.ndim != 2 or self.W.ndim != 2:
            raise ShapeError("gcl", self.S.shape, self.W.shape)
        if self.b.shape != (self.S.shape[0], self.W.shape[1]):
            raise ShapeError("gcl bias", self.b.shape, (self.S.shape[0], self.W.shape[1]))
        return self

    @property
    def n_in(self) -> int:
        return self.S.shape[1]

    @property
    def n_out(self) -> int:
        return self.S.shape[0]

    @property
    def f_in(self) -> int:
        return self.W.shape[0]

    @property
    def f_out(self) -> int:
        return self.W.shape[1]


class GcbParams(_TensorRecord):
    """Two square-preserving GCLs and the residual weight ``alpha``."""

    S1: Tensor
    W1: Tensor
    b1: Tensor
    S2: Tensor
    W2: Tensor
    b2: Tensor
    alpha: Tensor

    @model_validator(mode="after")
    def _check_shapes(self) -> Self:
        n, f = self.b1.shape
        for name, expected in (
            ("S1", (n, n)),
            ("W1", (f, f)),
            ("S2", (n, n)),
            ("W2", (f, f)),
            ("b2", (n, f)),
            ("alpha", ()),
        ):
            actual = getattr(self, name).shape
            if actual != expected:
                raise ShapeError(f"gcb {name}", actual, expected)
        return self

    @property
    def nodes(self) -> int:
        return self.b1.shape[0]

    @property
    def features(self) -> int:
        return self.b1.shape[1]

    def first(self) -> GclParams:
        return GclParams(S=self.S1, W=self.W1, b=self.b1)

    def second(self) -> GclParams:
        return GclParams(S=self.S2, W=self.W2, b=self.b2)


def gcl_parameter_count(n_in: int, f_in: int, n_out: int, f_out: int) -> int:
    return n_out * n_in + f_in * f_out + n_out * f_out


def gcl_forward(a: Tensor, p: GclParams, activate: bool = True) -> Tensor:
    """``gelu(S A W + b)``; ``activate=False`` skips the GeLU (distribution heads)."""
    if a.ndim < 2 or a.shape[-2:] != (p.n_in, p.f_in):
        raise ShapeError("gcl", a.shape, (p.n_in, p.f_in))
    out = matmul(matmul(p.S, a), p.W) + p.b
    return gelu(out) if activate else out


def gcb_forward(a: Tensor, p: GcbParams, rezero_on_branch: bool = False) -> Tensor:
    """Two stacked GCLs plus the ``alpha``-weighted input.

    With ``rezero_on_branch`` the weight multiplies the branch instead (``A + alpha * branch``).
    """
    if a.ndim < 2 or a.shape[-2:] != (p.nodes, p.features):
        raise ShapeError("gcb", a.shape, (p.nodes, p.features))
    branch = gcl_forward(gcl_forward(a, p.first()), p.second())
    if rezero_on_branch:
        return a + p.alpha * branch
    return branch + p.alpha * a


def uniform_fan(rng: np.random.Generator, f_in: int, f_out: int) -> np.ndarray:
    """Glorot-uniform ``(f_in, f_out)`` weights."""
    bound = np.sqrt(6.0 / (f_in + f_out))
    return rng.uniform(-bound, bound, size=(f_in, f_out))


def _near_identity(rng: np.random.Generator, n_out: int, n_in: int) -> np.ndarray:
    return np.eye(n_out, n_in) + rng.uniform(-S_INIT_NOISE, S_INIT_NOISE, size=(n_out, n_in))


def init_gcl(n_in: int, f_in: int, n_out: int, f_out: int, rng: RngLike = None) -> GclParams:
    """Near-identity ``S``, fan-scaled uniform ``W``, zero ``b``."""
    if min(n_in, f_in, n_out, f_out) < 1:
        raise ValueError("GCL dimensions must be positive")
    gen = as_rng(rng)
    return GclParams(
        S=Tensor(_near_identity(gen, n_out, n_in), requires_grad=True),
        W=Tensor(uniform_fan(gen, f_in, f_out), requires_grad=True),
        b=Tensor(np.zeros((n_out, f_out)), requires_grad=True),
    )


def init_gcb(n: int, f: int, rng: RngLike = None) -> GcbParams:
    """Two GCLs initialised as :func:`init_gcl` and ``alpha = 0``."""
    gen = as_rng(rng)
    first = init_gcl(n, f, n, f, gen)
    second = init_gcl(n, f, n, f, gen)
    return GcbParams(
        S1=first.S,
        W1=first.W,
        b1=first.b,
        S2=second.S,
        W2=second.W,
        b2=second.b,
        alpha=Tensor(0.0, requires_grad=True),
    )
