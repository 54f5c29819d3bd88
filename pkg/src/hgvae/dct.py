"""Orthonormal DCT-II encoding of per-node trajectories.

A trajectory of ``N`` timepoints becomes ``N`` coefficients through the
matrix ``T`` with ``T[l, n] = sqrt(2/N) / sqrt(1 + [l == 0]) * cos(pi (2n + 1) l / (2N))``
(zero-based indices). ``T`` is orthonormal, so the inverse is ``T.T``.
Trajectories live on the last axis, so a ``(nodes, N)`` graph or a
``(batch, nodes, N)`` stack is encoded in one product.
"""

from functools import lru_cache
from typing import overload

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, matmul


@lru_cache(maxsize=32)
def _matrix(n: int, keep: int, dtype: str) -> np.ndarray:
    rows = np.arange(keep, dtype=np.float64)[:, None]
    cols = np.arange(n, dtype=np.float64)[None, :]
    basis = np.cos(np.pi * (2.0 * cols + 1.0) * rows / (2.0 * n))
    scale = np.full((keep, 1), np.sqrt(2.0 / n))
    scale[0, 0] = np.sqrt(1.0 / n)
    matrix = (scale * basis).astype(dtype)
    matrix.setflags(write=False)
    return matrix


def dct_matrix(n: int, keep: int | None = None, dtype: np.dtype | type = np.float64) -> np.ndarray:
    """The ``keep x n`` transform matrix; ``keep`` crops the highest frequencies."""
    if n < 1:
        raise ValueError("DCT length must be at least 1")
    keep = n if keep is None else keep
    if not 1 <= keep <= n:
        raise ValueError(f"cannot keep {keep} of {n} coefficients")
    return _matrix(n, keep, np.dtype(dtype).str)


@overload
def dct_forward(x: Tensor, keep: int | None = None) -> Tensor: ...
@overload
def dct_forward(x: np.ndarray, keep: int | None = None) -> np.ndarray: ...
def dct_forward(x: Tensor | np.ndarray, keep: int | None = None) -> Tensor | np.ndarray:
    """Coefficients of every trajectory on the last axis of ``x``."""
    if not isinstance(x, Tensor):
        x = _float_array(x)
    n = x.shape[-1] if x.ndim else 0
    if n == 0:
        raise ValueError("cannot encode an empty trajectory")
    matrix = dct_matrix(n, keep, x.dtype)
    if isinstance(x, Tensor):
        if x.ndim == 1:
            return matmul(x.reshape(1, n), Tensor(matrix.T, dtype=x.dtype)).reshape(matrix.shape[0])
        return matmul(x, Tensor(matrix.T, dtype=x.dtype))
    return x @ matrix.T


@overload
def dct_inverse(c: Tensor, n: int | None = None) -> Tensor: ...
@overload
def dct_inverse(c: np.ndarray, n: int | None = None) -> np.ndarray: ...
def dct_inverse(c: Tensor | np.ndarray, n: int | None = None) -> Tensor | np.ndarray:
    """Trajectories from coefficients on the last axis.

    A cropped coefficient vector is treated as zero-padded up to ``n`` timepoints,
    which makes the reconstruction lossy.
    """
    if not isinstance(c, Tensor):
        c = _float_array(c)
    keep = c.shape[-1]
    n = keep if n is None else n
    if keep > n:
        raise ShapeError("dct_inverse", tuple(c.shape), (n,))
    matrix = dct_matrix(n, keep, c.dtype)
    if isinstance(c, Tensor):
        if c.ndim == 1:
            return matmul(c.reshape(1, keep), Tensor(matrix, dtype=c.dtype)).reshape(n)
        return matmul(c, Tensor(matrix, dtype=c.dtype))
    return c @ matrix


def crop_coefficients(c: np.ndarray, keep: int) -> np.ndarray:
    if not 1 <= keep <= c.shape[-1]:
        raise ValueError(f"cannot keep {keep} of {c.shape[-1]} coefficients")
    return c[..., :keep]


def pad_coefficients(c: np.ndarray, n: int) -> np.ndarray:
    if c.shape[-1] > n:
        raise ValueError(f"{c.shape[-1]} coefficients do not fit in length {n}")
    pad = [(0, 0)] * (c.ndim - 1) + [(0, n - c.shape[-1])]
    return np.pad(c, pad)


def _float_array(values: np.ndarray) -> np.ndarray:
    array = np.asarray(values)
    if not np.issubdtype(array.dtype, np.floating):
        array = array.astype(np.float64)
    return array
