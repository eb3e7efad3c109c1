"""Dense K-way tensor algebra: matricization, Tucker products and centering.

Tensors are plain float64 numpy arrays. Their canonical flat order is
column-major (first index fastest), so that

    vec(X x {A_1, ..., A_K}) = (A_K kron ... kron A_1) vec(X)

holds with ``vec(X) = X.ravel(order="F")``. Modes are 0-based numpy axes.
The mode-k matricization puts mode k on the rows and enumerates the
remaining modes lexicographically with the lowest mode varying fastest.
"""

from functools import reduce
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import solve_triangular

import config


class ArrayNormalError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(ArrayNormalError, ValueError):
    """Dimensions or mode indices do not line up."""


class NotPositiveDefiniteError(ArrayNormalError, np.linalg.LinAlgError):
    """A Cholesky pivot or triangular diagonal is not strictly positive."""


class KronCapError(ArrayNormalError, ValueError):
    """A dense Kronecker product would exceed the configured dimension cap."""


class ParameterError(ArrayNormalError, ValueError):
    """An argument violates a documented precondition."""


_INT64_MAX = np.iinfo(np.int64).max


def check_dims(dims: Iterable[int]) -> Tuple[int, ...]:
    """
    Validate a list of mode dimensions.

    Args:
        dims: Positive integers (p_1, ..., p_K), optionally followed by n.

    Returns:
        Tuple[int, ...]: The dimensions as a tuple of Python ints.
    """
    dims = tuple(int(d) for d in dims)
    if not dims:
        raise ShapeError("at least one dimension is required")
    if any(d < 1 for d in dims):
        raise ShapeError(f"dimensions must be >= 1, got {dims}")
    total = 1
    for d in dims:
        total *= d
        if total > _INT64_MAX:
            raise ShapeError(f"product of dimensions {dims} overflows int64")
    return dims


def as_tensor(data, dims: Optional[Sequence[int]] = None) -> np.ndarray:
    """
    Convert external input into a validated float64 tensor.

    Args:
        data: Array-like input. A flat sequence is read in column-major order
            when ``dims`` is given.
        dims: Optional target shape.

    Returns:
        np.ndarray: Finite float64 array.
    """
    array = np.asarray(data, dtype=np.float64)
    if dims is not None:
        dims = check_dims(dims)
        if array.size != int(np.prod(dims)):
            raise ShapeError(f"{array.size} entries cannot fill shape {dims}")
        array = np.reshape(array.ravel(order="F"), dims, order="F")
    elif array.ndim == 0:
        raise ShapeError("a tensor needs at least one mode")
    if not np.all(np.isfinite(array)):
        raise ParameterError("tensor entries must be finite")
    return array


def _check_mode(X: np.ndarray, mode: int) -> int:
    if not 0 <= mode < X.ndim:
        raise ShapeError(f"mode {mode} out of range for a {X.ndim}-way tensor")
    return mode


def matricize(X: np.ndarray, mode: int) -> np.ndarray:
    """
    Mode-k matricization of a tensor.

    Args:
        X: Tensor of shape (p_1, ..., p_K).
        mode: 0-based mode placed on the rows.

    Returns:
        np.ndarray: Matrix of shape (p_mode, p / p_mode).
    """
    _check_mode(X, mode)
    return np.reshape(np.moveaxis(X, mode, 0), (X.shape[mode], -1), order="F")


def unmatricize(M: np.ndarray, mode: int, dims: Sequence[int]) -> np.ndarray:
    """
    Inverse of :func:`matricize`.

    Args:
        M: Matrix of shape (p_mode, p / p_mode).
        mode: 0-based mode held on the rows of ``M``.
        dims: Shape of the tensor to rebuild.

    Returns:
        np.ndarray: Tensor with ``matricize(result, mode) == M``.
    """
    dims = check_dims(dims)
    if not 0 <= mode < len(dims):
        raise ShapeError(f"mode {mode} out of range for shape {dims}")
    rest = dims[:mode] + dims[mode + 1:]
    expected = (dims[mode], int(np.prod(rest, dtype=np.int64)) if rest else 1)
    if M.shape != expected:
        raise ShapeError(f"matrix of shape {M.shape} does not unfold shape {dims} along mode {mode}")
    moved = np.reshape(M, (dims[mode],) + rest, order="F")
    return np.moveaxis(moved, 0, mode)


def mode_product(X: np.ndarray, A: np.ndarray, mode: int) -> np.ndarray:
    """Multiply a tensor along one mode: matricize, multiply, fold back."""
    _check_mode(X, mode)
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[1] != X.shape[mode]:
        raise ShapeError(f"matrix of shape {A.shape} cannot act on mode {mode} of size {X.shape[mode]}")
    dims = list(X.shape)
    dims[mode] = A.shape[0]
    return unmatricize(A @ matricize(X, mode), mode, dims)


def _distinct_modes(mats: Sequence[Tuple[int, np.ndarray]]) -> None:
    modes = [mode for mode, _ in mats]
    if len(set(modes)) != len(modes):
        raise ShapeError(f"duplicate modes in {modes}")


def tucker_product(X: np.ndarray, mats: Sequence[Tuple[int, np.ndarray]]) -> np.ndarray:
    """
    Tucker product of a tensor with one matrix per listed mode.

    Unlisted modes are left alone (identity).

    Args:
        X: Input tensor.
        mats: Sequence of (mode, matrix) pairs; each matrix has as many
            columns as the mode it acts on.

    Returns:
        np.ndarray: The product tensor.
    """
    _distinct_modes(mats)
    result = X
    for mode, A in mats:
        result = mode_product(result, A, mode)
    return result


def tucker_solve_lower(X: np.ndarray, factors: Sequence[Tuple[int, np.ndarray]]) -> np.ndarray:
    """
    Tucker product with the inverses of lower triangular factors.

    Each mode is handled by forward substitution, no inverse is formed.

    Args:
        X: Input tensor.
        factors: Sequence of (mode, lower triangular matrix) pairs.

    Returns:
        np.ndarray: ``X x {L_1^{-1}, ..., L_K^{-1}}`` on the listed modes.
    """
    _distinct_modes(factors)
    result = X
    for mode, L in factors:
        _check_mode(result, mode)
        L = np.asarray(L, dtype=np.float64)
        if L.shape != (result.shape[mode], result.shape[mode]):
            raise ShapeError(f"factor of shape {L.shape} cannot act on mode {mode} of size {result.shape[mode]}")
        if np.any(np.diag(L) <= 0):
            raise NotPositiveDefiniteError(f"factor for mode {mode} has a nonpositive diagonal entry")
        solved = solve_triangular(L, matricize(result, mode), lower=True)
        result = unmatricize(solved, mode, result.shape)
    return result


def helmert(n: int) -> np.ndarray:
    """
    Helmert sub-matrix H of shape (n-1, n).

    Row j (0-based) is (1, ..., 1, -(j+1), 0, ..., 0) / sqrt((j+1)(j+2)), so
    H H^T = I and H 1 = 0.
    """
    if n < 2:
        raise ParameterError(f"Helmert matrix needs n >= 2, got {n}")
    H = np.zeros((n - 1, n))
    for j in range(n - 1):
        H[j, : j + 1] = 1.0
        H[j, j + 1] = -(j + 1.0)
        H[j] /= np.sqrt((j + 1.0) * (j + 2.0))
    return H


def center_samples(X: np.ndarray) -> np.ndarray:
    """
    Remove a common mean from samples stacked along the trailing mode.

    Args:
        X: Tensor of shape (p_1, ..., p_K, n) with n >= 2.

    Returns:
        np.ndarray: ``X x_{K+1} H`` of shape (p_1, ..., p_K, n-1).
    """
    n = X.shape[-1]
    if X.ndim < 2 or n < 2:
        raise ParameterError("centering needs a trailing sample mode of size >= 2")
    return mode_product(X, helmert(n), X.ndim - 1)


def kron_list(mats: Sequence[np.ndarray], cap: Optional[int] = None) -> np.ndarray:
    """
    Kronecker product of square matrices, taken in the order given.

    Pass ``[A_K, ..., A_1]`` to get ``A_K kron ... kron A_1``.

    Args:
        mats: Square matrices.
        cap: Largest allowed product dimension (defaults to config.KRON_CAP).

    Returns:
        np.ndarray: The dense Kronecker product.
    """
    if cap is None:
        cap = config.KRON_CAP
    mats = [np.atleast_2d(np.asarray(M, dtype=np.float64)) for M in mats]
    if not mats:
        raise ShapeError("kron_list needs at least one matrix")
    for M in mats:
        if M.shape[0] != M.shape[1]:
            raise ShapeError(f"kron_list expects square matrices, got {M.shape}")
    size = int(np.prod([M.shape[0] for M in mats]))
    if size > cap:
        raise KronCapError(f"Kronecker dimension {size} exceeds cap {cap}")
    return reduce(np.kron, mats)


def frob_norm_sq(X: np.ndarray) -> float:
    """Sum of squared entries."""
    return float(np.vdot(X, X))


def vec(X: np.ndarray) -> np.ndarray:
    """Column-major vectorization."""
    return np.ravel(X, order="F")


def modes_except(K: int, mode: int) -> List[int]:
    return [j for j in range(K) if j != mode]
