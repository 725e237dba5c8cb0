"""
Dense third-order tensors: outer products, unfoldings, Khatri-Rao products,
slab/fiber sections and text/binary serialization.

Tensors are plain ``numpy.ndarray`` objects of shape ``(I, J, K)``; masks are
boolean arrays of the same shape (True = observed). Indices are zero-based.

Unfolding convention: mode ``m`` moves axis ``m`` to the front and flattens the
remaining two axes with the first remaining index varying fastest. The mode-1
column index of ``X[i, j, k]`` is therefore ``j + J*k``, mode 2 uses
``i + I*k`` and mode 3 uses ``i + I*j``, which gives

    unfold(X, 1) = A @ khatri_rao(C, B).T
    unfold(X, 2) = B @ khatri_rao(C, A).T
    unfold(X, 3) = C @ khatri_rao(B, A).T

for ``X = reconstruct((A, B, C))``.
"""

from __future__ import annotations
import io
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from .core import FormatError, atomic_write_bytes, atomic_write_text

SLAB_AXES = {"horizontal": 0, "vertical": 1, "frontal": 2}


def check_tensor3(X, name: str = "tensor") -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 3:
        raise ValueError(f"{name} must be third-order, got shape {X.shape}")
    if min(X.shape) < 1:
        raise ValueError(f"{name} dimensions must be positive, got {X.shape}")
    return X


def check_mask(M, dims: Tuple[int, int, int] = None) -> np.ndarray:
    M = np.asarray(M)
    if M.ndim != 3:
        raise ValueError(f"mask must be third-order, got shape {M.shape}")
    if M.dtype != bool:
        if not np.all((M == 0) | (M == 1)):
            raise ValueError("mask entries must be exactly 0 or 1")
        M = M.astype(bool)
    if dims is not None and M.shape != tuple(dims):
        raise ValueError(f"mask dims {M.shape} do not match tensor dims {tuple(dims)}")
    return M


def rank_one(a, b, c) -> np.ndarray:
    """Outer product ``a ∘ b ∘ c``."""
    a, b, c = (np.asarray(v, dtype=float).ravel() for v in (a, b, c))
    if not (a.size and b.size and c.size):
        raise ValueError("rank_one needs nonempty vectors")
    return np.einsum("i,j,k->ijk", a, b, c)


def _check_mode(mode: int) -> int:
    if mode not in (1, 2, 3):
        raise ValueError(f"mode must be 1, 2 or 3, got {mode!r}")
    return mode - 1


def unfold(X, mode: int) -> np.ndarray:
    X = check_tensor3(X)
    axis = _check_mode(mode)
    return np.moveaxis(X, axis, 0).reshape(X.shape[axis], -1, order="F")


def refold(M, mode: int, dims: Tuple[int, int, int]) -> np.ndarray:
    axis = _check_mode(mode)
    dims = tuple(int(d) for d in dims)
    moved = (dims[axis],) + tuple(d for n, d in enumerate(dims) if n != axis)
    M = np.asarray(M, dtype=float)
    if M.shape != (moved[0], moved[1] * moved[2]):
        raise ValueError(f"matrix of shape {M.shape} cannot refold to {dims} along mode {mode}")
    return np.moveaxis(M.reshape(moved, order="F"), 0, axis)


def khatri_rao(P, Q) -> np.ndarray:
    """Column-wise Kronecker product; column f is ``kron(P[:, f], Q[:, f])``."""
    P = np.atleast_2d(np.asarray(P, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    if P.shape[1] != Q.shape[1]:
        raise ValueError(f"column count mismatch: {P.shape[1]} != {Q.shape[1]}")
    m, F = P.shape
    n = Q.shape[0]
    return np.einsum("if,jf->ijf", P, Q).reshape(m * n, F)


def extract_slab(X, kind: str, index: int) -> np.ndarray:
    X = check_tensor3(X)
    if kind not in SLAB_AXES:
        raise ValueError(f"slab kind must be one of {sorted(SLAB_AXES)}, got {kind!r}")
    axis = SLAB_AXES[kind]
    if not 0 <= index < X.shape[axis]:
        raise IndexError(f"{kind} slab index {index} out of range [0, {X.shape[axis]})")
    return np.take(X, index, axis=axis).copy()


def extract_fiber(X, i: int, j: int) -> np.ndarray:
    X = check_tensor3(X)
    I, J, _ = X.shape
    if not (0 <= i < I and 0 <= j < J):
        raise IndexError(f"fiber index ({i}, {j}) out of range for dims {X.shape}")
    return X[i, j, :].copy()


def frobenius_norm_sq(X) -> float:
    X = np.asarray(X, dtype=float)
    return float(np.sum(X * X))


def relative_error(X, Xhat) -> float:
    """``||X - Xhat||_F^2 / ||X||_F^2``."""
    X = check_tensor3(X)
    Xhat = check_tensor3(Xhat, "estimate")
    if X.shape != Xhat.shape:
        raise ValueError(f"dims differ: {X.shape} vs {Xhat.shape}")
    denom = frobenius_norm_sq(X)
    if denom == 0.0:
        raise ValueError("relative error undefined for an all-zero tensor")
    return frobenius_norm_sq(X - Xhat) / denom


def held_out_relative_error(X, Xhat, M) -> float:
    """Relative error restricted to the unobserved entries of mask ``M``."""
    X = check_tensor3(X)
    M = check_mask(M, X.shape)
    hidden = ~M
    return relative_error(np.where(hidden, X, 0.0), np.where(hidden, Xhat, 0.0))


# ===== Serialization =====
def format_tensor_text(X, fmt: str = "%.17g") -> str:
    X = np.asarray(X)
    if X.ndim != 3:
        raise ValueError(f"only third-order arrays serialize, got shape {X.shape}")
    values = X.ravel(order="F")
    lines = ["%d %d %d" % X.shape]
    lines.extend(fmt % v for v in values)
    return "\n".join(lines) + "\n"


def parse_tensor_text(text: str, source: Union[str, Path] = "<string>") -> np.ndarray:
    lines = [ln.strip() for ln in text.splitlines()]
    if not lines or not lines[0]:
        raise FormatError(source, 1, "missing 'I J K' header")
    try:
        dims = tuple(int(tok) for tok in lines[0].split())
    except ValueError:
        raise FormatError(source, 1, f"bad header {lines[0]!r}") from None
    if len(dims) != 3 or min(dims) < 1:
        raise FormatError(source, 1, f"header must hold three positive integers, got {lines[0]!r}")
    body = [ln for ln in lines[1:] if ln]
    expected = dims[0] * dims[1] * dims[2]
    if len(body) != expected:
        raise FormatError(source, None, f"expected {expected} values, found {len(body)}")
    values = np.empty(expected)
    for n, tok in enumerate(body):
        try:
            values[n] = float(tok)
        except ValueError:
            raise FormatError(source, n + 2, f"not a number: {tok!r}") from None
    return values.reshape(dims, order="F")


def write_tensor(X, path: Union[str, Path]):
    """Write ``X`` as text (``.txt``) or NumPy binary (``.npy``) depending on suffix."""
    path = Path(path)
    X = np.asarray(X)
    if path.suffix == ".npy":
        buf = io.BytesIO()
        np.save(buf, X.astype(np.uint8) if X.dtype == bool else X)
        atomic_write_bytes(path, buf.getvalue())
        return
    fmt = "%d" if X.dtype == bool else "%.17g"
    atomic_write_text(path, format_tensor_text(X.astype(int) if X.dtype == bool else X, fmt))


def read_tensor(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FormatError(path, None, "file not found")
    if path.suffix == ".npy":
        X = np.load(path, allow_pickle=False)
        if X.ndim != 3:
            raise FormatError(path, None, f"expected a third-order array, got shape {X.shape}")
        return X.astype(float)
    return parse_tensor_text(path.read_text(), path)


def write_mask(M, path: Union[str, Path]):
    write_tensor(check_mask(M), path)


def read_mask(path: Union[str, Path]) -> np.ndarray:
    X = read_tensor(path)
    try:
        return check_mask(X)
    except ValueError as e:
        raise FormatError(path, None, str(e)) from None
