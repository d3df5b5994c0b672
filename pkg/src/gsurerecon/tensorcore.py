"""Centered orthonormal FFTs, small dense Cholesky, and the CXT tensor file format.

FFT helpers accept either numpy arrays or torch tensors and return the same
kind. The DC sample sits at index ``n // 2`` along each transformed axis and
both directions are scaled by ``1/sqrt(H*W)`` so the transform is unitary.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

from .errors import FactorizationError, FormatError, ShapeError

MAGIC = b"CXTENS01"
DTYPE_COMPLEX64 = 1
DTYPE_FLOAT32 = 2
_DTYPES = {DTYPE_COMPLEX64: np.dtype("<c8"), DTYPE_FLOAT32: np.dtype("<f4")}


def _fft_last2(x, inverse: bool):
    if isinstance(x, torch.Tensor):
        dims = (-2, -1)
        x = torch.fft.ifftshift(x, dim=dims)
        x = torch.fft.ifft2(x, norm="ortho") if inverse else torch.fft.fft2(x, norm="ortho")
        return torch.fft.fftshift(x, dim=dims)
    x = np.asarray(x)
    axes = (-2, -1)
    x = np.fft.ifftshift(x, axes=axes)
    x = np.fft.ifft2(x, norm="ortho") if inverse else np.fft.fft2(x, norm="ortho")
    return np.fft.fftshift(x, axes=axes)


def _require_rank2(x):
    if x.ndim != 2:
        raise ShapeError(f"expected a rank-2 image, got shape {tuple(x.shape)}")


def fft2c(img):
    """Centered, orthonormal 2D DFT of a single image."""
    _require_rank2(img)
    return _fft_last2(img, inverse=False)


def ifft2c(ksp):
    """Inverse of :func:`fft2c` (also its adjoint)."""
    _require_rank2(ksp)
    return _fft_last2(ksp, inverse=True)


def fft2c_batch(x):
    """:func:`fft2c` applied over the last two axes of a stacked array."""
    if x.ndim < 2:
        raise ShapeError(f"expected at least 2 dims, got shape {tuple(x.shape)}")
    return _fft_last2(x, inverse=False)


def ifft2c_batch(x):
    if x.ndim < 2:
        raise ShapeError(f"expected at least 2 dims, got shape {tuple(x.shape)}")
    return _fft_last2(x, inverse=True)


def cholesky(cov) -> np.ndarray:
    """Lower-triangular ``L`` with ``cov = L @ L.conj().T``.

    Computed in complex128 by the textbook column algorithm so that a
    failure can report the offending pivot.
    """
    c = np.array(cov, dtype=np.complex128)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ShapeError(f"covariance must be square, got shape {c.shape}")
    n = c.shape[0]
    scale = max(np.abs(c).max(), 1e-300)
    if not np.allclose(c, c.conj().T, rtol=1e-6, atol=1e-9 * scale):
        raise FactorizationError("covariance is not Hermitian")
    lower = np.zeros_like(c)
    for j in range(n):
        d = c[j, j].real - np.sum(np.abs(lower[j, :j]) ** 2)
        if not np.isfinite(d) or d <= 1e-14 * scale:
            raise FactorizationError(
                f"matrix is not positive definite: pivot {j} = {d:.3e}", pivot=j
            )
        lower[j, j] = np.sqrt(d)
        for i in range(j + 1, n):
            lower[i, j] = (c[i, j] - np.sum(lower[i, :j] * lower[j, :j].conj())) / lower[j, j]
    return lower


def save_tensor(path, t) -> None:
    """Write ``t`` as a CXT file (complex64, or float32 for real tensors)."""
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    arr = np.asarray(t)
    if np.iscomplexobj(arr):
        code = DTYPE_COMPLEX64
    else:
        code = DTYPE_FLOAT32
    arr = np.ascontiguousarray(arr, dtype=_DTYPES[code])
    if arr.ndim > 255:
        raise ShapeError("rank above 255 cannot be stored")
    header = MAGIC + struct.pack("<BB", code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def load_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 10:
        raise FormatError("truncated header", offset=len(data))
    if data[:8] != MAGIC:
        raise FormatError("bad magic bytes", offset=0)
    code, rank = data[8], data[9]
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}", offset=8)
    dims_end = 10 + 8 * rank
    if len(data) < dims_end:
        raise FormatError("truncated dimension table", offset=len(data))
    shape = struct.unpack(f"<{rank}Q", data[10:dims_end])
    dtype = _DTYPES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = len(data) - dims_end
    if payload < expected:
        raise FormatError(
            f"truncated payload: expected {expected} bytes, found {payload}",
            offset=len(data),
        )
    if payload > expected:
        raise FormatError("trailing bytes after payload", offset=dims_end + expected)
    return np.frombuffer(data, dtype=dtype, offset=dims_end).reshape(shape).copy()
