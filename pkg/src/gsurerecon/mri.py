"""Multi-coil Cartesian MRI measurement model.

Images are complex tensors shaped ``(..., H, W)``; k-space is
``(..., Nc, H, W)``. Undersampling acts on columns (the last axis, the
phase-encode direction). Complex Gaussian noise of variance ``s2`` means
total variance ``s2`` per complex entry, ``s2 / 2`` per real component.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, ConvergenceError, DegenerateInputError, DomainError, ShapeError
from .solvers import cg_solve
from .tensorcore import cholesky, fft2c_batch, ifft2c_batch


@dataclass(frozen=True)
class SamplingMask:
    columns: np.ndarray  # bool, length W
    acs_width: int
    R: float

    @property
    def n_sampled(self) -> int:
        return int(self.columns.sum())

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.from_numpy(self.columns.astype(np.float32)).to(dtype)


@dataclass
class ForwardModel:
    """``A = P F S``: coil maps, column mask, and the dataset noise variance.

    ``maps`` is ``(Nc, H, W)`` or batched ``(B, Nc, H, W)``; ``mask`` is the
    matching ``(W,)`` or ``(B, W)`` 0/1 column indicator.
    """

    maps: torch.Tensor
    mask: torch.Tensor
    noise_sigma2: float | torch.Tensor | None = None

    def __post_init__(self):
        if self.mask.shape[-1] != self.maps.shape[-1]:
            raise ShapeError(f"mask width {self.mask.shape[-1]} != map width {self.maps.shape[-1]}")
        self.mask = self.mask.to(self.maps.real.dtype)

    @property
    def image_shape(self) -> tuple[int, int]:
        return tuple(self.maps.shape[-2:])

    @property
    def n_coils(self) -> int:
        return self.maps.shape[-3]

    def _mask_b(self) -> torch.Tensor:
        return self.mask[..., None, None, :]

    def fully_sampled_sos(self) -> bool:
        """True when every column is sampled and the maps are SOS-normalized."""
        if not bool((self.mask == 1).all()):
            return False
        sos = (self.maps.abs() ** 2).sum(dim=-3)
        return bool(torch.allclose(sos, torch.ones_like(sos), atol=1e-5))


def fully_sampled(maps: torch.Tensor) -> torch.Tensor:
    return torch.ones(maps.shape[:-3] + maps.shape[-1:], dtype=maps.real.dtype)


def _check_image(fm: ForwardModel, x: torch.Tensor) -> None:
    if tuple(x.shape[-2:]) != fm.image_shape:
        raise ShapeError(f"image shape {tuple(x.shape)} does not match maps {tuple(fm.maps.shape)}")


def _check_kspace(fm: ForwardModel, y: torch.Tensor) -> None:
    if y.ndim < 3 or tuple(y.shape[-3:]) != tuple(fm.maps.shape[-3:]):
        raise ShapeError(f"k-space shape {tuple(y.shape)} does not match maps {tuple(fm.maps.shape)}")


def apply_A(fm: ForwardModel, x: torch.Tensor) -> torch.Tensor:
    """Masked multi-coil k-space ``mask * fft2c(s_c * x)``."""
    _check_image(fm, x)
    coil_images = fm.maps * x.unsqueeze(-3)
    return fft2c_batch(coil_images) * fm._mask_b()


def apply_Ah(fm: ForwardModel, y: torch.Tensor) -> torch.Tensor:
    """Adjoint: ``sum_c conj(s_c) * ifft2c(mask * y_c)``."""
    _check_kspace(fm, y)
    coil_images = ifft2c_batch(y * fm._mask_b())
    return (fm.maps.conj() * coil_images).sum(dim=-3)


def apply_AhA(fm: ForwardModel, x: torch.Tensor) -> torch.Tensor:
    return apply_Ah(fm, apply_A(fm, x))


def apply_pinv(fm: ForwardModel, y: torch.Tensor, cg_iters: int = 50, tol: float = 1e-5) -> torch.Tensor:
    """Least-squares image ``(A^H A)^+ A^H y`` by conjugate gradient.

    Fully sampled data with SOS-normalized maps has ``A^H A = I`` and
    returns the adjoint directly.
    """
    rhs = apply_Ah(fm, y)
    if fm.fully_sampled_sos():
        return rhs
    batch_dims = rhs.ndim - 2
    x, info = cg_solve(lambda v: apply_AhA(fm, v), rhs, iters=cg_iters, tol=tol, batch_dims=batch_dims)
    if not info.converged:
        raise ConvergenceError(
            f"pseudo-inverse CG did not reach tol={tol} in {cg_iters} iterations "
            f"(relative residual {info.residual:.3e})",
            residual=info.residual,
        )
    return x


# -- synthetic acquisition ----------------------------------------------------

def make_sensitivities(n_coils: int, H: int, W: int, seed: int) -> torch.Tensor:
    """Smooth complex coil maps normalized to unit root-sum-of-squares.

    Coil ``c`` is a Gaussian bump centred on a ring around the field of view
    at angle ``2*pi*c/Nc`` (plus jitter), with its own constant phase and a
    gentle linear phase ramp.
    """
    if n_coils < 1:
        raise ConfigError(f"coil count must be >= 1, got {n_coils}")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(H) - H // 2, np.arange(W) - W // 2, indexing="ij")
    maps = np.empty((n_coils, H, W), dtype=np.complex128)
    radius = 0.6 * 0.5 * max(H, W)
    for c in range(n_coils):
        angle = 2 * np.pi * c / n_coils + rng.uniform(-0.2, 0.2)
        cy, cx = radius * np.sin(angle), radius * np.cos(angle)
        width = 0.5 * max(H, W) * rng.uniform(0.8, 1.2)
        mag = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
        phase = rng.uniform(-np.pi, np.pi) + rng.uniform(-0.5, 0.5) * (xx / W) + rng.uniform(-0.5, 0.5) * (yy / H)
        maps[c] = mag * np.exp(1j * phase)
    rss = np.sqrt((np.abs(maps) ** 2).sum(axis=0))
    maps /= rss
    return torch.from_numpy(maps.astype(np.complex64))


def make_mask(W: int, R: float, acs_width: int, seed: int) -> SamplingMask:
    """Random column mask with a fully sampled centre block.

    ``ceil(W / R)`` columns are kept: the ``acs_width`` columns around
    index ``W // 2`` plus a uniform draw without replacement from the rest,
    using ``numpy.random.default_rng(seed)``.
    """
    if W < 1 or R < 1:
        raise ConfigError(f"need W >= 1 and R >= 1, got W={W}, R={R}")
    budget = math.ceil(W / R)
    if acs_width < 0 or acs_width > budget:
        raise ConfigError(f"ACS width {acs_width} exceeds the column budget {budget} (W={W}, R={R})")
    start = W // 2 - acs_width // 2
    acs = np.arange(start, start + acs_width)
    columns = np.zeros(W, dtype=bool)
    columns[acs] = True
    rest = np.flatnonzero(~columns)
    rng = np.random.default_rng(seed)
    extra = rng.choice(rest, size=budget - acs_width, replace=False) if budget > acs_width else []
    columns[np.asarray(extra, dtype=int)] = True
    return SamplingMask(columns=columns, acs_width=int(acs_width), R=float(R))


def make_masks(n: int, W: int, R: float, acs_width: int, seed: int) -> torch.Tensor:
    """``(n, W)`` stack of column masks; mask ``i`` uses seed ``seed + i``."""
    return torch.stack([make_mask(W, R, acs_width, seed + i).tensor() for i in range(n)])


def complex_normal(rng: np.random.Generator, shape) -> np.ndarray:
    """Circular complex standard normal: unit total variance per entry."""
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def add_noise(y_full, cov, seed: int) -> torch.Tensor:
    """Add ``eta = L w`` per k-space location, ``L = cholesky(cov)``."""
    y = torch.as_tensor(y_full)
    c = np.asarray(cov, dtype=np.complex128)
    n_coils = y.shape[-3]
    if c.shape != (n_coils, n_coils):
        raise ShapeError(f"covariance shape {c.shape} does not match {n_coils} coils")
    if not np.any(c):
        return y.clone()
    lower = cholesky(c)
    rng = np.random.default_rng(seed)
    w = complex_normal(rng, tuple(y.shape))
    eta = np.einsum("cd,...dhw->...chw", lower, w)
    return y + torch.from_numpy(eta).to(y.dtype)


def prewhiten(y, cov) -> torch.Tensor:
    """Apply ``L^{-1}`` across the coil axis so the noise covariance becomes I."""
    y = torch.as_tensor(y)
    lower = cholesky(cov)
    if lower.shape[0] != y.shape[-3]:
        raise ShapeError(f"covariance has {lower.shape[0]} coils, data has {y.shape[-3]}")
    whitener = torch.from_numpy(np.linalg.inv(lower)).to(y.dtype)
    return torch.einsum("cd,...dhw->...chw", whitener, y)


def acs_rss(y, acs_size: int) -> torch.Tensor:
    """Root-sum-of-squares image of the centred ``acs_size`` square of k-space."""
    y = torch.as_tensor(y)
    H, W = y.shape[-2:]
    if acs_size < 1 or acs_size > min(H, W):
        raise ConfigError(f"ACS size {acs_size} must lie in [1, {min(H, W)}]")
    r0, c0 = H // 2 - acs_size // 2, W // 2 - acs_size // 2
    crop = torch.zeros_like(y)
    crop[..., r0:r0 + acs_size, c0:c0 + acs_size] = y[..., r0:r0 + acs_size, c0:c0 + acs_size]
    coil_images = ifft2c_batch(crop)
    return torch.sqrt((coil_images.abs() ** 2).sum(dim=-3))


def normalize_kspace(y, acs_size: int) -> tuple[torch.Tensor, float]:
    """Scale k-space so the 99th percentile of the ACS RSS image is 1."""
    y = torch.as_tensor(y)
    rss = acs_rss(y, acs_size)
    q = float(np.percentile(rss.detach().to(torch.float64).numpy(), 99))
    if not q > 0:
        raise DegenerateInputError("ACS reconstruction is identically zero; cannot normalize")
    return y / q, q


@dataclass(frozen=True)
class NoiseSpec:
    cov: np.ndarray
    sigma2: float

    @property
    def snr_db(self) -> float:
        return snr_db(self.sigma2)


def snr_db(sigma_sq: float) -> float:
    if not sigma_sq > 0:
        raise DomainError(f"noise variance must be positive, got {sigma_sq}")
    return 10.0 * math.log10(1.0 / sigma_sq)


def variance_for_snr(db: float) -> float:
    return 10.0 ** (-db / 10.0)


def sigma_for_snr(db: float) -> float:
    return math.sqrt(variance_for_snr(db))
