"""Self-supervised MMSE denoising with the GSURE loss.

The denoiser ``g`` consumes ``u = A^H y / sigma2`` and returns a coil-combined
image. Its training loss never touches clean images:

    ||g(u)||^2 + 2 * (stein - Re<g(u), A^+ y>)

where ``stein`` is the noise-variance-weighted divergence of ``g`` with
respect to ``A^H y``, estimated with one Gaussian probe per evaluation.
For circular complex noise of total variance ``sigma2`` the Stein weight
is the per-real-component variance ``sigma2 / 2``, which makes the loss
an unbiased estimate of ``||g(u) - x||^2 - ||x||^2``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .datagen import DatasetManifest, sub_seed
from .errors import ContractError, DomainError, NumericError, TrainingError
from .mri import ForwardModel, apply_Ah, apply_pinv, fully_sampled
from .nnet import (
    AdamState,
    NetConfig,
    Network,
    adam_step,
    build_network,
    from_channels,
    load_checkpoint,
    save_checkpoint,
    to_channels,
)

DIVERGENCE_VARIABLES = ("adjoint", "scaled")


@dataclass
class GsureBatch:
    u: torch.Tensor        # A^H y / sigma2
    adjoint: torch.Tensor  # A^H y
    pinv: torch.Tensor     # A^+ y
    sigma2: torch.Tensor   # (B,) or scalar
    ids: list = field(default_factory=list)

    def __post_init__(self):
        self.sigma2 = torch.as_tensor(self.sigma2, dtype=self.adjoint.real.dtype)
        if not (self.u.shape == self.adjoint.shape == self.pinv.shape):
            raise ContractError("u, adjoint and pinv images must share a shape")
        if not bool((self.sigma2 > 0).all()):
            raise DomainError("noise variance must be positive")


def make_batch(fm: ForwardModel, y: torch.Tensor, sigma2, ids=()) -> GsureBatch:
    sigma2 = torch.as_tensor(sigma2, dtype=y.real.dtype)
    if not bool((sigma2 > 0).all()):
        raise DomainError("noise variance must be positive")
    adj = apply_Ah(fm, y)
    return GsureBatch(
        u=adj / _bcast(sigma2, adj),
        adjoint=adj,
        pinv=apply_pinv(fm, y),
        sigma2=sigma2,
        ids=list(ids),
    )


def _bcast(v: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    v = torch.as_tensor(v, dtype=like.real.dtype)
    return v.reshape(v.shape + (1,) * (like.ndim - v.ndim))


class Denoiser:
    """``g(u) = net(z)`` (or ``z + net(z)`` when residual), ``z = input_scale * u``.

    Operates on complex images ``(B, H, W)``. ``input_scale`` is a fixed
    per-dataset constant (the training noise variance by default) that
    brings the network input back to image units.
    """

    def __init__(self, net: Network, input_scale: float = 1.0, residual: bool = False):
        self.net = net
        self.input_scale = float(input_scale)
        self.residual = bool(residual)

    def __call__(self, u: torch.Tensor) -> torch.Tensor:
        squeeze = u.ndim == 2
        if squeeze:
            u = u.unsqueeze(0)
        z = u * self.input_scale
        out = from_channels(self.net(to_channels(z)))
        if self.residual:
            out = out + z
        return out[0] if squeeze else out


def _real_dot(a: torch.Tensor, b: torch.Tensor, batch_dims: int) -> torch.Tensor:
    prod = (a.conj() * b).real if a.is_complex() else a * b
    dims = tuple(range(batch_dims, prod.ndim))
    return prod.sum(dim=dims) if dims else prod


def _probe(shape, like: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    if like.is_complex():
        real_dtype = like.real.dtype
        re = torch.randn(shape, generator=gen, dtype=torch.float64).to(real_dtype)
        im = torch.randn(shape, generator=gen, dtype=torch.float64).to(real_dtype)
        return torch.complex(re, im)
    return torch.randn(shape, generator=gen, dtype=torch.float64).to(like.dtype)


def mc_divergence(
    net: Callable[[torch.Tensor], torch.Tensor],
    u: torch.Tensor,
    epsilon: float,
    seed: int,
    probes: int = 1,
    batch_dims: int = 0,
    input_step: float | torch.Tensor = 1.0,
) -> torch.Tensor:
    """Monte-Carlo divergence ``b^T (net(u + eps*b) - net(u)) / eps``.

    ``b`` is i.i.d. standard normal over the real representation of ``u``
    (real and imaginary parts separately). Returns one value per probe and
    per batch entry, shape ``(probes,) + u.shape[:batch_dims]``.
    ``input_step`` rescales the perturbation actually fed to ``net``
    (``u + eps * input_step * b``) for chain-rule divergences.
    """
    if not epsilon > 0:
        raise DomainError(f"epsilon must be positive, got {epsilon}")
    gen = torch.Generator().manual_seed(int(seed))
    base = net(u)
    step = _bcast(torch.as_tensor(input_step), u) if batch_dims else input_step
    values = []
    for _ in range(probes):
        b = _probe(u.shape, u, gen)
        pert = net(u + epsilon * step * b)
        values.append(_real_dot(b, pert - base, batch_dims) / epsilon)
    out = torch.stack(values)
    if not bool(torch.isfinite(out).all()):
        raise NumericError("divergence estimate is not finite")
    return out


def gsure_loss(
    net: Callable[[torch.Tensor], torch.Tensor],
    batch: GsureBatch,
    epsilon: float = 1e-3,
    seed: int = 0,
    divergence_wrt: str = "adjoint",
    probes: int = 1,
    reduction: str = "mean",
) -> torch.Tensor:
    """GSURE loss per sample (``reduction="none"``) or averaged over the batch.

    ``divergence_wrt="adjoint"`` perturbs ``A^H y`` by ``eps*b`` (the network
    input moves by ``eps*b/sigma2``) and weights the divergence by
    ``sigma2/2``; this is the unbiased form. ``"scaled"`` takes the
    divergence with respect to the network input ``u`` under the same
    ``sigma2/2`` weight, which inflates the Stein term by ``sigma2``
    relative to the default.
    """
    if divergence_wrt not in DIVERGENCE_VARIABLES:
        raise ContractError(f"divergence_wrt must be one of {DIVERGENCE_VARIABLES}")
    u = batch.u
    batch_dims = u.ndim - 2
    sigma2 = batch.sigma2
    if batch_dims == 0 and sigma2.ndim:
        sigma2 = sigma2.reshape(())
    g = net(u)
    if divergence_wrt == "adjoint":
        div = mc_divergence(net, u, epsilon, seed, probes, batch_dims, input_step=1.0 / sigma2)
        stein = 0.5 * sigma2 * div.mean(dim=0)
    else:
        div = mc_divergence(net, u, epsilon, seed, probes, batch_dims)
        stein = 0.5 * sigma2 * div.mean(dim=0)
    loss = _real_dot(g, g, batch_dims) + 2.0 * (stein - _real_dot(g, batch.pinv, batch_dims))
    return loss.mean() if reduction == "mean" else loss


def supervised_loss(net, batch: GsureBatch, clean: torch.Tensor | None, reduction: str = "mean"):
    """Oracle loss ``0.5 * ||g(u) - x||^2``."""
    if clean is None:
        raise ContractError("supervised loss needs the clean image")
    err = net(batch.u) - clean
    loss = 0.5 * _real_dot(err, err, batch.u.ndim - 2)
    return loss.mean() if reduction == "mean" else loss


# -- training -------------------------------------------------------------------

@dataclass
class DenoiserConfig:
    net: NetConfig = field(default_factory=lambda: NetConfig(zero_head=True))
    residual: bool = True
    lr: float = 1e-3
    iterations: int = 200
    batch_size: int = 8
    epsilon: float = 1e-3
    divergence_wrt: str = "adjoint"
    seed: int = 0


@dataclass
class DenoiserCheckpoint:
    denoiser: Denoiser
    config: DenoiserConfig
    trace: list[float]

    @property
    def net(self) -> Network:
        return self.denoiser.net


def load_gsure_inputs(manifest: DatasetManifest) -> tuple[GsureBatch, torch.Tensor]:
    """Fully sampled GSURE inputs for a whole manifest (clean images are not read)."""
    if not manifest.records:
        raise ContractError("manifest is empty")
    data = manifest.load_all(include_clean=False)
    ksp, maps, sigma2 = data["kspace"], data["maps"], data["sigma2"]
    fm = ForwardModel(maps=maps, mask=fully_sampled(maps), noise_sigma2=sigma2)
    return make_batch(fm, ksp, sigma2, ids=[r.id for r in manifest.records]), maps


def _subset(batch: GsureBatch, idx: torch.Tensor) -> GsureBatch:
    return GsureBatch(batch.u[idx], batch.adjoint[idx], batch.pinv[idx], batch.sigma2[idx],
                      [batch.ids[i] for i in idx.tolist()])


def train_denoiser(manifest: DatasetManifest, cfg: DenoiserConfig, log=None) -> DenoiserCheckpoint:
    """Adam on the GSURE loss; one probe per iteration with a fresh seed.

    The trace records the batch loss divided by the pixel count.
    """
    if not manifest.records:
        raise ContractError("cannot train a denoiser on an empty manifest")
    data, _ = load_gsure_inputs(manifest)
    n = data.u.shape[0]
    n_pix = data.u.shape[-1] * data.u.shape[-2]
    net = build_network(replace(cfg.net, seed=sub_seed(cfg.seed, 10)))
    den = Denoiser(net, input_scale=float(data.sigma2.mean()), residual=cfg.residual)
    state = AdamState(lr=cfg.lr)
    gen = torch.Generator().manual_seed(sub_seed(cfg.seed, 11))
    order = torch.randperm(n, generator=gen)
    pos = 0
    trace = []
    bs = min(cfg.batch_size, n)
    for it in range(cfg.iterations):
        if pos + bs > n:
            order = torch.randperm(n, generator=gen)
            pos = 0
        idx = order[pos:pos + bs]
        pos += bs
        net.zero_grad(set_to_none=True)
        loss = gsure_loss(den, _subset(data, idx), cfg.epsilon, sub_seed(cfg.seed, 1000 + it),
                          cfg.divergence_wrt) / n_pix
        if not torch.isfinite(loss):
            raise TrainingError(f"GSURE loss became non-finite at iteration {it}")
        loss.backward()
        adam_step(state, dict(net.named_parameters()), {k: p.grad for k, p in net.named_parameters()})
        trace.append(float(loss.detach()))
        if log is not None and (it % 50 == 0 or it == cfg.iterations - 1):
            log(f"denoiser iter {it}: gsure {trace[-1]:.5f}")
    return DenoiserCheckpoint(den, replace(cfg, net=net.cfg), trace)


def denoise(ckpt: DenoiserCheckpoint | Denoiser, y: torch.Tensor, fm: ForwardModel) -> torch.Tensor:
    """MMSE estimate ``g(A^H y / sigma2)``."""
    if fm.noise_sigma2 is None:
        raise ContractError("forward model has no noise variance set")
    den = ckpt.denoiser if isinstance(ckpt, DenoiserCheckpoint) else ckpt
    adj = apply_Ah(fm, y)
    u = adj / _bcast(torch.as_tensor(fm.noise_sigma2), adj)
    with torch.no_grad():
        return den(u)


def save_denoiser(path, ckpt: DenoiserCheckpoint) -> Path:
    path = Path(path)
    cfg = ckpt.config
    save_checkpoint(path, ckpt.net, step=len(ckpt.trace), extras={
        "kind": "denoiser",
        "input_scale": ckpt.denoiser.input_scale,
        "residual": ckpt.denoiser.residual,
        "lr": cfg.lr,
        "iterations": cfg.iterations,
        "batch_size": cfg.batch_size,
        "epsilon": cfg.epsilon,
        "divergence_wrt": cfg.divergence_wrt,
        "train_seed": cfg.seed,
    })
    with open(path / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "gsure_loss"])
        for i, v in enumerate(ckpt.trace):
            w.writerow([i, repr(v)])
    return path


def load_denoiser(path) -> DenoiserCheckpoint:
    path = Path(path)
    net, extras = load_checkpoint(path)
    if extras.get("kind") != "denoiser":
        raise ContractError(f"{path} is not a denoiser checkpoint")
    cfg = DenoiserConfig(
        net=net.cfg,
        residual=extras["residual"] == "True",
        lr=float(extras["lr"]),
        iterations=int(extras["iterations"]),
        batch_size=int(extras["batch_size"]),
        epsilon=float(extras["epsilon"]),
        divergence_wrt=extras["divergence_wrt"],
        seed=int(extras["train_seed"]),
    )
    trace = []
    loss_csv = path / "loss.csv"
    if loss_csv.exists():
        with open(loss_csv) as fh:
            trace = [float(row["gsure_loss"]) for row in csv.DictReader(fh)]
    den = Denoiser(net, float(extras["input_scale"]), residual=cfg.residual)
    return DenoiserCheckpoint(den, cfg, trace)
