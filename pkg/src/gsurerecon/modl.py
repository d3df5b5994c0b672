"""Unrolled MoDL reconstruction.

Starting from ``x = A^H y`` each unroll denoises ``z = D(x)`` and then solves
``(A^H A + lam I) x = A^H y + lam z`` with a few conjugate-gradient steps.
The denoiser is shared across unrolls and ``lam`` is stored as ``log lam``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import torch
from torch import nn

from .datagen import DatasetManifest, sub_seed
from .errors import ConfigError, ContractError, DegenerateInputError, NumericError, TrainingError
from .gsure import DenoiserCheckpoint, denoise
from .mri import ForwardModel, apply_Ah, apply_AhA, fully_sampled, make_masks
from .nnet import (
    AdamState,
    NetConfig,
    adam_step,
    build_network,
    from_channels,
    load_checkpoint,
    save_checkpoint,
    to_channels,
)
from .solvers import CGInfo, cg_solve

__all__ = [
    "CGInfo", "ModlCheckpoint", "ModlConfig", "ModlModel", "TARGET_MODES", "cg_solve",
    "load_modl", "make_targets", "modl_forward", "modl_loss", "nrmse_loss", "save_modl", "train_modl",
]

TARGET_MODES = ("clean", "gsure-denoised", "noisy-native")


@dataclass
class ModlConfig:
    net: NetConfig = field(default_factory=lambda: NetConfig(zero_head=True))
    residual: bool = True
    unrolls: int = 6
    cg_iters: int = 8
    cg_tol: float = 1e-6
    lam_init: float = 0.05
    epochs: int = 10
    batch_size: int = 4
    lr: float = 1e-3
    R: float = 4.0
    acs_width: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.unrolls < 1:
            raise ConfigError(f"unroll count must be >= 1, got {self.unrolls}")
        if not self.lam_init > 0:
            raise ConfigError(f"lambda must be positive, got {self.lam_init}")
        if self.cg_iters < 1:
            raise ConfigError("need at least one CG iteration per unroll")


class ModlModel(nn.Module):
    """Shared CNN denoiser plus a log-parameterized data-consistency weight."""

    def __init__(self, cfg: ModlConfig, net: nn.Module | None = None, log_lam: float | None = None):
        super().__init__()
        self.cfg = cfg
        self.net = net if net is not None else build_network(replace(cfg.net, seed=sub_seed(cfg.seed, 40)))
        init = math.log(cfg.lam_init) if log_lam is None else float(log_lam)
        self.log_lam = nn.Parameter(torch.tensor(init, dtype=next(self.net.parameters()).dtype))

    @property
    def lam(self) -> torch.Tensor:
        return torch.exp(self.log_lam)

    def denoise(self, x: torch.Tensor) -> torch.Tensor:
        out = from_channels(self.net(to_channels(x)))
        return out + x if self.cfg.residual else out


@dataclass
class ModlCheckpoint:
    model: ModlModel
    config: ModlConfig
    mode: str = "clean"
    trace: list[float] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)


def _model(ckpt) -> ModlModel:
    return ckpt.model if isinstance(ckpt, ModlCheckpoint) else ckpt


def modl_forward(ckpt, y: torch.Tensor, fm: ForwardModel, denoiser=None) -> torch.Tensor:
    """Reconstruct ``(B, H, W)`` images from ``(B, Nc, H, W)`` k-space.

    ``denoiser`` overrides the learned network (used by tests).
    """
    model = _model(ckpt)
    cfg = model.cfg
    den = model.denoise if denoiser is None else denoiser
    lam = model.lam.to(y.real.dtype)
    adj = apply_Ah(fm, y)
    batch_dims = adj.ndim - 2
    x = adj
    for k in range(cfg.unrolls):
        z = den(x)
        rhs = adj + lam * z
        try:
            x, _ = cg_solve(lambda v: apply_AhA(fm, v) + lam * v, rhs,
                            iters=cfg.cg_iters, tol=cfg.cg_tol, x0=z, batch_dims=batch_dims)
        except NumericError as exc:
            raise NumericError(f"unroll {k}: {exc}") from exc
    return x


def nrmse_loss(output: torch.Tensor, target: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """``||target - output|| / ||target||`` per image."""
    if output.shape != target.shape:
        raise ContractError(f"output shape {tuple(output.shape)} != target shape {tuple(target.shape)}")
    dims = (-2, -1)
    den = torch.sqrt((target.abs() ** 2).sum(dim=dims))
    if bool((den == 0).any()):
        raise DegenerateInputError("target image has zero norm")
    loss = torch.sqrt(((target - output).abs() ** 2).sum(dim=dims)) / den
    return loss.mean() if reduction == "mean" else loss


def modl_loss(ckpt, y: torch.Tensor, fm: ForwardModel, target: torch.Tensor,
              reduction: str = "mean") -> torch.Tensor:
    return nrmse_loss(modl_forward(ckpt, y, fm), target, reduction)


def make_targets(mode: str, data: dict, denoiser: DenoiserCheckpoint | None = None) -> torch.Tensor:
    """Training targets from fully sampled data (``manifest.load_all`` output).

    ``clean`` uses the stored clean images, ``noisy-native`` the fully
    sampled adjoint, ``gsure-denoised`` the stage-1 denoiser output.
    """
    if mode not in TARGET_MODES:
        raise ConfigError(f"unknown target mode {mode!r}; expected one of {TARGET_MODES}")
    if mode == "clean":
        if data.get("clean") is None:
            raise ContractError("clean targets requested but the manifest has no clean images")
        return data["clean"]
    maps = data["maps"]
    fm = ForwardModel(maps, fully_sampled(maps), noise_sigma2=data["sigma2"])
    if mode == "noisy-native":
        return apply_Ah(fm, data["kspace"])
    if denoiser is None:
        raise ContractError("gsure-denoised targets need a stage-1 denoiser checkpoint")
    return denoise(denoiser, data["kspace"], fm)


def train_modl(manifest: DatasetManifest, targets_mode: str, cfg: ModlConfig,
               denoiser: DenoiserCheckpoint | None = None, masks: torch.Tensor | None = None,
               log=None) -> ModlCheckpoint:
    """Adam on the NRMSE of the unrolled network over ``cfg.epochs`` epochs.

    Inputs are the manifest k-space retrospectively undersampled by
    ``masks`` (drawn from ``cfg.R`` and the seed when not given).
    """
    if not manifest.records:
        raise ContractError("cannot train MoDL on an empty manifest")
    data = manifest.load_all(include_clean=targets_mode == "clean")
    targets = make_targets(targets_mode, data, denoiser)
    ksp, maps = data["kspace"], data["maps"]
    n, W = ksp.shape[0], ksp.shape[-1]
    if masks is None:
        masks = make_masks(n, W, cfg.R, cfg.acs_width, sub_seed(cfg.seed, 41))
    if masks.shape != (n, W):
        raise ContractError(f"expected masks of shape {(n, W)}, got {tuple(masks.shape)}")
    model = ModlModel(cfg)
    params = dict(model.named_parameters())
    state = AdamState(lr=cfg.lr)
    gen = torch.Generator().manual_seed(sub_seed(cfg.seed, 42))
    bs = min(cfg.batch_size, n)
    trace, epochs = [], []
    for epoch in range(cfg.epochs):
        order = torch.randperm(n, generator=gen)
        losses = []
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            fm = ForwardModel(maps[idx], masks[idx])
            model.zero_grad(set_to_none=True)
            loss = modl_loss(model, ksp[idx] * fm._mask_b(), fm, targets[idx])
            if not torch.isfinite(loss):
                raise TrainingError(f"MoDL loss became non-finite in epoch {epoch}")
            loss.backward()
            adam_step(state, params, {k: p.grad for k, p in params.items()})
            losses.append(float(loss.detach()))
        trace.extend(losses)
        epochs.append({"epoch": epoch, "mean_nrmse": sum(losses) / len(losses),
                       "lambda": float(model.lam.detach())})
        if log is not None:
            log(f"modl epoch {epoch}: nrmse {epochs[-1]['mean_nrmse']:.4f} lambda {epochs[-1]['lambda']:.4f}")
    return ModlCheckpoint(model, replace(cfg, net=model.net.cfg), targets_mode, trace, epochs)


def save_modl(path, ckpt: ModlCheckpoint) -> Path:
    path = Path(path)
    cfg = ckpt.config
    save_checkpoint(path, ckpt.model.net, step=len(ckpt.trace), extras={
        "kind": "modl",
        "mode": ckpt.mode,
        "log_lambda": float(ckpt.model.log_lam.detach()),
        "residual": cfg.residual,
        "unrolls": cfg.unrolls,
        "cg_iters": cfg.cg_iters,
        "cg_tol": cfg.cg_tol,
        "lam_init": cfg.lam_init,
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "lr": cfg.lr,
        "R": cfg.R,
        "acs_width": cfg.acs_width,
        "train_seed": cfg.seed,
    })
    with open(path / "epochs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_nrmse", "lambda"])
        for row in ckpt.epochs:
            w.writerow([row["epoch"], repr(row["mean_nrmse"]), repr(row["lambda"])])
    with open(path / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "nrmse"])
        for i, v in enumerate(ckpt.trace):
            w.writerow([i, repr(v)])
    return path


def load_modl(path) -> ModlCheckpoint:
    path = Path(path)
    net, extras = load_checkpoint(path)
    if extras.get("kind") != "modl":
        raise ContractError(f"{path} is not a MoDL checkpoint")
    cfg = ModlConfig(
        net=net.cfg,
        residual=extras["residual"] == "True",
        unrolls=int(extras["unrolls"]),
        cg_iters=int(extras["cg_iters"]),
        cg_tol=float(extras["cg_tol"]),
        lam_init=float(extras["lam_init"]),
        epochs=int(extras["epochs"]),
        batch_size=int(extras["batch_size"]),
        lr=float(extras["lr"]),
        R=float(extras["R"]),
        acs_width=int(extras["acs_width"]),
        seed=int(extras["train_seed"]),
    )
    model = ModlModel(cfg, net=net, log_lam=float(extras["log_lambda"]))
    epochs, trace = [], []
    if (path / "epochs.csv").exists():
        with open(path / "epochs.csv") as fh:
            epochs = [{"epoch": int(r["epoch"]), "mean_nrmse": float(r["mean_nrmse"]),
                       "lambda": float(r["lambda"])} for r in csv.DictReader(fh)]
    if (path / "loss.csv").exists():
        with open(path / "loss.csv") as fh:
            trace = [float(r["nrmse"]) for r in csv.DictReader(fh)]
    return ModlCheckpoint(model, cfg, extras["mode"], trace, epochs)
