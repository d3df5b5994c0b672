"""EDM-preconditioned diffusion denoiser, Euler sampling, and DPS reconstruction.

A denoiser here is any callable ``D(x, sigma)`` mapping complex images
``(B, H, W)`` and per-sample noise levels ``(B,)`` to clean-image estimates.
Noise is i.i.d. per real channel: ``x_sigma = x0 + sigma * n`` with ``n``
standard normal in both the real and imaginary parts.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .datagen import sub_seed
from .errors import ConfigError, ContractError, DomainError, NumericError, TrainingError
from .mri import ForwardModel, apply_A
from .nnet import (
    AdamState,
    NetConfig,
    Network,
    adam_step,
    build_network,
    load_checkpoint,
    save_checkpoint,
)

Denoiser = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


# -- schedules --------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    sigmas: torch.Tensor  # (N + 1,), strictly decreasing, last entry 0
    rule: str = "linear"

    @property
    def steps(self) -> int:
        return self.sigmas.numel() - 1


def make_schedule(sigma_min: float, sigma_max: float, steps: int, rule: str = "linear",
                  rho: float = 7.0) -> NoiseSchedule:
    """``steps`` levels from ``sigma_max`` down to ``sigma_min``, then 0.

    ``linear`` spaces the levels evenly in sigma; ``edm`` spaces them evenly
    in ``sigma**(1/rho)``.
    """
    if steps < 1:
        raise ConfigError(f"schedule needs at least one step, got {steps}")
    if not 0 < sigma_min < sigma_max:
        raise ConfigError(f"need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}")
    frac = np.linspace(0.0, 1.0, steps) if steps > 1 else np.zeros(1)
    if rule == "linear":
        levels = sigma_max + frac * (sigma_min - sigma_max)
    elif rule == "edm":
        a, b = sigma_max ** (1 / rho), sigma_min ** (1 / rho)
        levels = (a + frac * (b - a)) ** rho
    else:
        raise ConfigError(f"unknown schedule rule {rule!r}")
    if steps > 1:
        levels[-1] = sigma_min
    levels[0] = sigma_max  # pin endpoints against rounding in the power rule
    sigmas = torch.tensor(np.append(levels, 0.0), dtype=torch.float64)
    return NoiseSchedule(sigmas, rule)


def validate_schedule(schedule: NoiseSchedule) -> None:
    s = schedule.sigmas
    if s.ndim != 1 or s.numel() < 2:
        raise ConfigError("schedule must hold at least two levels")
    if float(s[-1]) != 0.0:
        raise ConfigError("schedule must end at sigma = 0")
    if not bool((s[1:] < s[:-1]).all()):
        raise ConfigError("schedule must be strictly decreasing")


# -- preconditioning ----------------------------------------------------------------

def edm_coefficients(sigma, sigma_data: float = 0.5):
    """(c_skip, c_out, c_in, c_noise) for noise level ``sigma``."""
    sigma = torch.as_tensor(sigma, dtype=torch.float64)
    s2, d2 = sigma**2, sigma_data**2
    c_skip = d2 / (s2 + d2)
    c_out = sigma * sigma_data / torch.sqrt(s2 + d2)
    c_in = 1.0 / torch.sqrt(s2 + d2)
    c_noise = torch.log(torch.clamp(sigma, min=1e-20)) / 4.0
    return c_skip, c_out, c_in, c_noise


def loss_weight(sigma, sigma_data: float = 0.5):
    sigma = torch.as_tensor(sigma, dtype=torch.float64)
    return (sigma**2 + sigma_data**2) / (sigma * sigma_data) ** 2


def _per_sample(sigma, x: torch.Tensor) -> torch.Tensor:
    sigma = torch.as_tensor(sigma, dtype=torch.float64)
    if sigma.ndim == 0:
        sigma = sigma.expand(x.shape[0])
    return sigma


def edm_denoise(net: Network, x_noisy: torch.Tensor, sigma, sigma_data: float = 0.5) -> torch.Tensor:
    """``c_skip*x + c_out*net(c_in*x, c_noise)`` with ``c_noise`` fed as an extra channel."""
    squeeze = x_noisy.ndim == 2
    x = x_noisy.unsqueeze(0) if squeeze else x_noisy
    sigma = _per_sample(sigma, x)
    if bool((sigma < 0).any()):
        raise DomainError("noise level must be non-negative")
    c_skip, c_out, c_in, c_noise = edm_coefficients(sigma, sigma_data)
    rdt = x.real.dtype
    view = (-1, 1, 1)
    xin = x * c_in.to(rdt).reshape(view)
    cond = c_noise.to(rdt).reshape(-1, 1, 1, 1).expand(x.shape[0], 1, *x.shape[-2:])
    feats = torch.cat([torch.stack([xin.real, xin.imag], dim=1), cond], dim=1)
    raw = net(feats)
    raw = torch.complex(raw[:, 0], raw[:, 1])
    out = c_skip.to(rdt).reshape(view) * x + c_out.to(rdt).reshape(view) * raw
    return out[0] if squeeze else out


class EdmDenoiser:
    def __init__(self, net: Network, sigma_data: float = 0.5):
        self.net = net
        self.sigma_data = float(sigma_data)

    def __call__(self, x: torch.Tensor, sigma) -> torch.Tensor:
        return edm_denoise(self.net, x, sigma, self.sigma_data)


class GaussianPriorDenoiser:
    """Exact posterior mean for a prior ``N(mu, tau2)`` per real component."""

    def __init__(self, mu: torch.Tensor, tau2: float):
        self.mu = mu
        self.tau2 = float(tau2)

    def __call__(self, x: torch.Tensor, sigma) -> torch.Tensor:
        s2 = torch.as_tensor(sigma, dtype=torch.float64) ** 2
        s2 = s2.to(x.real.dtype).reshape(s2.shape + (1, 1))
        return (self.tau2 * x + s2 * self.mu) / (self.tau2 + s2)


# -- training -----------------------------------------------------------------------

@dataclass
class EdmConfig:
    net: NetConfig = field(default_factory=lambda: NetConfig(in_channels=3, out_channels=2))
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    sigma_data: float = 0.5
    sigma_law: str = "loguniform"
    p_mean: float = -1.2
    p_std: float = 1.2
    iterations: int = 3000
    batch_size: int = 16
    lr: float = 1e-3
    ema_decay: float = 0.999  # 0 keeps the raw weights
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.ema_decay < 1:
            raise ConfigError(f"EMA decay must lie in [0, 1), got {self.ema_decay}")
        if not 0 < self.sigma_min < self.sigma_max:
            raise ConfigError("EDM sigma range must satisfy 0 < sigma_min < sigma_max")


@dataclass
class EdmCheckpoint:
    denoiser: EdmDenoiser
    config: EdmConfig
    trace: list[float]

    @property
    def net(self) -> Network:
        return self.denoiser.net


def sample_sigma(cfg: EdmConfig, n: int, gen: torch.Generator) -> torch.Tensor:
    if cfg.sigma_law == "loguniform":
        u = torch.rand(n, generator=gen, dtype=torch.float64)
        lo, hi = math.log(cfg.sigma_min), math.log(cfg.sigma_max)
        return torch.exp(lo + u * (hi - lo))
    if cfg.sigma_law == "lognormal":
        return torch.exp(cfg.p_mean + cfg.p_std * torch.randn(n, generator=gen, dtype=torch.float64))
    raise ConfigError(f"unknown sigma law {cfg.sigma_law!r}")


def complex_noise(shape, gen: torch.Generator, dtype=torch.complex64) -> torch.Tensor:
    """Standard normal in each real channel."""
    re = torch.randn(shape, generator=gen, dtype=torch.float64)
    im = torch.randn(shape, generator=gen, dtype=torch.float64)
    return torch.complex(re, im).to(dtype)


def weighted_error(denoiser: Denoiser, x0: torch.Tensor, noise: torch.Tensor, sigma,
                   sigma_data: float = 0.5) -> torch.Tensor:
    """``lambda(sigma) * ||D(x0 + sigma*noise, sigma) - x0||^2`` per sample."""
    sig = _per_sample(sigma, x0)
    rdt = x0.real.dtype
    xn = x0 + sig.to(rdt).reshape(-1, 1, 1) * noise
    err = denoiser(xn, sig) - x0
    sq = (err.real**2 + err.imag**2).sum(dim=(-2, -1))
    return loss_weight(sig, sigma_data).to(rdt) * sq


def edm_loss(denoiser: Denoiser, x0_clean: torch.Tensor, cfg: EdmConfig, seed: int,
             reduction: str = "mean") -> torch.Tensor:
    """Weighted denoising error at a random noise level per sample."""
    if not bool(torch.isfinite(torch.view_as_real(x0_clean)).all()):
        raise NumericError("non-finite training image")
    gen = torch.Generator().manual_seed(int(seed))
    sigma = sample_sigma(cfg, x0_clean.shape[0], gen)
    noise = complex_noise(x0_clean.shape, gen, x0_clean.dtype)
    loss = weighted_error(denoiser, x0_clean, noise, sigma, cfg.sigma_data)
    if not bool(torch.isfinite(loss).all()):
        raise NumericError("EDM loss is not finite")
    return loss.mean() if reduction == "mean" else loss


def train_edm(images: torch.Tensor, cfg: EdmConfig, log=None) -> EdmCheckpoint:
    """Adam on the EDM loss with random minibatches drawn without replacement per epoch.

    The returned weights are an exponential moving average of the iterates, with the
    decay warmed up as min(ema_decay, (1 + t) / (10 + t)).
    The trace records the batch loss divided by the pixel count.
    """
    if images is None or images.shape[0] == 0:
        raise ContractError("cannot train a diffusion model on an empty image set")
    n = images.shape[0]
    n_pix = images.shape[-1] * images.shape[-2]
    net = build_network(replace(cfg.net, seed=sub_seed(cfg.seed, 20)))
    den = EdmDenoiser(net, cfg.sigma_data)
    state = AdamState(lr=cfg.lr)
    gen = torch.Generator().manual_seed(sub_seed(cfg.seed, 21))
    bs = min(cfg.batch_size, n)
    order = torch.randperm(n, generator=gen)
    pos = 0
    trace = []
    ema = {k: p.detach().clone() for k, p in net.named_parameters()}
    for it in range(cfg.iterations):
        if pos + bs > n:
            order = torch.randperm(n, generator=gen)
            pos = 0
        idx = order[pos:pos + bs]
        pos += bs
        net.zero_grad(set_to_none=True)
        loss = edm_loss(den, images[idx], cfg, sub_seed(cfg.seed, 100000 + it)) / n_pix
        if not torch.isfinite(loss):
            raise TrainingError(f"EDM loss became non-finite at iteration {it}")
        loss.backward()
        adam_step(state, dict(net.named_parameters()), {k: p.grad for k, p in net.named_parameters()})
        decay = min(cfg.ema_decay, (1 + it) / (10 + it))
        with torch.no_grad():
            for k, p in net.named_parameters():
                ema[k].lerp_(p, 1 - decay)
        trace.append(float(loss.detach()))
        if log is not None and (it % 500 == 0 or it == cfg.iterations - 1):
            log(f"edm iter {it}: loss {trace[-1]:.5f}")
    with torch.no_grad():
        for k, p in net.named_parameters():
            p.copy_(ema[k])
    return EdmCheckpoint(den, replace(cfg, net=net.cfg), trace)


def save_edm(path, ckpt: EdmCheckpoint) -> Path:
    path = Path(path)
    cfg = ckpt.config
    save_checkpoint(path, ckpt.net, step=len(ckpt.trace), extras={
        "kind": "edm",
        "sigma_min": cfg.sigma_min,
        "sigma_max": cfg.sigma_max,
        "sigma_data": cfg.sigma_data,
        "sigma_law": cfg.sigma_law,
        "iterations": cfg.iterations,
        "batch_size": cfg.batch_size,
        "lr": cfg.lr,
        "ema_decay": cfg.ema_decay,
        "train_seed": cfg.seed,
    })
    with open(path / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "edm_loss"])
        for i, v in enumerate(ckpt.trace):
            w.writerow([i, repr(v)])
    return path


def load_edm(path) -> EdmCheckpoint:
    path = Path(path)
    net, extras = load_checkpoint(path)
    if extras.get("kind") != "edm":
        raise ContractError(f"{path} is not a diffusion checkpoint")
    cfg = EdmConfig(
        net=net.cfg,
        sigma_min=float(extras["sigma_min"]),
        sigma_max=float(extras["sigma_max"]),
        sigma_data=float(extras["sigma_data"]),
        sigma_law=extras["sigma_law"],
        iterations=int(extras["iterations"]),
        batch_size=int(extras["batch_size"]),
        lr=float(extras["lr"]),
        ema_decay=float(extras.get("ema_decay", 0.0)),
        seed=int(extras["train_seed"]),
    )
    trace = []
    if (path / "loss.csv").exists():
        with open(path / "loss.csv") as fh:
            trace = [float(r["edm_loss"]) for r in csv.DictReader(fh)]
    return EdmCheckpoint(EdmDenoiser(net, cfg.sigma_data), cfg, trace)


# -- sampling -----------------------------------------------------------------------

@dataclass
class DpsConfig:
    steps: int = 500
    sigma_min: float = 0.004
    sigma_max: float = 10.0
    rule: str = "linear"
    gamma: float = 1.0
    stochastic: bool = False
    n_samples: int = 5

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError(f"guidance strength must be >= 0, got {self.gamma}")
        if self.n_samples < 1:
            raise ConfigError("posterior sample count must be >= 1")

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.sigma_min, self.sigma_max, self.steps, self.rule)


def _generators(seed, batch: int) -> list[torch.Generator]:
    seeds = [int(seed) + i for i in range(batch)] if np.isscalar(seed) else [int(s) for s in seed]
    if len(seeds) != batch:
        raise ConfigError(f"got {len(seeds)} seeds for a batch of {batch}")
    return [torch.Generator().manual_seed(s) for s in seeds]


def _draw(gens, shape, dtype) -> torch.Tensor:
    return torch.stack([complex_noise(shape, g, dtype) for g in gens])


@dataclass
class SampleInfo:
    steps: int
    final_residual: torch.Tensor | None = None


def _run_sampler(denoiser: Denoiser, schedule: NoiseSchedule, shape, seed, dtype,
                 stochastic: bool, guidance=None) -> tuple[torch.Tensor, SampleInfo]:
    validate_schedule(schedule)
    batch = shape[0]
    gens = _generators(seed, batch)
    sig = schedule.sigmas
    x = _draw(gens, shape[1:], dtype) * float(sig[0])
    residual = None
    for i in range(schedule.steps):
        s, s_next = float(sig[i]), float(sig[i + 1])
        sig_b = torch.full((batch,), s, dtype=torch.float64)
        if guidance is None:
            with torch.no_grad():
                x0 = denoiser(x, sig_b)
        else:
            x = x.detach().requires_grad_(True)
            with torch.enable_grad():
                x0 = denoiser(x, sig_b)
                grad, residual = guidance(x, x0)
            x0 = x0.detach()
            x = x.detach()
        d = (x - x0) / s
        if stochastic and s_next > 0:
            x_next = x + 2.0 * (s_next - s) * d
            x_next = x_next + math.sqrt(2.0 * s * (s - s_next)) * _draw(gens, shape[1:], dtype)
        else:
            # x + (s_next - s) * d, arranged to land exactly on x0 when s_next = 0
            x_next = x0 + (s_next / s) * (x - x0)
        if guidance is not None:
            x_next = x_next - grad
        if not bool(torch.isfinite(torch.view_as_real(x_next)).all()):
            raise NumericError(f"sampler state became non-finite at step {i}")
        x = x_next.detach()
    return x, SampleInfo(schedule.steps, residual)


def sample_uncond(denoiser: Denoiser, schedule: NoiseSchedule, shape, seed,
                  stochastic: bool = False, dtype=torch.complex64) -> torch.Tensor:
    """Euler (ODE) or Euler-Maruyama (SDE) integration from ``N(0, sigma_max^2)``.

    ``shape`` is ``(B, H, W)``; sample ``b`` uses seed ``seed + b`` (or
    ``seed[b]`` when a sequence is given).
    """
    x, _ = _run_sampler(denoiser, schedule, tuple(shape), seed, dtype, stochastic)
    return x


def dps_reconstruct(denoiser: Denoiser, y: torch.Tensor, fm: ForwardModel, cfg: DpsConfig,
                    seed, return_info: bool = False):
    """Posterior sampling guided by ``||y - A D(x, sigma)||``.

    After each Euler step the state moves by
    ``-(gamma / ||y - A x0||) * grad_x ||y - A x0||^2`` with ``x0 = D(x, sigma)``,
    the gradient taken through the denoiser. ``gamma = 0`` reduces exactly to
    :func:`sample_uncond`.
    """
    if cfg.gamma < 0:
        raise ConfigError(f"guidance strength must be >= 0, got {cfg.gamma}")
    schedule = cfg.schedule()
    squeeze = y.ndim == 3
    yb = y.unsqueeze(0) if squeeze else y
    shape = (yb.shape[0],) + fm.image_shape
    guidance = None
    if cfg.gamma > 0:
        def guidance(x, x0):
            r = yb - apply_A(fm, x0)
            sq = (r.real**2 + r.imag**2).sum(dim=(-3, -2, -1))
            norm = torch.sqrt(sq).detach()
            weight = cfg.gamma / torch.clamp(norm, min=1e-12)
            (g,) = torch.autograd.grad((weight * sq).sum(), x)
            return g, norm
    x, info = _run_sampler(denoiser, schedule, shape, seed, yb.dtype, cfg.stochastic, guidance)
    with torch.no_grad():
        r = yb - apply_A(fm, x)
        info.final_residual = torch.sqrt((r.abs() ** 2).sum(dim=(-3, -2, -1)))
    out = x[0] if squeeze else x
    return (out, info) if return_info else out


def posterior_average(samples: Sequence[torch.Tensor]) -> torch.Tensor:
    if len(samples) == 0:
        raise ContractError("need at least one posterior sample")
    shape = samples[0].shape
    if any(s.shape != shape for s in samples):
        raise ContractError("posterior samples must share a shape")
    return torch.stack(list(samples)).mean(dim=0)
