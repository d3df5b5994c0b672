"""Small U-shaped convolutional networks, gradients, Adam, and checkpoints.

Reverse-mode differentiation is delegated to torch autograd; this module
fixes the topology, the seeded initialization, and the functional surface
(forward / backward_params / backward_input / adam_step) the training loops
use. Complex images travel through the networks as ``2*K`` real channels,
real parts first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, FormatError, ShapeError, TrainingError
from .tensorcore import load_tensor, save_tensor

TOPOLOGIES = ("unet", "conv")


@dataclass(frozen=True)
class NetConfig:
    """Network layout.

    ``channels`` lists the feature width of each resolution level, so the
    depth is ``len(channels)``. ``topology="conv"`` is a single linear conv
    layer (no nonlinearity), used for linear test cases.
    """

    in_channels: int = 2
    out_channels: int = 2
    channels: tuple[int, ...] = (16, 32, 64)
    kernel: int = 3
    topology: str = "unet"
    init: str = "he"
    zero_head: bool = False
    seed: int = 0

    @property
    def depth(self) -> int:
        return len(self.channels)


def _conv_count(cin: int, cout: int, k: int) -> int:
    return cin * cout * k * k + cout


def _layer_shapes(cfg: NetConfig) -> list[tuple[str, int, int, int]]:
    """(name, cin, cout, kernel) for every conv, in creation order."""
    k = cfg.kernel
    if cfg.topology == "conv":
        return [("conv", cfg.in_channels, cfg.out_channels, k)]
    shapes = []
    prev = cfg.in_channels
    for level, width in enumerate(cfg.channels):
        shapes.append((f"enc{level}a", prev, width, k))
        shapes.append((f"enc{level}b", width, width, k))
        prev = width
    for level in range(cfg.depth - 2, -1, -1):
        width = cfg.channels[level]
        shapes.append((f"dec{level}a", cfg.channels[level + 1] + width, width, k))
        shapes.append((f"dec{level}b", width, width, k))
    shapes.append(("head", cfg.channels[0], cfg.out_channels, 1))
    return shapes


def param_count(cfg: NetConfig) -> int:
    return sum(_conv_count(cin, cout, k) for _, cin, cout, k in _layer_shapes(cfg))


class Network(nn.Module):
    """U-shaped conv net: two convs per level, average-pool down, nearest up,
    concatenated skips, SiLU activations, and a 1x1 output head."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.convs = nn.ModuleDict()
        for name, cin, cout, k in _layer_shapes(cfg):
            self.convs[name] = nn.Conv2d(cin, cout, k, padding=k // 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        if cfg.topology == "conv":
            return self.convs["conv"](x)
        skips = []
        h = x
        for level in range(cfg.depth):
            if level > 0:
                h = F.avg_pool2d(h, 2)
            h = F.silu(self.convs[f"enc{level}a"](h))
            h = F.silu(self.convs[f"enc{level}b"](h))
            skips.append(h)
        for level in range(cfg.depth - 2, -1, -1):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = torch.cat([skips[level], h], dim=1)
            h = F.silu(self.convs[f"dec{level}a"](h))
            h = F.silu(self.convs[f"dec{level}b"](h))
        return self.convs["head"](h)


def build_network(cfg: NetConfig) -> Network:
    """Build and initialize a network.

    Initialization walks the convs in creation order drawing every weight
    from ``N(0, 2 / fan_in)`` (``fan_in = cin * k * k``) with one
    ``torch.Generator`` seeded by ``cfg.seed``; biases start at zero.
    ``init="zeros"`` zeroes everything instead; ``zero_head`` zeroes only the
    output layer (after the draws, so other weights are unaffected).
    """
    if cfg.topology not in TOPOLOGIES:
        raise ConfigError(f"unknown topology {cfg.topology!r}")
    if cfg.topology == "unet" and cfg.depth < 1:
        raise ConfigError("network depth must be at least 1")
    if cfg.kernel < 1 or cfg.kernel % 2 == 0:
        raise ConfigError(f"kernel size must be odd and positive, got {cfg.kernel}")
    if cfg.in_channels < 1 or cfg.out_channels < 1 or any(c < 1 for c in cfg.channels):
        raise ConfigError(f"channel counts must be positive: {cfg}")
    if cfg.init not in ("he", "zeros"):
        raise ConfigError(f"unknown init {cfg.init!r}")
    net = Network(cfg)
    gen = torch.Generator().manual_seed(int(cfg.seed))
    with torch.no_grad():
        for name, cin, cout, k in _layer_shapes(cfg):
            conv = net.convs[name]
            if cfg.init == "zeros":
                conv.weight.zero_()
            else:
                std = math.sqrt(2.0 / (cin * k * k))
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * std)
            conv.bias.zero_()
        if cfg.zero_head:
            last = _layer_shapes(cfg)[-1][0]
            net.convs[last].weight.zero_()
    return net


def _check_input(net: Network, x: torch.Tensor) -> None:
    if x.ndim != 4 or x.shape[1] != net.cfg.in_channels:
        raise ShapeError(
            f"expected input (B, {net.cfg.in_channels}, H, W), got {tuple(x.shape)}"
        )
    if net.cfg.topology == "unet":
        factor = 2 ** (net.cfg.depth - 1)
        if x.shape[-1] % factor or x.shape[-2] % factor:
            raise ShapeError(f"spatial size {tuple(x.shape[-2:])} not divisible by {factor}")


def forward(net: Network, x: torch.Tensor) -> torch.Tensor:
    _check_input(net, x)
    return net(x)


def _upstream_check(y: torch.Tensor, upstream: torch.Tensor) -> None:
    if tuple(upstream.shape) != tuple(y.shape):
        raise ShapeError(
            f"upstream gradient shape {tuple(upstream.shape)} != output {tuple(y.shape)}"
        )


def backward_params(net: Network, x: torch.Tensor, upstream: torch.Tensor) -> torch.Tensor:
    """Gradient of ``<upstream, net(x)>`` with respect to the flattened parameters."""
    _check_input(net, x)
    params = list(net.parameters())
    with torch.enable_grad():
        y = net(x)
        _upstream_check(y, upstream)
        grads = torch.autograd.grad(y, params, grad_outputs=upstream, allow_unused=True)
    return torch.cat(
        [(g if g is not None else torch.zeros_like(p)).reshape(-1) for g, p in zip(grads, params)]
    )


def backward_input(net: Network, x: torch.Tensor, upstream: torch.Tensor) -> torch.Tensor:
    """Gradient of ``<upstream, net(x)>`` with respect to ``x``."""
    _check_input(net, x)
    with torch.enable_grad():
        xi = x.detach().requires_grad_(True)
        y = net(xi)
        _upstream_check(y, upstream)
        (g,) = torch.autograd.grad(y, xi, grad_outputs=upstream)
    return g


def flat_params(net: Network) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in net.parameters()])


def to_channels(z: torch.Tensor) -> torch.Tensor:
    """(B, H, W) complex -> (B, 2, H, W) real."""
    return torch.stack([z.real, z.imag], dim=1)


def from_channels(x: torch.Tensor) -> torch.Tensor:
    """(B, 2, H, W) real -> (B, H, W) complex."""
    return torch.complex(x[:, 0], x[:, 1])


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(
    state: AdamState,
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor],
) -> Mapping[str, torch.Tensor]:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if g is None:
            raise TrainingError(f"missing gradient for parameter block {name!r}")
        if tuple(g.shape) != tuple(params[name].shape):
            raise ShapeError(f"gradient shape mismatch for parameter block {name!r}")
        if not torch.isfinite(g).all():
            raise TrainingError(f"non-finite gradient in parameter block {name!r}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    with torch.no_grad():
        for name, g in grads.items():
            p = params[name]
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            m, v = state.m[name], state.v[name]
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            denom = (v / bc2).sqrt_().add_(state.eps)
            p.addcdiv_(m / bc1, denom, value=-state.lr)
    return params


# -- checkpoints -------------------------------------------------------------

def _format_value(value) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def save_checkpoint(path, net: Network, step: int = 0, extras: Mapping | None = None) -> Path:
    """Write ``header.txt`` plus one CXT file per parameter block into ``path``."""
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    cfg = net.cfg
    lines = ["# gsurerecon network checkpoint"]
    for key in ("topology", "in_channels", "out_channels", "channels", "kernel", "init", "zero_head", "seed"):
        lines.append(f"{key}={_format_value(getattr(cfg, key))}")
    lines.append(f"step={int(step)}")
    names = []
    for name, p in net.named_parameters():
        names.append(name)
        save_tensor(path / "params" / f"{name}.cxt", p.detach().to(torch.float32))
    lines.append(f"blocks={','.join(names)}")
    for key, value in (extras or {}).items():
        lines.append(f"extra.{key}={_format_value(value)}")
    (path / "header.txt").write_text("\n".join(lines) + "\n")
    return path


def read_header(path) -> dict[str, str]:
    header_path = Path(path) / "header.txt"
    if not header_path.exists():
        raise FormatError(f"missing checkpoint header {header_path}")
    out = {}
    for line in header_path.read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def load_checkpoint(path) -> tuple[Network, dict[str, str]]:
    """Return the network and the ``extra.*`` header entries (prefix stripped)."""
    path = Path(path)
    header = read_header(path)
    try:
        channels = tuple(int(c) for c in header["channels"].split(",") if c)
        cfg = NetConfig(
            in_channels=int(header["in_channels"]),
            out_channels=int(header["out_channels"]),
            channels=channels,
            kernel=int(header["kernel"]),
            topology=header["topology"],
            init=header.get("init", "he"),
            zero_head=header.get("zero_head", "False") == "True",
            seed=int(header["seed"]),
        )
    except KeyError as exc:
        raise FormatError(f"checkpoint header missing {exc}") from exc
    net = build_network(replace(cfg, init="zeros"))
    net.cfg = cfg
    with torch.no_grad():
        for name, p in net.named_parameters():
            arr = load_tensor(path / "params" / f"{name}.cxt")
            if arr.shape != tuple(p.shape):
                raise FormatError(f"parameter block {name} has shape {arr.shape}")
            p.copy_(torch.from_numpy(np.asarray(arr, dtype=np.float32)))
    extras = {k[len("extra."):]: v for k, v in header.items() if k.startswith("extra.")}
    extras["step"] = header.get("step", "0")
    return net, extras
