"""Experiment configuration: INI parsing, validation and stable hashing."""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .errors import ConfigError

METHODS = ("naive-dps", "gsure-dps", "naive-modl", "gsure-modl")


@dataclass(frozen=True)
class DataSection:
    height: int = 32
    width: int = 32
    coils: int = 4
    n_train: int = 200
    n_val: int = 50
    acs_size: int = 4
    snr_grid: tuple[float, ...] = (32.0, 22.0, 12.0)


@dataclass(frozen=True)
class SamplingSection:
    r_grid: tuple[float, ...] = (4.0, 8.0)
    acs_width: int = 2


@dataclass(frozen=True)
class DenoiserSection:
    channels: tuple[int, ...] = (16, 32, 64)
    lr: float = 1e-3
    iterations: int = 200
    batch_size: int = 8
    epsilon: float = 1e-3


@dataclass(frozen=True)
class EdmSection:
    channels: tuple[int, ...] = (16, 32, 64)
    iterations: int = 1500
    batch_size: int = 16
    lr: float = 1e-3
    ema_decay: float = 0.999
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    sigma_data: float = 0.5
    sigma_law: str = "loguniform"


@dataclass(frozen=True)
class DpsSection:
    steps: int = 500
    sigma_min: float = 0.004
    sigma_max: float = 10.0
    rule: str = "linear"
    gamma: float = 0.3
    n_samples: int = 5
    stochastic: bool = False


@dataclass(frozen=True)
class ModlSection:
    channels: tuple[int, ...] = (16, 32, 64)
    unrolls: int = 6
    cg_iters: int = 8
    lam_init: float = 0.05
    epochs: int = 5
    batch_size: int = 4
    lr: float = 1e-3


@dataclass(frozen=True)
class SweepSection:
    methods: tuple[str, ...] = METHODS
    train_snrs: tuple[float, ...] = ()
    infer_snrs: tuple[float, ...] = ()
    matched: bool = False  # only cells with train SNR == infer SNR
    chunk_size: int = 50


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/desk"
    workers: int = 1
    data: DataSection = field(default_factory=DataSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    edm: EdmSection = field(default_factory=EdmSection)
    dps: DpsSection = field(default_factory=DpsSection)
    modl: ModlSection = field(default_factory=ModlSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    @property
    def train_snrs(self) -> tuple[float, ...]:
        return self.sweep.train_snrs or self.data.snr_grid

    @property
    def infer_snrs(self) -> tuple[float, ...]:
        return self.sweep.infer_snrs or self.data.snr_grid

    @property
    def cells(self) -> list[tuple[float, float]]:
        """(train SNR, infer SNR) pairs covered by the sweep."""
        return [(tr, inf) for tr in self.train_snrs for inf in self.infer_snrs
                if not self.sweep.matched or tr == inf]

    def validate(self) -> "ExperimentConfig":
        grid = self.data.snr_grid
        if not grid:
            raise ConfigError("data.snr_grid must not be empty")
        if any(b >= a for a, b in zip(grid, grid[1:])):
            raise ConfigError(f"data.snr_grid must be strictly descending (native first), got {grid}")
        for name in ("train_snrs", "infer_snrs"):
            extra = set(getattr(self, name)) - set(grid)
            if extra:
                raise ConfigError(f"sweep.{name} has SNRs outside data.snr_grid: {sorted(extra)}")
        if not self.cells:
            raise ConfigError("sweep.matched leaves no (train SNR, infer SNR) cell")
        if not self.sampling.r_grid or any(r < 1 for r in self.sampling.r_grid):
            raise ConfigError("sampling.r_grid must be non-empty with R >= 1")
        if not self.sweep.methods:
            raise ConfigError("sweep.methods must not be empty")
        unknown = set(self.sweep.methods) - set(METHODS)
        if unknown:
            raise ConfigError(f"unknown method tags {sorted(unknown)}; expected {METHODS}")
        if self.data.n_train < 1 or self.data.n_val < 1:
            raise ConfigError("dataset sizes must be positive")
        if self.workers < 1 or self.sweep.chunk_size < 1:
            raise ConfigError("workers and sweep.chunk_size must be positive")
        if self.dps.gamma < 0 or self.dps.n_samples < 1:
            raise ConfigError("dps.gamma must be >= 0 and dps.n_samples >= 1")
        return self


_SECTION_TYPES = {
    "data": DataSection, "sampling": SamplingSection, "denoiser": DenoiserSection, "edm": EdmSection,
    "dps": DpsSection, "modl": ModlSection, "sweep": SweepSection,
}


def _parse_value(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(s) for s in items)
            if default and isinstance(default[0], str):
                return tuple(items)
            return tuple(float(s) for s in items)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from exc


def _build_section(cls, items: dict, name: str):
    defaults = cls()
    known = {f.name for f in fields(cls)}
    unknown = set(items) - known
    if unknown:
        raise ConfigError(f"[{name}] unknown keys: {sorted(unknown)}")
    values = {}
    for key, raw in items.items():
        default = getattr(defaults, key)
        if key in ("train_snrs", "infer_snrs", "snr_grid", "r_grid"):
            default = (0.0,)
        values[key] = _parse_value(raw, default, f"[{name}] {key}")
    return cls(**values)


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    top = {}
    if parser.has_section("experiment"):
        exp = dict(parser.items("experiment"))
        unknown = set(exp) - {"seed", "out_dir", "workers"}
        if unknown:
            raise ConfigError(f"[experiment] unknown keys: {sorted(unknown)}")
        if "seed" in exp:
            top["seed"] = _parse_value(exp["seed"], 0, "[experiment] seed")
        if "workers" in exp:
            top["workers"] = _parse_value(exp["workers"], 1, "[experiment] workers")
        if "out_dir" in exp:
            top["out_dir"] = exp["out_dir"].strip()
    for name in parser.sections():
        if name == "experiment":
            continue
        if name not in _SECTION_TYPES:
            raise ConfigError(f"unknown config section [{name}]")
        top[name] = _build_section(_SECTION_TYPES[name], dict(parser.items(name)), name)
    return ExperimentConfig(**top).validate()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(path.read_text())


def plain(obj):
    if is_dataclass(obj):
        return {k: plain(v) for k, v in asdict(obj).items()}
    if isinstance(obj, dict):
        return {str(k): plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [plain(v) for v in obj]
    return obj


def config_hash(obj) -> str:
    """sha256 of canonical JSON (sorted keys), so field order never matters."""
    blob = json.dumps(plain(obj), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def render_config(cfg: ExperimentConfig) -> str:
    """INI text that parses back to ``cfg``."""
    def fmt(v):
        if isinstance(v, tuple):
            return ", ".join(str(x) for x in v)
        return str(v)

    lines = ["[experiment]", f"seed = {cfg.seed}", f"out_dir = {cfg.out_dir}", f"workers = {cfg.workers}"]
    for name in _SECTION_TYPES:
        section = getattr(cfg, name)
        lines += ["", f"[{name}]"]
        lines += [f"{f.name} = {fmt(getattr(section, f.name))}" for f in fields(section)]
    return "\n".join(lines) + "\n"
