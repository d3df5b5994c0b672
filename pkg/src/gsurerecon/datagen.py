"""Synthetic ellipse phantoms and pre-whitened, normalized multi-coil datasets."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, ContractError, DatasetError, FormatError
from .mri import (
    acs_rss,
    add_noise,
    complex_normal,
    make_sensitivities,
    normalize_kspace,
    prewhiten,
    snr_db as to_snr_db,
    variance_for_snr,
)
from .tensorcore import fft2c_batch, ifft2c_batch, load_tensor, save_tensor

MAG_MAX = 1.5


def sub_seed(seed: int, tag: int) -> int:
    """Stable derived seed for an independent stream tagged ``tag``."""
    return int(np.random.SeedSequence([int(seed), int(tag)]).generate_state(1)[0])


@dataclass
class Phantom:
    image: np.ndarray  # complex64 (H, W)
    seed: int
    ellipses: list[tuple[float, float, float, float, float, float]]


def _ellipse_fill(yy, xx, cy, cx, ay, ax, angle):
    c, s = np.cos(angle), np.sin(angle)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return ((u / ax) ** 2 + (v / ay) ** 2) <= 1.0


def gen_phantom(H: int, W: int, seed: int) -> Phantom:
    """Random overlapping-ellipse phantom with a smooth complex phase.

    Coordinates are normalized to [-1, 1]. A body ellipse stays inside
    radius 0.85 so the corners carry no signal; 2 to 7 inner ellipses add or
    subtract intensity. Magnitude is rendered on a 2x supersampled grid,
    averaged, and clipped to [0, 1.5]. The phase is a sum of low-order
    cosines and sines (spatial frequencies up to 1 cycle per field of view).
    """
    if H < 16 or W < 16:
        raise ConfigError(f"phantom needs H, W >= 16, got {H}x{W}")
    rng = np.random.default_rng(seed)
    ys = (np.arange(2 * H) + 0.5) / (2 * H) * 2 - 1
    xs = (np.arange(2 * W) + 0.5) / (2 * W) * 2 - 1
    yy, xx = np.meshgrid(ys, xs, indexing="ij")

    ellipses = []
    body = (
        rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05),
        rng.uniform(0.6, 0.8), rng.uniform(0.5, 0.75),
        rng.uniform(-0.3, 0.3), rng.uniform(0.6, 0.9),
    )
    ellipses.append(body)
    for _ in range(int(rng.integers(2, 8))):
        ay = rng.uniform(0.08, 0.35)
        ax = rng.uniform(0.08, 0.35)
        cy = body[0] + rng.uniform(-0.55, 0.55) * body[2]
        cx = body[1] + rng.uniform(-0.55, 0.55) * body[3]
        sign = 1.0 if rng.uniform() < 0.7 else -1.0
        ellipses.append((cy, cx, ay, ax, rng.uniform(0, np.pi), sign * rng.uniform(0.1, 0.5)))

    mag = np.zeros_like(yy)
    inside_body = _ellipse_fill(yy, xx, *body[:5])
    mag[inside_body] = body[5]
    for cy, cx, ay, ax, angle, value in ellipses[1:]:
        mag[_ellipse_fill(yy, xx, cy, cx, ay, ax, angle) & inside_body] += value
    mag = mag.reshape(H, 2, W, 2).mean(axis=(1, 3))
    mag = np.clip(mag, 0.0, MAG_MAX)

    py, px = np.meshgrid((np.arange(H) - H // 2) / H, (np.arange(W) - W // 2) / W, indexing="ij")
    phase = rng.uniform(-np.pi, np.pi) * np.ones((H, W))
    for ky, kx in ((0, 1), (1, 0), (1, 1), (1, -1)):
        arg = 2 * np.pi * (ky * py + kx * px)
        phase += rng.uniform(-0.4, 0.4) * np.cos(arg) + rng.uniform(-0.4, 0.4) * np.sin(arg)
    image = (mag * np.exp(1j * phase)).astype(np.complex64)
    return Phantom(image=image, seed=int(seed), ellipses=ellipses)


# -- manifests ------------------------------------------------------------------

MANIFEST_COLUMNS = ("id", "kspace", "maps", "clean", "sigma2", "snr_db", "split")


@dataclass
class SampleRecord:
    id: str
    kspace: str
    maps: str
    clean: str | None
    sigma2: float
    snr_db: float
    split: str


@dataclass
class DatasetManifest:
    root: Path
    records: list[SampleRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def path(self, rel: str) -> Path:
        return (self.root / rel).resolve()

    def write(self, path=None) -> Path:
        path = Path(path) if path is not None else self.root / "manifest.tsv"
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise DatasetError("duplicate sample ids in manifest")
        lines = ["#" + "\t".join(MANIFEST_COLUMNS)]
        for r in self.records:
            lines.append("\t".join([
                r.id, r.kspace, r.maps, r.clean or "-",
                repr(float(r.sigma2)), repr(float(r.snr_db)), r.split,
            ]))
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise DatasetError(f"manifest {path} does not exist")
        records = []
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != len(MANIFEST_COLUMNS):
                raise FormatError(f"{path}:{lineno}: expected {len(MANIFEST_COLUMNS)} fields")
            rid, ksp, maps, clean, s2, snr, split = parts
            records.append(SampleRecord(rid, ksp, maps, None if clean == "-" else clean,
                                        float(s2), float(snr), split))
        return cls(root=path.parent, records=records)

    def load(self, index: int, include_clean: bool = True) -> dict:
        """Tensors for one sample: kspace, maps, clean (or None), sigma2."""
        r = self.records[index]
        try:
            out = {
                "id": r.id,
                "kspace": torch.from_numpy(load_tensor(self.path(r.kspace))),
                "maps": torch.from_numpy(load_tensor(self.path(r.maps))),
                "clean": torch.from_numpy(load_tensor(self.path(r.clean))) if (r.clean and include_clean) else None,
                "sigma2": r.sigma2,
            }
        except (OSError, FormatError) as exc:
            raise DatasetError(str(exc), sample_id=r.id) from exc
        return out

    def load_all(self, include_clean: bool = True) -> dict:
        """Stacked tensors for the whole manifest."""
        if not self.records:
            raise ContractError("manifest is empty")
        items = [self.load(i, include_clean) for i in range(len(self.records))]
        has_clean = all(it["clean"] is not None for it in items)
        return {
            "ids": [it["id"] for it in items],
            "kspace": torch.stack([it["kspace"] for it in items]),
            "maps": torch.stack([it["maps"] for it in items]),
            "clean": torch.stack([it["clean"] for it in items]) if has_clean else None,
            "sigma2": torch.tensor([it["sigma2"] for it in items], dtype=torch.float32),
        }


def _rel(target: Path, base: Path) -> str:
    return os.path.relpath(Path(target).resolve(), Path(base).resolve())


def write_sidecar(path: Path, **fields) -> None:
    path.write_text("".join(f"{k}={v}\n" for k, v in fields.items()))


def _acs_p99(y: torch.Tensor, acs_size: int) -> float:
    return float(np.percentile(acs_rss(y, acs_size).numpy(), 99))


def build_dataset(
    n: int,
    H: int,
    W: int,
    n_coils: int,
    snr_db: float,
    seed: int,
    out_dir,
    split: str = "train",
    acs_size: int | None = None,
) -> DatasetManifest:
    """Simulate ``n`` fully sampled, pre-whitened, ACS-normalized samples.

    Per sample (seed ``seed + i``): phantom and coil maps, k-space ``F S x``,
    raw acquisition ``a * F S x + eta`` with coil covariance ``s^2 I``, then
    pre-whitening and normalization. The signal gain ``a`` is solved so the
    normalized noise variance equals ``10**(-snr_db / 10)``.
    """
    if n < 1:
        raise ConfigError(f"dataset size must be >= 1, got {n}")
    acs_size = acs_size or max(2, H // 8)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    target_q = 10.0 ** (snr_db / 20.0)
    manifest = DatasetManifest(root=out_dir)
    for i in range(n):
        sample_seed = seed + i
        sid = f"{split}{i:04d}"
        try:
            rng = np.random.default_rng(sub_seed(sample_seed, 2))
            x = torch.from_numpy(gen_phantom(H, W, sample_seed).image.astype(np.complex128))
            maps = make_sensitivities(n_coils, H, W, sub_seed(sample_seed, 1)).to(torch.complex128)
            y_sig = fft2c_batch(maps * x)
            raw_std = rng.uniform(0.5, 2.0)
            cov = raw_std**2 * np.eye(n_coils)
            eta = add_noise(torch.zeros_like(y_sig), cov, sub_seed(sample_seed, 3))
            white_sig = prewhiten(y_sig, cov)
            white_eta = prewhiten(eta, cov)
            gain = target_q / _acs_p99(white_sig, acs_size)
            for _ in range(60):
                q = _acs_p99(gain * white_sig + white_eta, acs_size)
                if abs(q / target_q - 1.0) < 1e-12:
                    break
                gain *= target_q / q
            y_white = gain * white_sig + white_eta
            y_norm, q = normalize_kspace(y_white, acs_size)
            sigma2 = 1.0 / q**2
            clean = x * (gain / raw_std) / q
            save_tensor(out_dir / f"{sid}_kspace.cxt", y_norm.to(torch.complex64))
            save_tensor(out_dir / f"{sid}_maps.cxt", maps.to(torch.complex64))
            save_tensor(out_dir / f"{sid}_clean.cxt", clean.to(torch.complex64))
            write_sidecar(out_dir / f"{sid}.txt", seed=sample_seed, R=1, acs=acs_size,
                          sigma2=repr(sigma2), snr_db=repr(to_snr_db(sigma2)), scale=repr(q))
        except OSError as exc:
            raise DatasetError(str(exc), sample_id=sid) from exc
        manifest.records.append(SampleRecord(
            sid, f"{sid}_kspace.cxt", f"{sid}_maps.cxt", f"{sid}_clean.cxt",
            sigma2, to_snr_db(sigma2), split,
        ))
    manifest.write()
    return manifest


def degrade_to_snr(manifest: DatasetManifest, target_snr_db: float, seed: int, out_dir) -> DatasetManifest:
    """Add white complex noise so every sample lands on ``target_snr_db``.

    Valid because the data are already pre-whitened: the added variance is
    ``10**(-target/10) - sigma2_source`` per entry. Maps and clean images
    are referenced from the source dataset rather than copied.
    """
    if not manifest.records:
        raise ContractError("cannot degrade an empty manifest")
    target_var = variance_for_snr(target_snr_db)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    new = DatasetManifest(root=out_dir)
    for i, r in enumerate(manifest.records):
        add_var = target_var - r.sigma2
        if add_var <= r.sigma2 * 1e-9:
            raise ConfigError(
                f"target SNR {target_snr_db} dB is not below source SNR {r.snr_db:.3f} dB ({r.id})"
            )
        y = torch.from_numpy(load_tensor(manifest.path(r.kspace))).to(torch.complex128)
        rng = np.random.default_rng(sub_seed(seed + i, 4))
        noise = complex_normal(rng, tuple(y.shape)) * np.sqrt(add_var)
        y = y + torch.from_numpy(noise)
        save_tensor(out_dir / f"{r.id}_kspace.cxt", y.to(torch.complex64))
        write_sidecar(out_dir / f"{r.id}.txt", seed=seed + i, R=1, source_snr_db=repr(r.snr_db),
                      sigma2=repr(target_var), snr_db=repr(to_snr_db(target_var)),
                      added_sigma2=repr(add_var))
        new.records.append(replace(
            r,
            kspace=f"{r.id}_kspace.cxt",
            maps=_rel(manifest.path(r.maps), out_dir),
            clean=_rel(manifest.path(r.clean), out_dir) if r.clean else None,
            sigma2=target_var,
            snr_db=to_snr_db(target_var),
        ))
    new.write()
    return new


def estimate_sigma2(kspace: torch.Tensor, patch: int | None = None) -> float:
    """Noise variance from signal-free corner patches of the coil images."""
    coil = ifft2c_batch(torch.as_tensor(kspace).to(torch.complex128))
    H, W = coil.shape[-2:]
    p = patch or max(2, min(H, W) // 8)
    corners = [coil[..., :p, :p], coil[..., :p, -p:], coil[..., -p:, :p], coil[..., -p:, -p:]]
    vals = torch.cat([c.reshape(-1) for c in corners])
    return float((vals.abs() ** 2).mean() - vals.mean().abs() ** 2)
