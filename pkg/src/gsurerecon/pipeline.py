"""Experiment orchestration behind the command-line interface.

Every artifact directory carries ``stamp.json`` with the hash of the
configuration that produced it. A matching stamp means the artifact is
reused; a different stamp is refused unless ``force`` is set.
"""

from __future__ import annotations

import csv
import json
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .config import METHODS, ExperimentConfig, config_hash, plain
from .datagen import DatasetManifest, build_dataset, degrade_to_snr, sub_seed
from .diffusion import DpsConfig, EdmConfig, dps_reconstruct, load_edm, save_edm, train_edm
from .errors import ConfigError, DependencyError
from .evalkit import (
    MetricsRecord,
    StatRecord,
    anatomy_mask,
    bonferroni,
    nrmse,
    paired_values,
    psnr,
    render_summary,
    ssim,
    summarize,
    wilcoxon_signed_rank,
    write_metrics,
    write_stats,
    write_summary,
)
from .gsure import DenoiserConfig, load_denoiser, save_denoiser, train_denoiser
from .modl import ModlConfig, load_modl, make_targets, modl_forward, save_modl, train_modl
from .mri import ForwardModel, apply_A, make_masks
from .nnet import NetConfig
from .tensorcore import load_tensor, save_tensor

SEED_TAGS = {
    "train_data": 1, "val_data": 2, "degrade_train": 3, "degrade_val": 4, "denoiser": 5,
    "edm": 6, "modl": 7, "train_masks": 8, "val_masks": 9, "dps": 10,
}
TRAINING_OF = {"naive": "noisy-native", "gsure": "gsure-denoised"}


def stage_seed(cfg: ExperimentConfig, tag: str) -> int:
    return sub_seed(cfg.seed, SEED_TAGS[tag])


def snr_tag(snr: float) -> str:
    return f"snr{snr:g}"


def r_tag(R: float) -> str:
    return f"R{R:g}"


def split_method(method: str) -> tuple[str, str]:
    training, family = method.split("-")
    return training, family


class Layout:
    def __init__(self, root):
        self.root = Path(root)

    def data(self, split: str, snr: float) -> Path:
        return self.root / "data" / split / snr_tag(snr)

    def manifest(self, split: str, snr: float) -> Path:
        return self.data(split, snr) / "manifest.tsv"

    def denoiser(self, snr: float) -> Path:
        return self.root / "models" / "denoiser" / snr_tag(snr)

    def edm(self, training: str, snr: float) -> Path:
        return self.root / "models" / "edm" / training / snr_tag(snr)

    def modl(self, training: str, R: float, snr: float) -> Path:
        return self.root / "models" / "modl" / training / r_tag(R) / snr_tag(snr)

    def recon(self, method: str, R: float, train_snr: float, infer_snr: float) -> Path:
        return self.root / "recon" / method / r_tag(R) / f"train{train_snr:g}_infer{infer_snr:g}"

    @property
    def eval(self) -> Path:
        return self.root / "eval"

    @property
    def ledger(self) -> Path:
        return self.root / "ledger.jsonl"


# -- stamps and ledger ------------------------------------------------------------

def read_stamp(path: Path) -> str | None:
    stamp = Path(path) / "stamp.json"
    if not stamp.exists():
        return None
    return json.loads(stamp.read_text())["hash"]


def _require(path: Path, what: str) -> str:
    h = read_stamp(path)
    if h is None:
        raise DependencyError(f"missing {what}: {path} (run the producing command first)")
    return h


def guarded(path: Path, payload: dict, build, force: bool = False, log=print) -> bool:
    """Run ``build()`` unless ``path`` already holds an artifact with the same hash."""
    path = Path(path)
    h = config_hash(payload)
    old = read_stamp(path)
    if old == h:
        log(f"skip {path}: up to date (config {h[:12]})")
        return False
    if path.exists() and any(path.iterdir()):
        if not force:
            raise ConfigError(
                f"{path} holds an artifact built from a different config "
                f"({(old or 'unstamped')[:12]} != {h[:12]}); use --force or another output directory"
            )
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    build()
    (path / "stamp.json").write_text(json.dumps({"hash": h, "payload": plain(payload)}, sort_keys=True, indent=1) + "\n")
    return True


@dataclass
class LedgerRecord:
    command: str
    config_hash: str
    seed: int
    started: str
    finished: str
    artifacts: list


class RunLedger:
    """Append-only JSON-lines record of executed commands."""

    def __init__(self, path):
        self.path = Path(path)

    def append(self, record: LedgerRecord) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a") as fh:
            fh.write(json.dumps(asdict(record), sort_keys=True) + "\n")

    def records(self) -> list[LedgerRecord]:
        if not self.path.exists():
            return []
        return [LedgerRecord(**json.loads(line)) for line in self.path.read_text().splitlines() if line]


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S")


def logged(cfg: ExperimentConfig, command: str, fn, *args, **kwargs) -> list[Path]:
    started = _now()
    artifacts = fn(*args, **kwargs)
    RunLedger(Layout(cfg.out_dir).ledger).append(LedgerRecord(
        command=command, config_hash=config_hash(cfg), seed=cfg.seed, started=started, finished=_now(),
        artifacts=[str(p) for p in artifacts],
    ))
    return artifacts


# -- gen-data ---------------------------------------------------------------------

def _data_payload(cfg: ExperimentConfig, split: str, snr: float) -> dict:
    return {"stage": "data", "split": split, "snr": snr, "seed": cfg.seed, "data": cfg.data}


def gen_data(cfg: ExperimentConfig, force: bool = False, log=print) -> list[Path]:
    lay = Layout(cfg.out_dir)
    d = cfg.data
    native = d.snr_grid[0]
    sizes = {"train": d.n_train, "val": d.n_val}
    out = []
    for split in ("train", "val"):
        base = lay.data(split, native)
        guarded(base, _data_payload(cfg, split, native), lambda: build_dataset(
            sizes[split], d.height, d.width, d.coils, native, stage_seed(cfg, f"{split}_data"),
            base, split=split, acs_size=d.acs_size), force, log)
        out.append(lay.manifest(split, native))
        for snr in d.snr_grid[1:]:
            target = lay.data(split, snr)
            seed = sub_seed(stage_seed(cfg, f"degrade_{split}"), int(round(snr * 100)))
            guarded(target, _data_payload(cfg, split, snr), lambda: degrade_to_snr(
                DatasetManifest.read(lay.manifest(split, native)), snr, seed, target), force, log)
            out.append(lay.manifest(split, snr))
    return out


# -- train ------------------------------------------------------------------------

def _denoiser_cfg(cfg: ExperimentConfig) -> DenoiserConfig:
    s = cfg.denoiser
    return DenoiserConfig(net=NetConfig(channels=s.channels, zero_head=True), lr=s.lr, iterations=s.iterations,
                          batch_size=s.batch_size, epsilon=s.epsilon, seed=stage_seed(cfg, "denoiser"))


def _edm_cfg(cfg: ExperimentConfig) -> EdmConfig:
    s = cfg.edm
    return EdmConfig(net=NetConfig(in_channels=3, out_channels=2, channels=s.channels), sigma_min=s.sigma_min,
                     sigma_max=s.sigma_max, sigma_data=s.sigma_data, sigma_law=s.sigma_law,
                     iterations=s.iterations, batch_size=s.batch_size, lr=s.lr, ema_decay=s.ema_decay,
                     seed=stage_seed(cfg, "edm"))


def _modl_cfg(cfg: ExperimentConfig, R: float) -> ModlConfig:
    s = cfg.modl
    return ModlConfig(net=NetConfig(channels=s.channels, zero_head=True), unrolls=s.unrolls, cg_iters=s.cg_iters,
                      lam_init=s.lam_init, epochs=s.epochs, batch_size=s.batch_size, lr=s.lr, R=R,
                      acs_width=cfg.sampling.acs_width, seed=stage_seed(cfg, "modl"))


def _trainings(cfg: ExperimentConfig, family: str) -> list[str]:
    return [t for t in ("naive", "gsure") if f"{t}-{family}" in cfg.sweep.methods]


def _train_masks(cfg: ExperimentConfig, R: float) -> torch.Tensor:
    seed = sub_seed(stage_seed(cfg, "train_masks"), int(round(R * 100)))
    return make_masks(cfg.data.n_train, cfg.data.width, R, cfg.sampling.acs_width, seed)


def val_masks(cfg: ExperimentConfig, R: float) -> torch.Tensor:
    seed = sub_seed(stage_seed(cfg, "val_masks"), int(round(R * 100)))
    return make_masks(cfg.data.n_val, cfg.data.width, R, cfg.sampling.acs_width, seed)


def train(cfg: ExperimentConfig, stage: str, force: bool = False, log=print) -> list[Path]:
    """Train one stage for every training SNR (and R for MoDL) in the sweep."""
    if stage not in ("denoiser", "edm", "modl"):
        raise ConfigError(f"unknown training stage {stage!r}")
    lay = Layout(cfg.out_dir)
    out = []
    for snr in cfg.train_snrs:
        manifest_path = lay.manifest("train", snr)
        data_hash = _require(lay.data("train", snr), "training data")
        if stage == "denoiser":
            dcfg = _denoiser_cfg(cfg)
            path = lay.denoiser(snr)
            guarded(path, {"stage": "denoiser", "data": data_hash, "cfg": dcfg},
                    lambda: save_denoiser(path, train_denoiser(DatasetManifest.read(manifest_path), dcfg, log)),
                    force, log)
            out.append(path)
        elif stage == "edm":
            ecfg = _edm_cfg(cfg)
            for training in _trainings(cfg, "dps"):
                den_hash = _require(lay.denoiser(snr), "stage-1 denoiser checkpoint") if training == "gsure" else None
                path = lay.edm(training, snr)

                def build(training=training, path=path):
                    manifest = DatasetManifest.read(manifest_path)
                    den = load_denoiser(lay.denoiser(snr)) if training == "gsure" else None
                    images = make_targets(TRAINING_OF[training], manifest.load_all(include_clean=False), den)
                    save_edm(path, train_edm(images, ecfg, log))

                guarded(path, {"stage": "edm", "training": training, "data": data_hash, "denoiser": den_hash,
                               "cfg": ecfg}, build, force, log)
                out.append(path)
        else:
            for training in _trainings(cfg, "modl"):
                den_hash = _require(lay.denoiser(snr), "stage-1 denoiser checkpoint") if training == "gsure" else None
                for R in cfg.sampling.r_grid:
                    mcfg = _modl_cfg(cfg, R)
                    path = lay.modl(training, R, snr)

                    def build(training=training, path=path, mcfg=mcfg, R=R):
                        den = load_denoiser(lay.denoiser(snr)) if training == "gsure" else None
                        ckpt = train_modl(DatasetManifest.read(manifest_path), TRAINING_OF[training], mcfg,
                                          denoiser=den, masks=_train_masks(cfg, R), log=log)
                        save_modl(path, ckpt)

                    guarded(path, {"stage": "modl", "training": training, "data": data_hash,
                                   "denoiser": den_hash, "cfg": mcfg}, build, force, log)
                    out.append(path)
    return out


# -- reconstruct ------------------------------------------------------------------

def dps_seed(cfg: ExperimentConfig, sample: int, k: int) -> int:
    """Posterior seed ``k`` of validation sample ``sample``; shared by every method."""
    return stage_seed(cfg, "dps") + k * cfg.data.n_val + sample


def _recon_chunk(task: dict) -> list[list]:
    """Reconstruct validation samples ``task['indices']``; pure given the task."""
    torch.set_num_threads(task.get("threads", 1))
    manifest = DatasetManifest.read(task["manifest"])
    idx = task["indices"]
    items = [manifest.load(i, include_clean=False) for i in idx]
    maps = torch.stack([it["maps"] for it in items])
    masks = task["masks"][idx]
    fm = ForwardModel(maps, masks)
    y = torch.stack([it["kspace"] for it in items]) * fm._mask_b()
    out_dir = Path(task["out_dir"])
    rows = []
    if task["family"] == "modl":
        ckpt = load_modl(task["model"])
        with torch.no_grad():
            x = modl_forward(ckpt, y, fm)
            res = torch.linalg.vector_norm(y - apply_A(fm, x), dim=(-3, -2, -1))
        for j, it in enumerate(items):
            save_tensor(out_dir / f"{it['id']}.cxt", x[j])
            rows.append([it["id"], -1, ckpt.config.unrolls, repr(float(res[j]))])
        return rows
    den = load_edm(task["model"]).denoiser
    dcfg = DpsConfig(**task["dps"])
    K = dcfg.n_samples
    yk = y.repeat(K, 1, 1, 1)
    fmk = ForwardModel(maps.repeat(K, 1, 1, 1), masks.repeat(K, 1))
    seeds = [task["seeds"][k][i] for k in range(K) for i in idx]
    xs, info = dps_reconstruct(den, yk, fmk, dcfg, seeds, return_info=True)
    xs = xs.reshape(K, len(idx), *xs.shape[-2:])
    res = info.final_residual.reshape(K, len(idx))
    for j, it in enumerate(items):
        for k in range(K):
            save_tensor(out_dir / f"{it['id']}_seed{k}.cxt", xs[k, j])
            rows.append([it["id"], seeds[k * len(idx) + j], dcfg.steps, repr(float(res[k, j]))])
        save_tensor(out_dir / f"{it['id']}_avg.cxt", xs[:, j].mean(dim=0))
    return rows


def reconstruct(cfg: ExperimentConfig, methods=None, force: bool = False, log=print) -> list[Path]:
    methods = tuple(methods) if methods else cfg.sweep.methods
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ConfigError(f"unknown method tags {sorted(unknown)}")
    lay = Layout(cfg.out_dir)
    n_val = cfg.data.n_val
    seeds = [[dps_seed(cfg, i, k) for i in range(n_val)] for k in range(cfg.dps.n_samples)]
    out = []
    for method in methods:
        training, family = split_method(method)
        for R in cfg.sampling.r_grid:
            masks = val_masks(cfg, R)
            for train_snr, infer_snr in cfg.cells:
                model = lay.edm(training, train_snr) if family == "dps" else lay.modl(training, R, train_snr)
                model_hash = _require(model, f"{method} checkpoint")
                data_hash = _require(lay.data("val", infer_snr), "validation data")
                path = lay.recon(method, R, train_snr, infer_snr)
                payload = {"stage": "recon", "method": method, "R": R, "model": model_hash, "data": data_hash,
                           "masks": [cfg.seed, cfg.sampling.acs_width], "seeds": seeds,
                           "dps": cfg.dps if family == "dps" else None}
                chunks = [list(range(s, min(s + cfg.sweep.chunk_size, n_val)))
                          for s in range(0, n_val, cfg.sweep.chunk_size)]
                tasks = [{"manifest": str(lay.manifest("val", infer_snr)), "indices": c, "masks": masks,
                          "out_dir": str(path), "family": family, "model": str(model), "seeds": seeds,
                          "dps": asdict(DpsConfig(**asdict(cfg.dps))) if family == "dps" else None}
                         for c in chunks]

                def build(tasks=tasks, path=path, label=f"{method} R={R:g} {train_snr:g}->{infer_snr:g} dB"):
                    t0 = time.time()
                    if cfg.workers > 1 and len(tasks) > 1:
                        with ProcessPoolExecutor(cfg.workers) as pool:
                            results = list(pool.map(_recon_chunk, tasks))
                    else:
                        results = [_recon_chunk(t) for t in tasks]
                    with open(path / "runs.csv", "w", newline="") as fh:
                        w = csv.writer(fh, lineterminator="\n")
                        w.writerow(["id", "seed", "steps", "final_residual"])
                        for rows in results:
                            w.writerows(rows)
                    log(f"reconstructed {label} in {time.time() - t0:.1f}s")

                guarded(path, payload, build, force, log)
                out.append(path)
    return out


# -- evaluate ---------------------------------------------------------------------

def _recon_path(path: Path, sid: str, family: str, k: int | None = None) -> Path:
    if family == "modl":
        return path / f"{sid}.cxt"
    return path / (f"{sid}_avg.cxt" if k is None else f"{sid}_seed{k}.cxt")


def evaluate(cfg: ExperimentConfig, force: bool = False, log=print) -> list[Path]:
    """Metrics, paired statistics, summary tables and figures under ``eval/``."""
    from . import figures

    lay = Layout(cfg.out_dir)
    cells = []
    for method in cfg.sweep.methods:
        for R in cfg.sampling.r_grid:
            for tr, inf in cfg.cells:
                path = lay.recon(method, R, tr, inf)
                cells.append((method, R, tr, inf, path, _require(path, f"{method} reconstructions")))
    payload = {"stage": "eval", "cells": [c[-1] for c in cells], "n_samples": cfg.dps.n_samples}

    def build():
        refs = {}
        for inf in cfg.infer_snrs:
            manifest = DatasetManifest.read(lay.manifest("val", inf))
            for r in manifest.records:
                if r.clean is None:
                    raise DependencyError(f"validation sample {r.id} has no reference image")
                if r.id not in refs:
                    ref = load_tensor(manifest.path(r.clean))
                    refs[r.id] = (ref, anatomy_mask(ref))
        ids = sorted(refs)
        records, curves = [], []
        for method, R, tr, inf, path, _ in cells:
            family = split_method(method)[1]
            for i, sid in enumerate(ids):
                ref, mask = refs[sid]
                est = load_tensor(_recon_path(path, sid, family))
                records.append(MetricsRecord(
                    id=sid, method=method, train_snr_db=float(tr), infer_snr_db=float(inf), R=float(R),
                    seed=dps_seed(cfg, i, 0) if family == "dps" else -1,
                    nrmse=nrmse(ref, est, mask), ssim=ssim(ref, est, mask), psnr=psnr(ref, est, mask)))
            if family == "dps":
                for k in range(1, cfg.dps.n_samples + 1):
                    vals = []
                    for sid in ids:
                        ref, mask = refs[sid]
                        avg = np.mean([load_tensor(_recon_path(path, sid, family, j)) for j in range(k)], axis=0)
                        vals.append(nrmse(ref, avg, mask))
                    curves.append([method, f"{R:g}", f"{tr:g}", f"{inf:g}", k, repr(float(np.mean(vals)))])
        write_metrics(lay.eval / "metrics.csv", records)
        with open(lay.eval / "averages.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "R", "train_snr_db", "infer_snr_db", "n_averaged", "mean_nrmse"])
            w.writerows(curves)
        stats = compare(cfg, records)
        write_stats(lay.eval / "stats.csv", stats)
        rows = summarize(records)
        write_summary(lay.eval / "summary.csv", rows)
        (lay.eval / "summary.txt").write_text(render_summary(rows))
        figures.render_all(lay.eval, rows, curves, stats, refs, cells, log)

    guarded(lay.eval, payload, build, force, log)
    return [lay.eval / n for n in ("metrics.csv", "stats.csv", "summary.csv", "summary.txt", "averages.csv")]


def compare(cfg: ExperimentConfig, records, alpha: float = 0.05) -> list[StatRecord]:
    """GSURE vs naive paired tests per family, metric and cell, Bonferroni-corrected."""
    tests = []
    for family in ("dps", "modl"):
        if not {f"naive-{family}", f"gsure-{family}"} <= set(cfg.sweep.methods):
            continue
        for metric in ("nrmse", "ssim"):
            for R in cfg.sampling.r_grid:
                for tr, inf in cfg.cells:
                    _, a, b = paired_values(records, f"gsure-{family}", f"naive-{family}", metric,
                                            R=float(R), train_snr_db=float(tr), infer_snr_db=float(inf))
                    res = wilcoxon_signed_rank(a, b)
                    tests.append((f"{family}:{metric}:R{R:g}:train{tr:g}:infer{inf:g}", res))
    if not tests:
        return []
    flags = bonferroni([t[1].p_value for t in tests], alpha)
    return [StatRecord(name, res.n, res.statistic, res.p_value, flag) for (name, res), flag in zip(tests, flags)]


# -- whole sweep ------------------------------------------------------------------

def run_all(cfg: ExperimentConfig, force: bool = False, log=print) -> list[Path]:
    out = logged(cfg, "gen-data", gen_data, cfg, force, log)
    needs_denoiser = any(m.startswith("gsure") for m in cfg.sweep.methods)
    if needs_denoiser:
        out += logged(cfg, "train denoiser", train, cfg, "denoiser", force, log)
    if any(m.endswith("dps") for m in cfg.sweep.methods):
        out += logged(cfg, "train edm", train, cfg, "edm", force, log)
    if any(m.endswith("modl") for m in cfg.sweep.methods):
        out += logged(cfg, "train modl", train, cfg, "modl", force, log)
    out += logged(cfg, "reconstruct", reconstruct, cfg, None, force, log)
    out += logged(cfg, "evaluate", evaluate, cfg, force, log)
    return out
