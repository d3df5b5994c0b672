"""Acceptance criteria 1-11, one pass/fail line each.

Criteria 7-9 drive the desk-scale sweep through the command-line interface
(about an hour on one CPU core). Set ``GSURERECON_DESK_DIR`` to reuse an
existing output directory; stamps then skip every finished stage, so the
reported runtimes only cover work actually redone.
"""

import csv
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from conftest import crandn, rel_err
from gsurerecon.cli import main
from gsurerecon.config import load_config
from gsurerecon.datagen import DatasetManifest
from gsurerecon.diffusion import DpsConfig, GaussianPriorDenoiser, dps_reconstruct, make_schedule, sample_uncond
from gsurerecon.evalkit import (
    anatomy_mask, bonferroni, paired_values, psnr, read_metrics, wilcoxon_signed_rank,
)
from gsurerecon.gsure import denoise, gsure_loss, load_denoiser, make_batch, mc_divergence, supervised_loss
from gsurerecon.modl import ModlConfig, ModlModel, cg_solve, modl_loss
from gsurerecon.mri import (
    ForwardModel, apply_A, apply_Ah, fully_sampled, make_mask, make_sensitivities,
)
from gsurerecon.nnet import NetConfig, build_network
from gsurerecon.pipeline import Layout
from gsurerecon.tensorcore import fft2c, fft2c_batch, ifft2c, ifft2c_batch

CONFIGS = Path(__file__).parent / "configs"
LOW_SNR, HIGH_SNR = 12.0, 32.0


@pytest.fixture
def report(capsys):
    def emit(n, ok, seconds, budget, detail):
        within = budget is None or seconds < budget
        status = "PASS" if ok and within else "FAIL"
        limit = "" if budget is None else f" (budget {budget:g}s)"
        with capsys.disabled():
            print(f"\ncriterion {n:>2}: {status}  {seconds:.1f}s{limit}  {detail}")
        return ok and within
    return emit


# -- 1. FFT and operators ---------------------------------------------------------

def test_criterion_01_fft_and_operators(report, rng):
    t0 = time.perf_counter()
    worst = 0.0
    for shape in [(8, 8), (16, 16), (15, 17), (32, 24)]:
        x = crandn(rng, *shape)
        worst = max(worst, rel_err(ifft2c(fft2c(x)), x), rel_err(fft2c(ifft2c(x)), x))
        worst = max(worst, abs(np.linalg.norm(fft2c(x)) - np.linalg.norm(x)) / np.linalg.norm(x))
        xt = torch.from_numpy(x.astype(np.complex64))
        worst = max(worst, float(torch.linalg.norm(ifft2c_batch(fft2c_batch(xt)) - xt) / torch.linalg.norm(xt)))
    adj = 0.0
    gen = torch.Generator().manual_seed(0)
    for nc in (1, 2, 4, 8):
        for R in (1, 2, 4, 8):
            maps = make_sensitivities(nc, 16, 16, nc)
            fm = ForwardModel(maps, make_mask(16, R, min(2, math.ceil(16 / R)), R).tensor())
            x = torch.randn(16, 16, dtype=torch.complex64, generator=gen)
            y = torch.randn(nc, 16, 16, dtype=torch.complex64, generator=gen)
            lhs = torch.vdot(apply_A(fm, x).reshape(-1), y.reshape(-1))
            rhs = torch.vdot(x.reshape(-1), apply_Ah(fm, y).reshape(-1))
            adj = max(adj, float(abs(lhs - rhs) / abs(lhs)))
    ok = worst < 1e-6 and adj < 1e-5
    assert report(1, ok, time.perf_counter() - t0, 10, f"round-trip/Parseval {worst:.1e}, adjoint {adj:.1e}")


# -- 2. MC divergence -------------------------------------------------------------

def test_criterion_02_mc_divergence(report):
    t0 = time.perf_counter()
    gen = torch.Generator().manual_seed(5)
    z = torch.zeros(64, dtype=torch.float64)
    worst = 0.0
    for trial in range(3):
        M = torch.randn(64, 64, dtype=torch.float64, generator=gen) / 8 + trial * torch.eye(64, dtype=torch.float64)
        vals = mc_divergence(lambda v: v @ M.T, z, 1e-3, seed=trial, probes=10_000)
        worst = max(worst, float(abs(vals.mean() - torch.trace(M)) / (vals.std() / math.sqrt(len(vals)))))
    ident = mc_divergence(lambda v: v, z, 1e-3, seed=9, probes=10_000)
    z_ident = float(abs(ident.mean() - 64) / (ident.std() / math.sqrt(len(ident))))
    ok = worst < 3 and z_ident < 3
    assert report(2, ok, time.perf_counter() - t0, 30,
                  f"linear maps within {worst:.2f} SE of trace, identity mean {float(ident.mean()):.2f} ({z_ident:.2f} SE)")


# -- 3. GSURE unbiasedness --------------------------------------------------------

def test_criterion_03_gsure_unbiased(report):
    t0 = time.perf_counter()
    n, H, W, sigma2 = 10_000, 4, 4, 0.5
    rng = np.random.default_rng(31)
    x = torch.from_numpy(rng.standard_normal((H, W)) + 1j * rng.standard_normal((H, W)))
    noise = (rng.standard_normal((n, 1, H, W)) + 1j * rng.standard_normal((n, 1, H, W))) * np.sqrt(sigma2 / 2)
    maps = torch.ones(1, H, W, dtype=torch.complex128)
    fm = ForwardModel(maps, fully_sampled(maps))
    y = fft2c_batch(x[None, None].expand(n, 1, H, W)) + torch.from_numpy(noise)
    batch = make_batch(fm, y, torch.full((n,), sigma2, dtype=torch.float64))
    K = torch.from_numpy(rng.standard_normal((H * W, H * W)) * 0.15 + np.eye(H * W) * 0.5).to(torch.complex128)
    g1 = lambda u: 0.7 * sigma2 * u  # noqa: E731
    g2 = lambda u: (sigma2 * u.reshape(n, -1) @ K.T).reshape(u.shape)  # noqa: E731
    dg = gsure_loss(g1, batch, 1e-3, 1, reduction="none") - gsure_loss(g2, batch, 1e-3, 2, reduction="none")
    # the supervised loss carries a factor 1/2 that the GSURE expression does not
    ds = 2 * (supervised_loss(g1, batch, x, "none") - supervised_loss(g2, batch, x, "none"))
    diff = dg - ds
    z = float(abs(diff.mean()) / (diff.std() / math.sqrt(n)))
    assert report(3, z < 3, time.perf_counter() - t0, 60,
                  f"dGSURE - dSupervised = {float(diff.mean()):+.4f} ({z:.2f} SE, n={n})")


# -- 4. gradient checks -----------------------------------------------------------

def _fd_rel_err(fn, tensors, h=1e-6):
    """Relative error of autograd against central differences of scalar ``fn()``."""
    grads = torch.autograd.grad(fn(), tensors)
    num, den = 0.0, 0.0
    with torch.no_grad():
        for t, g in zip(tensors, grads):
            flat, gflat = t.view(-1), g.reshape(-1)
            for j in range(flat.numel()):
                old = flat[j].item()
                flat[j] = old + h
                plus = float(fn())
                flat[j] = old - h
                minus = float(fn())
                flat[j] = old
                fd = (plus - minus) / (2 * h)
                num += (float(gflat[j]) - fd) ** 2
                den += fd**2
    return math.sqrt(num / den)


def test_criterion_04_gradient_checks(report):
    t0 = time.perf_counter()
    gen = torch.Generator().manual_seed(4)
    d = torch.float64

    def rnd(*shape, grad=True):
        return torch.randn(*shape, dtype=d, generator=gen).requires_grad_(grad)

    errs = {}
    x, up = rnd(1, 3, 6, 6), rnd(1, 4, 6, 6, grad=False)
    w, b = rnd(4, 3, 3, 3), rnd(4)
    errs["conv"] = _fd_rel_err(lambda: (F.conv2d(x, w, b, padding=1) * up).sum(), [x, w, b])
    u = rnd(1, 4, 6, 6, grad=False)
    errs["silu"] = _fd_rel_err(lambda: (F.silu(x) * up[:, :3]).sum(), [x])
    errs["pool"] = _fd_rel_err(lambda: (F.avg_pool2d(x, 2) * u[:, :3, :3, :3]).sum(), [x])
    small = rnd(1, 3, 3, 3)
    errs["upsample"] = _fd_rel_err(lambda: (F.interpolate(small, scale_factor=2, mode="nearest") * up[:, :3]).sum(),
                                   [small])
    net = build_network(NetConfig(channels=(2, 3), seed=5)).double()
    xin, upn = rnd(1, 2, 4, 4), rnd(1, 2, 4, 4, grad=False)
    errs["network"] = _fd_rel_err(lambda: (net(xin) * upn).sum(), list(net.parameters()) + [xin])

    maps = make_sensitivities(2, 8, 8, 3).to(torch.complex128)
    fm = ForwardModel(maps, make_mask(8, 4, 2, 3).tensor(d))
    img = torch.randn(8, 8, dtype=torch.complex128, generator=gen)
    y = apply_A(fm, img)[None]
    model = ModlModel(ModlConfig(net=NetConfig(channels=(2, 4), seed=1), unrolls=1, cg_iters=2, cg_tol=0.0)).double()
    errs["modl"] = _fd_rel_err(lambda: modl_loss(model, y, fm, img[None]), list(model.parameters()))
    worst = max(errs.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    assert report(4, worst < 1e-5, time.perf_counter() - t0, 60, detail)


# -- 5. conjugate gradient --------------------------------------------------------

def test_criterion_05_cg_exactness(report):
    t0 = time.perf_counter()
    gen = torch.Generator().manual_seed(5)
    worst, iters_ok = 0.0, True
    for n in (2, 5, 9, 16, 64, 256):
        B = torch.randn(n, n, dtype=torch.complex128, generator=gen)
        M = B @ B.conj().T + n * torch.eye(n, dtype=torch.complex128)
        rhs = torch.randn(n, dtype=torch.complex128, generator=gen)
        x, info = cg_solve(lambda v: M @ v, rhs, iters=n, tol=1e-14)
        ref = torch.linalg.solve(M, rhs)
        worst = max(worst, float(torch.linalg.norm(x - ref) / torch.linalg.norm(ref)))
        iters_ok &= info.iterations <= n
    fm = ForwardModel(make_sensitivities(2, 16, 16, 0).to(torch.complex128), make_mask(16, 4, 2, 0).tensor())
    cols = [apply_A(fm, e.reshape(16, 16)).reshape(-1) for e in torch.eye(256, dtype=torch.complex128)]
    A = torch.stack(cols, dim=1)
    M = A.conj().T @ A + 0.05 * torch.eye(256, dtype=torch.complex128)
    rhs = torch.randn(16, 16, dtype=torch.complex128, generator=gen)
    x, info = cg_solve(lambda v: apply_Ah(fm, apply_A(fm, v)) + 0.05 * v, rhs, iters=256, tol=1e-14)
    ref = torch.linalg.solve(M, rhs.reshape(-1)).reshape(16, 16)
    worst = max(worst, float(torch.linalg.norm(x - ref) / torch.linalg.norm(ref)))
    iters_ok &= info.iterations <= 256
    ok = worst < 1e-8 and iters_ok
    assert report(5, ok, time.perf_counter() - t0, 10,
                  f"max rel err vs dense {worst:.1e}, 16x16 image system in {info.iterations} iterations")


# -- 6. Gaussian-prior diffusion oracle -------------------------------------------

def test_criterion_06_gaussian_prior_oracle(report):
    t0 = time.perf_counter()
    mu, tau2 = 1.0 + 0.5j, 0.25
    den = GaussianPriorDenoiser(torch.full((8, 8), mu, dtype=torch.complex128), tau2)
    sched = make_schedule(0.002, 80.0, 200, "edm")
    errs = []
    for stochastic in (False, True):
        x = sample_uncond(den, sched, (500, 8, 8), seed=0, stochastic=stochastic, dtype=torch.complex128)
        errs += [abs(float(x.real.mean()) - mu.real) / abs(mu.real), abs(float(x.imag.mean()) - mu.imag) / abs(mu.imag),
                 abs(float(x.real.var(dim=0).mean()) - tau2) / tau2, abs(float(x.imag.var(dim=0).mean()) - tau2) / tau2]
    maps = make_sensitivities(2, 8, 8, 0).to(torch.complex128)
    fm = ForwardModel(maps, fully_sampled(maps))
    x_true = 0.5 * torch.randn(8, 8, dtype=torch.complex128, generator=torch.Generator().manual_seed(0))
    prior = GaussianPriorDenoiser(torch.zeros(8, 8, dtype=torch.complex128), tau2)
    # noiseless fully sampled data: the conjugate posterior mean is the true image
    x = dps_reconstruct(prior, apply_A(fm, x_true), fm, DpsConfig(steps=500, gamma=0.3), seed=1)
    dps_err = float(torch.linalg.norm(x - x_true) / torch.linalg.norm(x_true))
    ok = max(errs) < 0.05 and dps_err < 0.05
    assert report(6, ok, time.perf_counter() - t0, 120,
                  f"worst moment rel err {max(errs):.3f}, DPS vs posterior mean {dps_err:.3f}")


# -- desk sweep (criteria 7-9) ----------------------------------------------------

@pytest.fixture(scope="session")
def desk_dir(tmp_path_factory):
    env = os.environ.get("GSURERECON_DESK_DIR")
    return Path(env) if env else tmp_path_factory.mktemp("desk") / "run"


@pytest.fixture(scope="session")
def stage1(desk_dir):
    """Datasets at every grid SNR plus one GSURE denoiser per SNR."""
    ini = str(CONFIGS / "desk_stage1.ini")
    t0 = time.perf_counter()
    assert main(["gen-data", "--config", ini, "--out", str(desk_dir)]) == 0
    assert main(["train", "--stage", "denoiser", "--config", ini, "--out", str(desk_dir)]) == 0
    return desk_dir, time.perf_counter() - t0


@pytest.fixture(scope="session")
def sweep(stage1):
    desk_dir, t_stage1 = stage1
    t0 = time.perf_counter()
    assert main(["run", "--config", str(CONFIGS / "desk.ini"), "--out", str(desk_dir)]) == 0
    return desk_dir, t_stage1 + time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_07_stage1_efficacy(report, stage1):
    desk_dir, seconds = stage1
    t0 = time.perf_counter()
    lay = Layout(desk_dir)
    cfg = load_config(CONFIGS / "desk_stage1.ini")
    gains, frac = {}, {}
    for snr in cfg.data.snr_grid:
        ckpt = load_denoiser(lay.denoiser(snr))
        v = DatasetManifest.read(lay.manifest("val", snr)).load_all()
        fm = ForwardModel(v["maps"], fully_sampled(v["maps"]), v["sigma2"])
        with torch.no_grad():
            den = denoise(ckpt, v["kspace"], fm)
        adj = apply_Ah(fm, v["kspace"])
        g = []
        for ref, a, e in zip(v["clean"], adj, den):
            m = anatomy_mask(ref)
            g.append(psnr(ref, e, m) - psnr(ref, a, m))
        gains[snr], frac[snr] = float(np.mean(g)), float(np.mean(np.array(g) > 0))
    seconds += time.perf_counter() - t0
    order = [gains[s] for s in sorted(gains)]  # ascending SNR
    monotone = all(a > b for a, b in zip(order, order[1:]))
    ok = frac[LOW_SNR] >= 0.9 and monotone
    detail = (f"{frac[LOW_SNR]:.0%} improved at {LOW_SNR:g} dB; mean gain "
              + ", ".join(f"{s:g} dB {gains[s]:+.2f}" for s in sorted(gains, reverse=True)))
    assert report(7, ok, seconds, 15 * 60, detail)


def _family_check(records, family, snr):
    _, a, b = paired_values(records, f"gsure-{family}", f"naive-{family}", "nrmse",
                            R=4.0, train_snr_db=snr, infer_snr_db=snr)
    return float(a.mean()), float(b.mean()), wilcoxon_signed_rank(a, b).p_value


@pytest.mark.slow
def test_criterion_08_main_claim_ordering(report, sweep):
    desk_dir, seconds = sweep
    records = read_metrics(desk_dir / "eval" / "metrics.csv")
    ok, parts = True, []
    for family in ("dps", "modl"):
        g, nv, p = _family_check(records, family, LOW_SNR)
        ok &= g < nv and p < 0.05
        parts.append(f"{family} {LOW_SNR:g} dB gsure {g:.3f} vs naive {nv:.3f} p={p:.1e}")
        g, nv, p = _family_check(records, family, HIGH_SNR)
        ok &= p >= 0.05 or g < nv
        parts.append(f"{family} {HIGH_SNR:g} dB gsure {g:.3f} vs naive {nv:.3f} p={p:.1e}")
    assert report(8, ok, seconds, 2 * 3600, "; ".join(parts))


@pytest.mark.slow
def test_criterion_09_posterior_averaging(report, sweep):
    desk_dir, _ = sweep
    curves = {}
    with open(desk_dir / "eval" / "averages.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["method"], row["R"], row["train_snr_db"], row["infer_snr_db"])
            curves.setdefault(key, []).append((int(row["n_averaged"]), float(row["mean_nrmse"])))
    ok, parts = bool(curves), []
    for key, pts in sorted(curves.items()):
        vals = [v for _, v in sorted(pts)]
        ok &= len(vals) == 5 and all(b <= a for a, b in zip(vals, vals[1:]))
        parts.append(f"{key[0]} {key[3]} dB {vals[0]:.3f}->{vals[-1]:.3f}")
    assert report(9, ok, 0.0, None, "; ".join(parts))


# -- 10. statistics oracle --------------------------------------------------------

def _brute_force_p(d):
    from itertools import product

    from scipy.stats import rankdata
    d = d[d != 0]
    ranks = rankdata(np.abs(d))
    t_obs = ranks[d > 0].sum()
    sums = np.array([ranks[np.array(s, dtype=bool)].sum() for s in product([0, 1], repeat=len(d))])
    return min(1.0, 2 * min(np.sum(sums <= t_obs + 1e-9), np.sum(sums >= t_obs - 1e-9)) / len(sums))


def test_criterion_10_statistics_oracle(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(10)
    worst, cases = 0.0, 0
    for n in range(5, 11):
        for trial in range(10):
            d = rng.integers(-4, 5, n).astype(float) if trial % 2 else rng.standard_normal(n) + 0.1 * trial
            if np.count_nonzero(d) < 5:
                continue
            worst = max(worst, abs(wilcoxon_signed_rank(d, np.zeros(n)).p_value - _brute_force_p(d)))
            cases += 1
    bonf = (bonferroni([0.049]) == [True] and bonferroni([0.051]) == [False]
            and bonferroni([0.0006] + [0.5] * 71)[0] and not bonferroni([0.0007] + [0.5] * 71)[0])
    ok = worst < 1e-12 and bonf
    assert report(10, ok, time.perf_counter() - t0, 5,
                  f"{cases} exact cases, max |p - brute force| {worst:.1e}, Bonferroni m=1/72 {'ok' if bonf else 'wrong'}")


# -- 11. determinism --------------------------------------------------------------



def test_criterion_11_determinism(report, tmp_path):
    t0 = time.perf_counter()
    ini = str(CONFIGS / "tiny.ini")
    for run in ("a", "b"):
        assert main(["run", "--config", ini, "--out", str(tmp_path / run)]) == 0
    names = ("metrics.csv", "stats.csv", "summary.csv", "averages.csv")
    same = [(tmp_path / "a" / "eval" / n).read_bytes() == (tmp_path / "b" / "eval" / n).read_bytes() for n in names]
    assert report(11, all(same), time.perf_counter() - t0, None,
                  f"two full pipeline runs, byte-identical {sum(same)}/{len(names)} CSVs")
