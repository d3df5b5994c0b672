"""Report figures rendered next to the CSV outputs of ``evaluate``."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .tensorcore import load_tensor  # noqa: E402

STYLE = {
    "naive-dps": dict(color="tab:orange", ls="--", marker="o"),
    "gsure-dps": dict(color="tab:blue", ls="-", marker="o"),
    "naive-modl": dict(color="tab:red", ls="--", marker="s"),
    "gsure-modl": dict(color="tab:green", ls="-", marker="s"),
}
DIFF_BRIGHTNESS = 2.5


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_nrmse_vs_snr(rows, path: Path) -> Path:
    """Mean NRMSE against inference SNR, one panel per R, matched train/infer SNR."""
    Rs = sorted({r["R"] for r in rows})
    fig, axes = plt.subplots(1, len(Rs), figsize=(4.2 * len(Rs), 3.4), squeeze=False)
    for ax, R in zip(axes[0], Rs):
        series = defaultdict(list)
        for r in rows:
            if r["R"] == R and r["train_snr_db"] == r["infer_snr_db"]:
                series[r["method"]].append((r["infer_snr_db"], r["nrmse_mean"], r["nrmse_std"]))
        for method, pts in sorted(series.items()):
            pts.sort()
            x, y, e = map(np.array, zip(*pts))
            ax.errorbar(x, y, yerr=e, capsize=3, label=method, **STYLE.get(method, {}))
        ax.set_title(f"R = {R:g}")
        ax.set_xlabel("SNR [dB]")
        ax.set_ylabel("NRMSE")
        ax.grid(alpha=0.3)
    axes[0][0].legend(frameon=False, fontsize=8)
    return _save(fig, path)


def plot_averages(curves, path: Path) -> Path:
    """Mean NRMSE against the number of averaged posterior samples."""
    fig, ax = plt.subplots(figsize=(4.6, 3.4))
    series = defaultdict(list)
    for method, R, tr, inf, k, value in curves:
        if tr == inf:
            series[(method, R, inf)].append((int(k), float(value)))
    for (method, R, inf), pts in sorted(series.items()):
        k, v = zip(*sorted(pts))
        style = dict(STYLE.get(method, {}))
        ax.plot(k, v, label=f"{method} R={R} {inf} dB", **style)
    ax.set_xlabel("averaged samples")
    ax.set_ylabel("NRMSE")
    ax.xaxis.get_major_locator().set_params(integer=True)
    ax.grid(alpha=0.3)
    ax.legend(frameon=False, fontsize=6)
    return _save(fig, path)


def plot_pvalues(stats, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(max(4.0, 0.18 * len(stats)), 3.2))
    p = np.array([max(s.p, 1e-300) for s in stats])
    colors = ["tab:green" if s.significant else "tab:gray" for s in stats]
    ax.bar(np.arange(len(stats)), -np.log10(p), color=colors)
    if stats:
        ax.axhline(-np.log10(0.05 / len(stats)), color="k", lw=0.8, ls="--")
    ax.set_xticks(np.arange(len(stats)))
    ax.set_xticklabels([s.comparison for s in stats], rotation=90, fontsize=5)
    ax.set_ylabel("-log10 p")
    return _save(fig, path)


def plot_gallery(ref, recons: dict, path: Path, brightness: float = DIFF_BRIGHTNESS) -> Path:
    """Reference and reconstructions (top) with scaled difference images (bottom)."""
    n = len(recons) + 1
    scale = np.percentile(np.abs(ref), 99) or 1.0
    fig, axes = plt.subplots(2, n, figsize=(1.9 * n, 3.9))
    axes[0, 0].imshow(np.abs(ref) / scale, cmap="gray", vmin=0, vmax=1)
    axes[0, 0].set_title("reference", fontsize=8)
    axes[1, 0].axis("off")
    for j, (name, img) in enumerate(recons.items(), 1):
        axes[0, j].imshow(np.abs(img) / scale, cmap="gray", vmin=0, vmax=1)
        axes[0, j].set_title(name, fontsize=8)
        axes[1, j].imshow(np.clip(brightness * np.abs(img - ref) / scale, 0, 1), cmap="gray", vmin=0, vmax=1)
    for ax in axes.ravel():
        ax.set_xticks([])
        ax.set_yticks([])
    return _save(fig, path)


def render_all(eval_dir: Path, rows, curves, stats, refs, cells, log=print) -> list[Path]:
    fig_dir = Path(eval_dir) / "figures"
    out = [plot_nrmse_vs_snr(rows, fig_dir / "nrmse_vs_snr.png")]
    if curves:
        out.append(plot_averages(curves, fig_dir / "averages.png"))
    if stats:
        out.append(plot_pvalues(stats, fig_dir / "pvalues.png"))
    sid = sorted(refs)[0]
    lowest = min(c[3] for c in cells)
    R0 = min(c[1] for c in cells)
    recons = {}
    for method, R, tr, inf, path, _ in cells:
        if R == R0 and tr == inf == lowest:
            name = f"{sid}.cxt" if method.endswith("modl") else f"{sid}_avg.cxt"
            recons[method] = load_tensor(Path(path) / name)
    if recons:
        out.append(plot_gallery(refs[sid][0], recons, fig_dir / f"gallery_R{R0:g}_snr{lowest:g}.png"))
    log(f"wrote {len(out)} figures to {fig_dir}")
    return out
