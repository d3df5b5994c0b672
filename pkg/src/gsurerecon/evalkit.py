"""Masked image-quality metrics, paired statistics and report tables."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import ContractError, DegenerateInputError, ShapeError, StatisticsError

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03
EXACT_MAX_N = 25


def _np(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x)


def _prepare(ref, est, mask):
    ref, est = _np(ref), _np(est)
    if ref.shape != est.shape or ref.ndim != 2:
        raise ShapeError(f"expected two images of equal 2D shape, got {ref.shape} and {est.shape}")
    if mask is None:
        mask = np.ones(ref.shape, dtype=bool)
    mask = _np(mask).astype(bool)
    if mask.shape != ref.shape:
        raise ShapeError(f"mask shape {mask.shape} != image shape {ref.shape}")
    if not mask.any():
        raise DegenerateInputError("anatomy mask is empty")
    return ref.astype(np.complex128), est.astype(np.complex128), mask


# -- mask -------------------------------------------------------------------------

def anatomy_mask(reference, threshold: float = 0.1, percentile: float = 99.0) -> np.ndarray:
    """``|ref| > threshold * P99(|ref|)`` followed by a 3x3 majority vote."""
    mag = np.abs(_np(reference)).astype(np.float64)
    if mag.ndim != 2:
        raise ShapeError(f"reference must be 2D, got shape {mag.shape}")
    if not np.isfinite(mag).all():
        raise DegenerateInputError("reference image contains non-finite values")
    level = np.percentile(mag, percentile)
    if not level > 0:
        raise DegenerateInputError("reference image is identically zero")
    raw = (mag > threshold * level).astype(np.int64)
    padded = np.pad(raw, 1, mode="edge")
    votes = sum(padded[i:i + raw.shape[0], j:j + raw.shape[1]] for i in range(3) for j in range(3))
    return votes >= 5


# -- metrics ----------------------------------------------------------------------

def nrmse(ref, est, mask=None) -> float:
    """Complex-valued ``||m*(ref - est)|| / ||m*ref||``."""
    ref, est, mask = _prepare(ref, est, mask)
    den = np.linalg.norm(ref[mask])
    if den == 0:
        raise DegenerateInputError("reference has zero norm inside the mask")
    return float(np.linalg.norm((ref - est)[mask]) / den)


def psnr(ref, est, mask=None) -> float:
    """Magnitude PSNR with the masked reference maximum as peak; capped at 99 dB."""
    ref, est, mask = _prepare(ref, est, mask)
    a, b = np.abs(ref)[mask], np.abs(est)[mask]
    peak = a.max()
    if peak == 0:
        raise DegenerateInputError("reference has zero norm inside the mask")
    rmse = math.sqrt(np.mean((a - b) ** 2))
    if rmse == 0:
        return PSNR_CAP_DB
    return float(min(PSNR_CAP_DB, 20.0 * math.log10(peak / rmse)))


def ssim(ref, est, mask=None, data_range: float | None = None) -> float:
    """Mean local SSIM of magnitude images over the mask.

    Local statistics use a 7x7 uniform window (reflected borders) and
    population variances. The dynamic range defaults to the masked
    reference maximum.
    """
    ref, est, mask = _prepare(ref, est, mask)
    x, y = np.abs(ref), np.abs(est)
    L = float(x[mask].max()) if data_range is None else float(data_range)
    if not L > 0:
        raise DegenerateInputError("reference has zero norm inside the mask")
    c1, c2 = (SSIM_K1 * L) ** 2, (SSIM_K2 * L) ** 2

    def filt(img):
        return uniform_filter(img, size=SSIM_WINDOW, mode="reflect")

    mx, my = filt(x), filt(y)
    vx = filt(x * x) - mx * mx
    vy = filt(y * y) - my * my
    cxy = filt(x * y) - mx * my
    smap = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
    return float(np.clip(smap[mask].mean(), -1.0, 1.0))


# -- statistics -------------------------------------------------------------------

@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float  # min(T+, T-)
    p_value: float
    n: int            # nonzero differences used
    method: str       # "exact" or "normal"


def _ranks(values: np.ndarray) -> np.ndarray:
    """Average ranks (1-based) with ties sharing the mean rank."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _exact_counts(doubled: Sequence[int]) -> np.ndarray:
    """Number of sign patterns giving each doubled positive-rank sum."""
    total = int(sum(doubled))
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(a, b) -> WilcoxonResult:
    """Two-sided paired signed-rank test; zero differences are dropped.

    Exact null distribution (ties handled through the actual mid-ranks) for
    up to 25 nonzero differences, otherwise the tie-corrected normal
    approximation without continuity correction.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise StatisticsError(f"paired samples must be 1D and equal length, got {a.shape} and {b.shape}")
    d = a - b
    if not np.isfinite(d).all():
        raise StatisticsError("paired samples contain non-finite values")
    d = d[d != 0]
    n = d.size
    if n < 5:
        raise StatisticsError(f"need at least 5 nonzero paired differences, got {n}")
    ranks = _ranks(np.abs(d))
    t_plus = float(ranks[d > 0].sum())
    t_minus = float(ranks[d < 0].sum())
    stat = min(t_plus, t_minus)
    if n <= EXACT_MAX_N:
        doubled = [int(round(2 * r)) for r in ranks]
        counts = _exact_counts(doubled)
        t2 = int(round(2 * t_plus))
        total = 2**n
        lower = int(sum(counts[: t2 + 1]))
        upper = int(sum(counts[t2:]))
        p = 2.0 * min(lower, upper) / total
        method = "exact"
    else:
        _, tie_sizes = np.unique(np.abs(d), return_counts=True)
        mean = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0 - float((tie_sizes**3 - tie_sizes).sum()) / 48.0
        if not var > 0:
            raise StatisticsError("degenerate variance in the signed-rank statistic")
        z = (t_plus - mean) / math.sqrt(var)
        p = math.erfc(abs(z) / math.sqrt(2.0))
        method = "normal"
    return WilcoxonResult(statistic=stat, p_value=float(min(1.0, p)), n=n, method=method)


def bonferroni(p_values: Sequence[float], alpha: float = 0.05) -> list[bool]:
    """Flag ``p < alpha / m`` with ``m`` the family size."""
    p = list(p_values)
    if not p:
        raise ContractError("Bonferroni correction needs at least one p-value")
    threshold = alpha / len(p)
    return [float(v) < threshold for v in p]


# -- records ----------------------------------------------------------------------

METRIC_COLUMNS = ("id", "method", "train_snr_db", "infer_snr_db", "R", "seed", "nrmse", "ssim", "psnr")
STAT_COLUMNS = ("comparison", "n", "statistic", "p", "significant")


@dataclass(frozen=True)
class MetricsRecord:
    id: str
    method: str
    train_snr_db: float
    infer_snr_db: float
    R: float
    seed: int
    nrmse: float
    ssim: float
    psnr: float

    def __post_init__(self):
        for name in ("nrmse", "ssim", "psnr"):
            if not math.isfinite(getattr(self, name)):
                raise ContractError(f"{name} must be finite for sample {self.id}")
        if self.nrmse < 0:
            raise ContractError(f"negative NRMSE for sample {self.id}")
        if not -1.0 <= self.ssim <= 1.0:
            raise ContractError(f"SSIM outside [-1, 1] for sample {self.id}")


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_metrics(path, records: Iterable[MetricsRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in records:
            w.writerow([_fmt(getattr(r, c)) for c in METRIC_COLUMNS])
    return path


def read_metrics(path) -> list[MetricsRecord]:
    types = {f.name: f.type for f in fields(MetricsRecord)}
    casts = {"str": str, "float": float, "int": int}
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(MetricsRecord(**{k: casts[types[k]](row[k]) for k in METRIC_COLUMNS}))
    return out


@dataclass(frozen=True)
class StatRecord:
    comparison: str
    n: int
    statistic: float
    p: float
    significant: bool


def write_stats(path, records: Iterable[StatRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STAT_COLUMNS)
        for r in records:
            w.writerow([r.comparison, r.n, repr(float(r.statistic)), repr(float(r.p)), int(r.significant)])
    return path


def read_stats(path) -> list[StatRecord]:
    with open(path, newline="") as fh:
        return [StatRecord(r["comparison"], int(r["n"]), float(r["statistic"]), float(r["p"]),
                           bool(int(r["significant"]))) for r in csv.DictReader(fh)]


# -- aggregation ------------------------------------------------------------------

SUMMARY_COLUMNS = ("method", "R", "train_snr_db", "infer_snr_db", "n",
                   "nrmse_mean", "nrmse_std", "ssim_mean", "ssim_std", "psnr_mean", "psnr_std", "best")


def _cell_key(r: MetricsRecord):
    return (r.R, r.train_snr_db, r.infer_snr_db)


def summarize(records: Sequence[MetricsRecord]) -> list[dict]:
    """Mean and std per (method, R, train SNR, infer SNR).

    ``best`` marks the lowest mean NRMSE among methods sharing the same
    (R, train SNR, infer SNR) cell.
    """
    groups: dict[tuple, list[MetricsRecord]] = defaultdict(list)
    for r in records:
        groups[(r.method,) + _cell_key(r)].append(r)
    rows = []
    for (method, R, tr, inf), rs in sorted(groups.items(), key=lambda kv: (kv[0][1], -kv[0][2], -kv[0][3], kv[0][0])):
        row = {"method": method, "R": R, "train_snr_db": tr, "infer_snr_db": inf, "n": len(rs)}
        for m in ("nrmse", "ssim", "psnr"):
            vals = np.array([getattr(x, m) for x in rs])
            row[f"{m}_mean"] = float(vals.mean())
            row[f"{m}_std"] = float(vals.std())
        rows.append(row)
    best: dict[tuple, float] = {}
    for row in rows:
        key = (row["R"], row["train_snr_db"], row["infer_snr_db"])
        best[key] = min(best.get(key, math.inf), row["nrmse_mean"])
    for row in rows:
        row["best"] = int(row["nrmse_mean"] == best[(row["R"], row["train_snr_db"], row["infer_snr_db"])])
    return rows


def write_summary(path, rows: Sequence[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in SUMMARY_COLUMNS])
    return path


def render_summary(rows: Sequence[dict]) -> str:
    """Aligned plain-text table; the best method per cell is starred."""
    header = ["method", "R", "train dB", "infer dB", "n", "NRMSE", "SSIM", "PSNR"]
    body = []
    for row in rows:
        star = "*" if row["best"] else " "
        body.append([
            row["method"], f"{row['R']:g}", f"{row['train_snr_db']:g}", f"{row['infer_snr_db']:g}", str(row["n"]),
            f"{row['nrmse_mean']:.4f}±{row['nrmse_std']:.4f}{star}",
            f"{row['ssim_mean']:.4f}±{row['ssim_std']:.4f}",
            f"{row['psnr_mean']:.2f}±{row['psnr_std']:.2f}",
        ])
    widths = [max(len(h), *(len(r[i]) for r in body)) if body else len(h) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in body]
    return "\n".join(lines) + "\n"


def paired_values(records: Sequence[MetricsRecord], method_a: str, method_b: str, metric: str = "nrmse",
                  **cell) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Aligned metric vectors for two methods within one cell.

    Raises a statistics error listing ids present for only one method.
    """
    def pick(method):
        return {r.id: getattr(r, metric) for r in records
                if r.method == method and all(getattr(r, k) == v for k, v in cell.items())}

    va, vb = pick(method_a), pick(method_b)
    missing = sorted(set(va) ^ set(vb))
    if missing:
        raise StatisticsError(f"unpaired samples for {method_a} vs {method_b}: {', '.join(missing)}")
    ids = sorted(va)
    return ids, np.array([va[i] for i in ids]), np.array([vb[i] for i in ids])

