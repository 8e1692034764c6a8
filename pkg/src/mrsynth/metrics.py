"""Image-quality and agreement metrics.

PSNR and SSIM operate on intensities normalised to [0, 1]. The default
rule anchors on the ground truth: both volumes are clipped to the 0.5
and 99.5 percentiles of ``gt`` and min-max scaled with those bounds.
SSIM is the standard windowed form and can be negative for
anti-correlated structure; it is not clamped.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

NORMALIZATION_RULES = ("percentile_995", "minmax", "none")
PSNR_CAP_DB = 100.0
SSIM_WINDOW = 7
SSIM_SIGMA = 1.5


@dataclass(frozen=True)
class BootstrapSpec:
    n_boot: int = 100
    fraction: float = 0.7
    seed: int = 0
    ci_level: float = 0.95

    def __post_init__(self):
        if not 0 < self.fraction <= 1:
            raise ValueError("fraction must lie in (0, 1]")
        if self.n_boot < 1 or not 0 < self.ci_level < 1:
            raise ValueError("need n_boot >= 1 and ci_level in (0, 1)")

    def subsample_size(self, n: int) -> int:
        return max(1, int(round(self.fraction * n)))

    def percentiles(self) -> tuple[float, float]:
        tail = 100 * (1 - self.ci_level) / 2
        return tail, 100 - tail


def _pair(pred, gt):
    pred = np.asarray(getattr(pred, "data", pred), dtype=np.float64)
    gt = np.asarray(getattr(gt, "data", gt), dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def normalize_pair(pred, gt, rule: str = "percentile_995"):
    pred, gt = _pair(pred, gt)
    if rule == "none":
        return pred, gt
    if rule == "percentile_995":
        lo, hi = np.percentile(gt, [0.5, 99.5])
    elif rule == "minmax":
        lo = min(pred.min(), gt.min())
        hi = max(pred.max(), gt.max())
    else:
        raise ValueError(f"unknown normalization rule {rule!r}; expected {NORMALIZATION_RULES}")
    if not hi > lo:
        raise ValueError("reference volume has zero dynamic range")
    scale = lambda x: (np.clip(x, lo, hi) - lo) / (hi - lo)  # noqa: E731
    return scale(pred), scale(gt)


def psnr(pred, gt, rule: str = "percentile_995") -> float:
    """PSNR in dB with unit peak; identical inputs return the 100 dB cap."""
    p, g = normalize_pair(pred, gt, rule)
    mse = float(np.mean((p - g) ** 2))
    if mse == 0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def gaussian_window_1d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


def _valid_filter(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    r = len(w) // 2
    for axis in range(x.ndim):
        x = ndimage.correlate1d(x, w, axis=axis, mode="constant")
    return x[tuple(slice(r, n - r) for n in x.shape)]


def ssim(pred, gt, rule: str = "percentile_995", data_range: float = 1.0) -> float:
    """Mean SSIM over all fully-contained 7x7x7 Gaussian windows."""
    p, g = normalize_pair(pred, gt, rule)
    if min(p.shape) < SSIM_WINDOW:
        raise ValueError(f"volume {p.shape} smaller than the {SSIM_WINDOW}^3 window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    w = gaussian_window_1d()
    mu_p, mu_g = _valid_filter(p, w), _valid_filter(g, w)
    var_p = _valid_filter(p * p, w) - mu_p**2
    var_g = _valid_filter(g * g, w) - mu_g**2
    cov = _valid_filter(p * g, w) - mu_p * mu_g
    s = ((2 * mu_p * mu_g + c1) * (2 * cov + c2)) / ((mu_p**2 + mu_g**2 + c1) * (var_p + var_g + c2))
    return float(s.mean())


def dice(a, b) -> float:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def pearson(x, y) -> float:
    x, y = np.asarray(x, dtype=np.float64).ravel(), np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape or x.size < 2:
        raise ValueError("need two sequences of equal length >= 2")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise ValueError("pearson undefined for zero variance")
    return float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))


def _icc21(r: np.ndarray) -> float:
    n, k = r.shape
    grand = r.mean()
    ss_rows = k * ((r.mean(axis=1) - grand) ** 2).sum()
    ss_cols = n * ((r.mean(axis=0) - grand) ** 2).sum()
    ss_err = ((r - grand) ** 2).sum() - ss_rows - ss_cols
    msr = ss_rows / (n - 1)
    msc = ss_cols / (k - 1)
    mse = ss_err / ((n - 1) * (k - 1))
    denom = msr + (k - 1) * mse + k * (msc - mse) / n
    if denom == 0:
        return math.nan
    return float((msr - mse) / denom)


@dataclass(frozen=True)
class Estimate:
    value: float
    ci_lo: float
    ci_hi: float
    n_defined: int = 0  # resamples that entered the percentile pool


def _subsample_stat(n: int, spec: BootstrapSpec, stat) -> list[float]:
    rng = np.random.default_rng(spec.seed)
    m = spec.subsample_size(n)
    out = []
    for _ in range(spec.n_boot):
        out.append(stat(rng.choice(n, size=m, replace=False)))
    return out


def _ci(values: list[float], spec: BootstrapSpec) -> tuple[float, float, int]:
    v = np.array([x for x in values if not math.isnan(x)])
    if v.size == 0:
        return math.nan, math.nan, 0
    lo, hi = np.percentile(v, spec.percentiles())
    return float(lo), float(hi), int(v.size)


def icc(ratings, spec: BootstrapSpec = BootstrapSpec()) -> Estimate:
    """ICC(2,1): two-way random effects, absolute agreement, single rater."""
    r = np.asarray(ratings, dtype=np.float64)
    if r.ndim != 2 or r.shape[1] != 2:
        raise ValueError("ratings must be an n x 2 matrix")
    if r.shape[0] < 3:
        raise ValueError("icc needs at least 3 rows")
    if np.all(r == r.flat[0]):
        raise ValueError("degenerate ratings: all values equal")
    value = _icc21(r)
    boots = _subsample_stat(len(r), spec, lambda idx: _icc21(r[idx]) if len(idx) >= 3 else math.nan)
    lo, hi, k = _ci(boots, spec)
    return Estimate(value, lo, hi, k)


def f1_per_class(pred, true, classes) -> dict:
    """One-vs-rest F1 = 2TP / (2TP + FP + FN); NaN where the class never occurs."""
    pred, true = np.asarray(pred), np.asarray(true)
    out = {}
    for c in classes:
        tp = int(np.sum((pred == c) & (true == c)))
        fp = int(np.sum((pred == c) & (true != c)))
        fn = int(np.sum((pred != c) & (true == c)))
        denom = 2 * tp + fp + fn
        out[c] = 2 * tp / denom if denom else math.nan
    return out


def f1_bootstrap(pred_labels, true_labels, classes, spec: BootstrapSpec = BootstrapSpec()) -> dict:
    """Per-class F1 on the full set with a subsampling percentile CI.

    Each of ``spec.n_boot`` resamples draws ``fraction`` of the cases
    without replacement. A class absent from a resample (both as truth
    and as prediction) contributes no value to that resample's pool.
    """
    pred, true = np.asarray(pred_labels), np.asarray(true_labels)
    if pred.size == 0:
        raise ValueError("empty input")
    if pred.shape != true.shape:
        raise ValueError("prediction and truth lengths differ")
    unknown = (set(pred.tolist()) | set(true.tolist())) - set(classes)
    if unknown:
        raise ValueError(f"labels outside classes: {sorted(unknown, key=repr)}")
    full = f1_per_class(pred, true, classes)
    boots = _subsample_stat(len(pred), spec, lambda idx: f1_per_class(pred[idx], true[idx], classes))
    out = {}
    for c in classes:
        lo, hi, k = _ci([b[c] for b in boots], spec)
        out[c] = Estimate(full[c], lo, hi, k)
    return out


REPORT_FIELDS = ("case_id", "metric", "value", "ci_lo", "ci_hi", "normalization", "seed")


def write_report(path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row.get(k, "")) for k in REPORT_FIELDS})


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def read_report(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def summarize(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"mean": float(v.mean()), "median": float(med), "q1": float(q1), "q3": float(q3),
            "n": int(v.size)}
