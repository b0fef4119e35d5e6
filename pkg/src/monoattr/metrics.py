"""Explanation quality metrics, weighted aggregation and paired statistics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from . import autodiff as ad
from .autodiff import Tensor


class UndefinedMetricError(ValueError):
    pass


class EmptyNeighborhoodError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class DegenerateTestError(ValueError):
    pass


# -- sparseness -----------------------------------------------------------------


def gini_index(v: np.ndarray) -> float:
    """Gini index of a non-negative vector (0 = uniform, 1 - 1/d = one-hot)."""
    v = np.sort(np.asarray(v, dtype=np.float64).reshape(-1))
    total = v.sum()
    if total <= 0:
        raise UndefinedMetricError("Gini index is undefined for an all-zero vector")
    d = v.size
    k = np.arange(1, d + 1)
    return float(1.0 - 2.0 * np.sum((v / total) * ((d - k + 0.5) / d)))


def gini_sparseness(phi) -> float:
    return gini_index(np.abs(np.asarray(phi, dtype=np.float64)))


def gini_sparseness_tensor(phi: Tensor, mask: np.ndarray | None = None, eps: float = 1e-12) -> Tensor:
    """Differentiable Gini sparseness per row of (B, T), sort order held fixed.

    With ``mask`` only the selected positions of each row count.
    """
    phi = ad._lift(phi)
    rows = ad.reshape(phi, (-1, phi.shape[-1]))
    masks = None if mask is None else np.broadcast_to(np.asarray(mask, bool), phi.shape).reshape(rows.shape)
    out = []
    for r in range(rows.shape[0]):
        idx = np.arange(rows.shape[1]) if masks is None else np.flatnonzero(masks[r])
        v = ad.abs_(ad.take(rows[r], idx))
        order = np.argsort(v.data, kind="stable")
        sv = ad.take(v, order)
        d = len(idx)
        weights = (d - np.arange(1, d + 1) + 0.5) / d
        out.append(1.0 - 2.0 * ad.sum_(sv * weights) / (ad.sum_(sv) + eps))
    return ad.reshape(ad.stack(out), phi.shape[:-1])


# -- stability ------------------------------------------------------------------


@dataclass
class StabilityConfig:
    p: float = 2.0
    n_perturbations: int = 16
    sigma: float | None = None  # None -> 0.05 * ||x|| / sqrt(dim)
    seed: int = 0
    eps: float = 1e-8
    scales: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        if self.n_perturbations < 1:
            raise ConfigError("n_perturbations must be >= 1")
        if self.sigma is not None and self.sigma <= 0:
            raise ConfigError("sigma must be > 0")
        if self.eps <= 0:
            raise ConfigError("eps must be > 0")


@dataclass
class StabilityResult:
    value: float
    n_retained: int
    flags: tuple[str, ...] = ()

    def __float__(self) -> float:
        return self.value


def _norm(v, p: float) -> float:
    return float(np.linalg.norm(np.asarray(v, dtype=np.float64).reshape(-1), ord=p))


def noise_scale(x: np.ndarray, config: StabilityConfig) -> float:
    if config.sigma is not None:
        return config.sigma
    x = np.asarray(x, dtype=np.float64)
    return max(0.05 * _norm(x, 2) / math.sqrt(x.size), 1e-12)


def neighborhood(x: np.ndarray, config: StabilityConfig) -> np.ndarray:
    """Gaussian perturbations of x, one block of draws per scale (same base noise)."""
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(config.seed)
    base = rng.standard_normal((config.n_perturbations,) + x.shape)
    sigma = noise_scale(x, config)
    return np.concatenate([x + s * sigma * base for s in config.scales])


def stability_from_draws(phi, phi_draws, deltas, scale: float, config: StabilityConfig) -> StabilityResult:
    """scale / ||phi|| * max_j ||phi - phi_j|| / delta_j over precomputed class-preserving draws."""
    p, eps = config.p, config.eps
    phi = np.asarray(phi, dtype=np.float64)
    if len(phi_draws) == 0:
        raise EmptyNeighborhoodError("no perturbation preserves the predicted class")
    flags: list[str] = []
    best = 0.0
    for phi_j, den in zip(phi_draws, deltas):
        num = _norm(phi - np.asarray(phi_j, dtype=np.float64), p)
        if den < eps:
            flags.append("denominator_guard")
            den = eps
        best = max(best, num / den)
    phi_norm = _norm(phi, p)
    if phi_norm < eps:
        flags.append("attribution_norm_guard")
        phi_norm = eps
    return StabilityResult(scale / phi_norm * best, len(phi_draws), tuple(sorted(set(flags))))


def _stability(x, attr_fn, prob_fn, config: StabilityConfig, output_space: bool) -> StabilityResult:
    x = np.asarray(x, dtype=np.float64)
    p = config.p
    fx = np.asarray(prob_fn(x), dtype=np.float64)
    y = int(np.argmax(fx))
    phi_draws, deltas = [], []
    for xp in neighborhood(x, config):
        fxp = np.asarray(prob_fn(xp), dtype=np.float64)
        if int(np.argmax(fxp)) != y:
            continue
        phi_draws.append(attr_fn(xp))
        deltas.append(_norm(fx - fxp, p) if output_space else _norm(x - xp, p))
    scale = _norm(fx, p) if output_space else _norm(x, p)
    return stability_from_draws(attr_fn(x), phi_draws, deltas, scale, config)


def ris(x, attr_fn: Callable, prob_fn: Callable, config: StabilityConfig | None = None) -> StabilityResult:
    """Relative input stability of ``attr_fn`` around representation ``x``."""
    return _stability(x, attr_fn, prob_fn, config or StabilityConfig(), output_space=False)


def ros(x, attr_fn: Callable, prob_fn: Callable, config: StabilityConfig | None = None) -> StabilityResult:
    """Relative output stability; ``prob_fn`` returns the class-probability vector."""
    return _stability(x, attr_fn, prob_fn, config or StabilityConfig(), output_space=True)


# -- aggregation ----------------------------------------------------------------


def minmax(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    lo, hi = v.min(axis=-1, keepdims=True), v.max(axis=-1, keepdims=True)
    span = hi - lo
    return np.where(span > 0, (v - lo) / np.where(span > 0, span, 1.0), 0.0)


def maxabs(v: np.ndarray) -> np.ndarray:
    """Scale into [-1, 1] by the largest magnitude, keeping signs and zeros."""
    v = np.asarray(v, dtype=np.float64)
    top = np.abs(v).max(axis=-1, keepdims=True)
    return np.where(top > 0, v / np.where(top > 0, top, 1.0), 0.0)


NORMALIZERS = {"minmax": minmax, "maxabs": maxabs, "none": lambda v: np.asarray(v, dtype=np.float64)}


def aggregate_weighted(phis: Sequence, weights: Sequence[float], signs: Sequence[float] | None = None,
                       names: Sequence[str] | None = None, normalize: str = "minmax") -> np.ndarray:
    """Weighted sum of per-method vectors after per-method normalisation.

    ``normalize`` is minmax (default), maxabs or none; ``signs`` flips a
    method before normalisation.  Terms are summed in a canonical order so
    permuting (method, weight) pairs is bit-exact.
    """
    if normalize not in NORMALIZERS:
        raise ConfigError(f"unknown normalisation {normalize!r}")
    phis = [np.asarray(p, dtype=np.float64) for p in phis]
    w = np.asarray(weights, dtype=np.float64)
    if len(phis) != len(w) or not phis:
        raise ConfigError("need one weight per attribution vector")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ConfigError("weights must lie on the probability simplex")
    if any(p.shape != phis[0].shape for p in phis):
        raise ConfigError("attribution vectors differ in length")
    signs = np.ones(len(phis)) if signs is None else np.asarray(signs, dtype=np.float64)
    rows = [NORMALIZERS[normalize](s * p) for s, p in zip(signs, phis)]
    keys = [((names[i] if names else ""), float(w[i]), rows[i].tobytes()) for i in range(len(rows))]
    out = np.zeros_like(rows[0])
    for i in sorted(range(len(rows)), key=lambda i: keys[i]):
        out = out + w[i] * rows[i]
    return out


def rank_composite_weights(ris_values, ros_values, sparseness_values) -> np.ndarray:
    """Inverse-rank composite: low RIS, low ROS and high sparseness rank first."""
    def inv_rank(v, ascending=True):
        r = stats.rankdata(v if ascending else -np.asarray(v), method="average")
        return 1.0 / r

    score = (inv_rank(ris_values) + inv_rank(ros_values) + inv_rank(sparseness_values, False)) / 3
    return score / score.sum()


# -- statistics -----------------------------------------------------------------


@dataclass
class PairedResult:
    t_stat: float
    t_p: float
    wilcoxon_W: float
    wilcoxon_p: float
    n: int
    exact: bool
    flags: tuple[str, ...] = ()


def _signed_rank_exact_cdf(ranks2: np.ndarray, w2: int) -> float:
    """P(W+ <= w) under H0 by dynamic programming on doubled (integer) ranks."""
    total = int(ranks2.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in ranks2.astype(int):
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    return float(counts[: w2 + 1].sum() / counts.sum())


def wilcoxon_signed_rank(diffs) -> tuple[float, float, bool]:
    """Two-sided signed-rank test on non-zero differences: (W, p, exact)."""
    d = np.asarray(diffs, dtype=np.float64)
    d = d[d != 0]
    n = d.size
    if n == 0:
        return 0.0, 1.0, True
    ranks = stats.rankdata(np.abs(d), method="average")
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    if n <= 25:
        ranks2 = np.rint(2 * ranks).astype(int)
        p = min(1.0, 2.0 * _signed_rank_exact_cdf(ranks2, int(round(2 * w))))
        return w, p, True
    _, tie_counts = np.unique(ranks, return_counts=True)
    mean_w = n * (n + 1) / 4
    var_w = n * (n + 1) * (2 * n + 1) / 24 - np.sum(tie_counts ** 3 - tie_counts) / 48
    z = (w - mean_w) / math.sqrt(var_w)
    return w, float(min(1.0, 2 * stats.norm.cdf(z))), False


def paired_t(diffs) -> tuple[float, float]:
    d = np.asarray(diffs, dtype=np.float64)
    n = d.size
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0:
        if mean == 0:
            return 0.0, 1.0
        return math.copysign(math.inf, mean), 0.0
    t = mean / (sd / math.sqrt(n))
    return float(t), float(2 * stats.t.sf(abs(t), n - 1))


def paired_compare(values_a, values_b, strict: bool = False) -> PairedResult:
    a = np.asarray(values_a, dtype=np.float64)
    b = np.asarray(values_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    if a.size < 5:
        raise ValueError("paired comparison needs at least 5 pairs")
    diffs = a - b
    flags = ()
    if not np.any(diffs):
        if strict:
            raise DegenerateTestError("all paired differences are zero")
        flags = ("all_differences_zero",)
    t, tp = paired_t(diffs)
    w, wp, exact = wilcoxon_signed_rank(diffs)
    return PairedResult(t, tp, w, wp, int(a.size), exact, flags)


@dataclass
class FdrResult:
    adjusted: np.ndarray
    rejected: np.ndarray


def bh_fdr(pvalues, q: float = 0.05) -> FdrResult:
    """Benjamini-Hochberg step-up adjustment."""
    p = np.asarray(pvalues, dtype=np.float64).reshape(-1)
    if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    if m == 0:
        return FdrResult(p.copy(), np.zeros(0, dtype=bool))
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    adj_sorted = np.minimum.accumulate(scaled[::-1])[::-1]
    adjusted = np.empty(m)
    adjusted[order] = np.minimum(adj_sorted, 1.0)
    return FdrResult(adjusted, adjusted <= q)


def bonferroni(pvalues, q: float = 0.05) -> np.ndarray:
    p = np.asarray(pvalues, dtype=np.float64)
    return p * p.size <= q


# -- reports --------------------------------------------------------------------

REPORT_COLUMNS = ["task", "setting", "method", "class", "sparseness_mean", "sparseness_std",
                  "ris_mean", "ris_std", "ros_mean", "ros_std"]


@dataclass
class MetricReport:
    """Per-sample metric rows with mean/std aggregation by (task, setting, method, class)."""

    rows: list[dict] = field(default_factory=list)

    def add(self, task: str, setting: str, method: str, cls: int, sample_id, sparseness: float,
            ris_value: float, ros_value: float) -> None:
        self.rows.append({"task": task, "setting": setting, "method": method, "class": cls,
                          "sample_id": sample_id, "sparseness": sparseness, "ris": ris_value,
                          "ros": ros_value})

    def summary(self) -> list[dict]:
        groups: dict[tuple, list[dict]] = {}
        for r in self.rows:
            groups.setdefault((r["task"], r["setting"], r["method"], r["class"]), []).append(r)
        out = []
        for key in sorted(groups, key=lambda k: tuple(str(v) for v in k)):
            rs = groups[key]
            row = dict(zip(["task", "setting", "method", "class"], key))
            for m in ("sparseness", "ris", "ros"):
                vals = np.array([r[m] for r in rs], dtype=np.float64)
                row[f"{m}_mean"] = float(vals.mean())
                row[f"{m}_std"] = float(vals.std())
            out.append(row)
        return out

    def values(self, setting: str, method: str, metric: str) -> dict:
        return {r["sample_id"]: r[metric] for r in self.rows
                if r["setting"] == setting and r["method"] == method}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, REPORT_COLUMNS, lineterminator="\n")
            w.writeheader()
            for row in self.summary():
                w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})


def roc_auc(scores, positives) -> float:
    """Area under the ROC curve via the rank-sum identity (ties count one half)."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    pos = np.asarray(positives, dtype=bool).reshape(-1)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative items")
    ranks = stats.rankdata(scores, method="average")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))
