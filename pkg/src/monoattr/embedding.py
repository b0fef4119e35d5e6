"""Cohort-level embeddings: feature-wise UMAP with a diagonal constraint, PCA, and subgroup selection.

The UMAP here is self-contained: a Gaussian k-NN graph, the q_ij = 1/(1 + a d^{2b})
kernel and full-batch gradient steps on the cross-entropy.  Runs are batched over
features, so the feature-wise mode costs about as much as a single fit.
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field

import numpy as np

from .cohort import TAGS, Cohort
from .metrics import ConfigError

# Subgroup report header, one column per tag
REPORT_HEADER = ["group", "Dem", "VS", "CDT", "CCT", "AVLT1", "CFA", "AVLT2", "ANART", "FAQ"]

JITTER = 1e-9


@dataclass
class UmapConfig:
    n_neighbors: int = 5
    a: float = 1.577
    b: float = 0.895
    epochs: int = 200
    lr: float = 1.0
    seed: int = 0
    var_floor: float = 1e-4
    lam5: float = 0.0
    init_noise: float = 0.05    # off-diagonal spread of the start, as a fraction of the init scale
    init_scale: float = 10.0
    clip: float = 4.0

    def __post_init__(self):
        if self.n_neighbors < 2:
            raise ConfigError("n_neighbors must be >= 2")
        if self.a <= 0 or self.b <= 0:
            raise ConfigError("a and b must be positive")
        if self.var_floor <= 0:
            raise ConfigError("var_floor must be positive")
        if self.lam5 < 0 or self.epochs < 0 or self.lr <= 0 or self.init_noise < 0:
            raise ConfigError("lam5, epochs, init_noise must be >= 0 and lr > 0")


@dataclass
class EmbeddingResult:
    coords: np.ndarray                 # (n, 2) in [0, 1]
    raw: np.ndarray                    # (n, 2) before normalization
    residual: float                    # sum (u_i1 - u_i2)^2 of coords
    variance: float                    # Var(U) of raw
    flags: tuple[str, ...] = ()


@dataclass
class FeaturewiseResult:
    coords: np.ndarray                 # (T, M, 2)
    residuals: np.ndarray              # (T,)
    flags: list[tuple[str, ...]] = field(default_factory=list)

    def block(self, j: int) -> np.ndarray:
        return self.coords[j]


@dataclass
class PcaResult:
    components: np.ndarray             # (k, T), orthonormal rows
    ratios: np.ndarray                 # (k,) explained-variance ratios
    scores: np.ndarray                 # (M, k)
    mean: np.ndarray                   # (T,)
    rank: int
    flags: tuple[str, ...] = ()


# -- graph ---------------------------------------------------------------------

def _pairwise_sq(X: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances over the last two axes: (..., n, D) -> (..., n, n)."""
    sq = np.sum(X * X, axis=-1)
    d = sq[..., :, None] + sq[..., None, :] - 2 * X @ np.swapaxes(X, -1, -2)
    return np.maximum(d, 0.0)


def _bandwidths(knn_sq: np.ndarray, target: float, iters: int = 64) -> np.ndarray:
    """sigma per point with sum_j exp(-d_ij^2 / sigma^2) = target over its k neighbours."""
    lo = np.full(knn_sq.shape[:-1], -30.0)
    hi = np.full(knn_sq.shape[:-1], 30.0)
    for _ in range(iters):
        mid = (lo + hi) / 2
        s = np.exp(-knn_sq / np.exp(2 * mid)[..., None]).sum(-1)
        too_big = s > target
        hi = np.where(too_big, mid, hi)
        lo = np.where(too_big, lo, mid)
    return np.exp((lo + hi) / 2)


def fuzzy_graph(X: np.ndarray, k: int) -> np.ndarray:
    """Symmetrized Gaussian k-NN affinities P for points (..., n, D)."""
    d2 = _pairwise_sq(X)
    n = d2.shape[-1]
    d2 = d2 + np.diag(np.full(n, np.inf))
    order = np.argsort(d2, axis=-1, kind="stable")[..., :k]
    knn = np.take_along_axis(d2, order, axis=-1)
    sigma = _bandwidths(knn, np.log2(k))
    p = np.zeros_like(d2)
    np.put_along_axis(p, order, np.exp(-knn / (sigma[..., None] ** 2)), axis=-1)
    return (p + np.swapaxes(p, -1, -2)) / 2


# -- layout --------------------------------------------------------------------

def _q(d2: np.ndarray, a: float, b: float) -> np.ndarray:
    return 1.0 / (1.0 + a * d2 ** b)


def _optimize(P: np.ndarray, U: np.ndarray, config: UmapConfig) -> np.ndarray:
    """Gradient steps on the cross-entropy, with the diagonal penalty applied proximally.

    Each point moves toward u_j where P_ij > Q_ij and away where P_ij < Q_ij,
    in proportion to (P_ij - Q_ij)(u_j - u_i)/||u_i - u_j||^2.  The penalty
    lam5 * (u1 - u2)^2 is exactly minimized per step, which stays stable at
    any lam5.
    """
    c = config
    n = U.shape[-2]
    off = 1.0 - np.eye(n)
    for epoch in range(c.epochs):
        lr = c.lr * (1.0 - epoch / c.epochs)
        diff = U[..., :, None, :] - U[..., None, :, :]          # u_i - u_j
        d2 = np.sum(diff * diff, axis=-1)
        Q = _q(d2, c.a, c.b) * off
        w = (P - Q) * off / (d2 + 1e-3)
        grad = np.einsum("...ij,...ijk->...ik", w, diff)
        U = U - lr * np.clip(grad, -c.clip, c.clip)
        if c.lam5:
            centre = (U[..., 0] + U[..., 1]) / 2
            r = (U[..., 0] - U[..., 1]) / (1.0 + 4.0 * lr * c.lam5)
            U = np.stack([centre + r / 2, centre - r / 2], axis=-1)
        U = _variance_floor(U, c.var_floor)
    return _variance_floor(U, c.var_floor)


def _variance_floor(U: np.ndarray, floor: float) -> np.ndarray:
    mean = U.mean(axis=-2, keepdims=True)
    var = np.sum((U - mean) ** 2, axis=-1).mean(axis=-1)
    scale = np.where(var < floor, np.sqrt(floor / np.maximum(var, 1e-300)), 1.0)
    return mean + (U - mean) * scale[..., None, None]


def _normalize(U: np.ndarray) -> np.ndarray:
    """Joint min-max over both coordinates, so points on the diagonal stay on it."""
    lo = U.min(axis=(-2, -1), keepdims=True)
    span = U.max(axis=(-2, -1), keepdims=True) - lo
    return np.where(span > 0, (U - lo) / np.where(span > 0, span, 1.0), 0.5)


def _init(X: np.ndarray, config: UmapConfig, rngs) -> np.ndarray:
    """Scaled leading direction replicated to both coordinates, plus seeded spread."""
    Xc = X - X.mean(axis=-2, keepdims=True)
    if X.shape[-1] == 1:
        s = Xc[..., 0]
    else:
        _, _, vt = np.linalg.svd(Xc, full_matrices=False)
        s = np.einsum("...nd,...d->...n", Xc, vt[..., 0, :])
    span = s.max(axis=-1, keepdims=True) - s.min(axis=-1, keepdims=True)
    s = config.init_scale * (s - s.min(axis=-1, keepdims=True)) / np.where(span > 0, span, 1.0)
    U = np.stack([s, s], axis=-1)
    if config.init_noise:
        noise = np.stack([r.standard_normal(U.shape[-2:]) for r in rngs])
        U = U + config.init_noise * config.init_scale * noise.reshape(U.shape)
    return U


def _has_duplicates(X: np.ndarray) -> bool:
    return len(np.unique(X, axis=0)) < len(X)


def _result(U: np.ndarray, flags) -> EmbeddingResult:
    coords = _normalize(U)
    mean = U.mean(axis=0)
    return EmbeddingResult(coords=coords, raw=U, residual=float(np.sum((coords[:, 0] - coords[:, 1]) ** 2)),
                           variance=float(np.sum((U - mean) ** 2, axis=1).mean()), flags=tuple(flags))


def umap_fit(points, config: UmapConfig | None = None) -> EmbeddingResult:
    """Embed n points of R^D into [0, 1]^2."""
    c = config or UmapConfig()
    X = np.asarray(points, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n = len(X)
    if n <= c.n_neighbors:
        raise ConfigError(f"need more than n_neighbors={c.n_neighbors} points, got {n}")
    rng = np.random.default_rng([c.seed, 11])
    flags = []
    if _has_duplicates(X):
        X = X + JITTER * rng.standard_normal(X.shape)
        flags.append("jitter")
    U = _init(X[None], c, [rng])
    U = _optimize(fuzzy_graph(X[None], c.n_neighbors), U, c)[0]
    return _result(U, flags)


def feature_seed(seed: int, column: np.ndarray) -> list[int]:
    """Seed derived from the feature's own values, so permuting features permutes results."""
    return [seed, zlib.crc32(np.ascontiguousarray(column, dtype=np.float64).tobytes())]


def featurewise_umap(matrix, config: UmapConfig | None = None, chunk: int = 64) -> FeaturewiseResult:
    """Independent 1-D -> 2-D embeddings of each min-max normalized column of an M x T matrix."""
    c = config or UmapConfig()
    A = np.asarray(matrix, dtype=np.float64)
    M, T = A.shape
    if M <= c.n_neighbors:
        raise ConfigError(f"need more than n_neighbors={c.n_neighbors} samples, got {M}")
    cols, flags, rngs = [], [], []
    for j in range(T):
        x = A[:, j]
        rng = np.random.default_rng(feature_seed(c.seed, x))
        f = []
        if np.ptp(x) == 0 or _has_duplicates(x[:, None]):
            x = x + JITTER * rng.standard_normal(M)
            f.append("jitter")
        span = np.ptp(x)
        cols.append((x - x.min()) / span if span > 0 else np.zeros(M))
        flags.append(tuple(f))
        rngs.append(rng)
    X = np.stack(cols)[..., None]                                # (T, M, 1)
    out = np.empty((T, M, 2))
    for s in range(0, T, chunk):
        sl = slice(s, s + chunk)
        U = _init(X[sl], c, rngs[sl])
        out[sl] = _normalize(_optimize(fuzzy_graph(X[sl], c.n_neighbors), U, c))
    residuals = np.sum((out[..., 0] - out[..., 1]) ** 2, axis=-1)
    return FeaturewiseResult(out, residuals, flags)


# -- PCA -----------------------------------------------------------------------

def pca_top8(matrix, n_components: int = 8) -> PcaResult:
    """Column-centred SVD; each component's largest-|loading| entry is made positive."""
    X = np.asarray(matrix, dtype=np.float64)
    mean = X.mean(axis=0)
    Xc = X - mean
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    k = min(n_components, len(s))
    tol = max(X.shape) * np.finfo(float).eps * (s[0] if len(s) else 0.0)
    rank = int(np.sum(s > tol))
    comps = vt[:k].copy()
    for i in range(k):
        if comps[i, np.argmax(np.abs(comps[i]))] < 0:
            comps[i] = -comps[i]
    total = np.sum(s ** 2)
    ratios = s[:k] ** 2 / total if total > 0 else np.zeros(k)
    flags = ("rank_deficient",) if rank < n_components else ()
    return PcaResult(comps, ratios, Xc @ comps.T, mean, rank, flags)


# -- subgroup selection --------------------------------------------------------

def position_tags(cohort: Cohort) -> list[str | None]:
    """Majority subgroup tag of each token position over the cohort."""
    T = len(cohort.samples[0].tokens)
    counts = np.zeros((T, len(TAGS) + 1), dtype=np.int64)
    index = {t: i for i, t in enumerate(TAGS)}
    for s in cohort.samples:
        for pos, tag in enumerate(s.tag_of()):
            counts[pos, index[tag] if tag is not None else len(TAGS)] += 1
    best = counts.argmax(axis=1)
    return [TAGS[b] if b < len(TAGS) else None for b in best]


@dataclass
class SubgroupReport:
    selected: np.ndarray               # (T,) bool
    weights: np.ndarray                # (T,) normalized first-component magnitudes
    counts: dict[str, int]
    fractions: dict[str, float]

    @property
    def top(self) -> str | None:
        if not sum(self.counts.values()):
            return None
        return max(TAGS, key=lambda t: (self.fractions[t], -TAGS.index(t)))


def first_component_weights(pca: PcaResult, source: str = "loadings", features=None) -> np.ndarray:
    """|PC1| per feature, min-max normalized to [0, 1] over ``features`` (a bool mask; default all).

    ``loadings`` uses the component itself; ``scores`` uses the per-feature
    mean magnitude of the rank-1 reconstruction from the PC1 scores.
    Features outside the mask get weight 0.
    """
    if source == "loadings":
        v = np.abs(pca.components[0])
    elif source == "scores":
        v = np.abs(pca.scores[:, :1] @ pca.components[:1]).mean(axis=0)
    else:
        raise ConfigError(f"unknown source {source!r}")
    keep = np.ones(len(v), dtype=bool) if features is None else np.asarray(features, dtype=bool)
    out = np.zeros_like(v)
    if keep.any():
        sub = v[keep]
        span = np.ptp(sub)
        out[keep] = (sub - sub.min()) / span if span > 0 else 0.0
    return out


def threshold_select(pca: PcaResult, cohort: Cohort, tau: float = 0.6, source: str = "loadings",
                     within: str = "spans") -> SubgroupReport:
    """Features at or above tau, tallied by subgroup as fractions of the selected span tokens.

    With ``within="spans"`` the normalization runs over positions that belong
    to a subgroup, so special tokens and padding cannot compress the scale.
    """
    tags = position_tags(cohort)
    if within not in ("spans", "all"):
        raise ConfigError(f"within must be spans or all, got {within!r}")
    features = np.array([t is not None for t in tags]) if within == "spans" else None
    w = first_component_weights(pca, source, features)
    selected = w >= tau
    if features is not None:
        selected &= features
    counts = {t: 0 for t in TAGS}
    for pos in np.flatnonzero(selected):
        if tags[pos] is not None:
            counts[tags[pos]] += 1
    total = sum(counts.values())
    fractions = {t: (counts[t] / total if total else 0.0) for t in TAGS}
    return SubgroupReport(selected, w, counts, fractions)


# -- CSV -----------------------------------------------------------------------

def write_embedding_csv(path, result: FeaturewiseResult, sample_ids) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature_index", "sample_id", "u1", "u2"])
        for j in range(result.coords.shape[0]):
            for sid, (u1, u2) in zip(sample_ids, result.coords[j]):
                w.writerow([j, sid, f"{u1:.10g}", f"{u2:.10g}"])


def write_pca_csv(path, pca: PcaResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["component", "feature_index", "loading"])
        for c, row in enumerate(pca.components):
            for j, v in enumerate(row):
                w.writerow([c + 1, j, f"{v:.10g}"])


def write_subgroup_csv(path, reports: dict[str, SubgroupReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for group, rep in reports.items():
            w.writerow([group] + [f"{rep.fractions[t]:.6f}" for t in TAGS])
