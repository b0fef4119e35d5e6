import itertools
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import integrate, stats

from monoattr import metrics as M


# -- Gini sparseness ------------------------------------------------------------


def test_gini_examples():
    for d in (1, 4, 9, 512):
        assert M.gini_sparseness(np.full(d, 0.3)) == pytest.approx(0.0, abs=1e-12)
    assert M.gini_sparseness([0.0, 0.0, -2.0, 0.0]) == pytest.approx(0.75, abs=1e-12)
    # sorted shares 1/6, 2/6, 3/6 against weights 2.5/3, 1.5/3, 0.5/3
    assert M.gini_sparseness([3.0, -1.0, 2.0]) == pytest.approx(2 / 9, abs=1e-15)


def test_gini_all_zero_is_undefined():
    with pytest.raises(M.UndefinedMetricError):
        M.gini_sparseness(np.zeros(5))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(0, 1e3)).filter(lambda v: v.sum() > 1e-6),
       st.floats(1e-3, 1e3))
def test_gini_bounds_and_scale_invariance(v, c):
    g = M.gini_index(v)
    assert -1e-12 <= g <= 1 - 1 / v.size + 1e-12
    assert M.gini_index(c * v) == pytest.approx(g, abs=1e-12)


def test_differentiable_gini_matches():
    rng = np.random.default_rng(0)
    phi = rng.normal(size=(3, 10))
    mask = rng.random((3, 10)) > 0.3
    got = M.gini_sparseness_tensor(phi, mask).data
    want = [M.gini_sparseness(phi[r][mask[r]]) for r in range(3)]
    np.testing.assert_allclose(got, want, atol=1e-12)


# -- RIS / ROS ------------------------------------------------------------------


W2 = np.array([[2.0, -1.0], [0.5, 1.5]])


def probs(x):
    z = np.asarray(x) @ W2
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def test_ris_constant_attribution_is_zero():
    x = np.array([1.0, 0.2])
    cfg = M.StabilityConfig(n_perturbations=8, sigma=0.01)
    assert M.ris(x, lambda v: np.array([1.0, 2.0]), probs, cfg).value == 0.0
    assert M.ros(x, lambda v: np.array([1.0, 2.0]), probs, cfg).value == 0.0


def test_ris_and_ros_single_draw_hand_oracle():
    x = np.array([1.0, 0.2])
    w = np.array([3.0, -0.5])
    attr = lambda v: w * v ** 2
    cfg = M.StabilityConfig(n_perturbations=1, sigma=0.05, seed=4)
    xp = x + 0.05 * np.random.default_rng(4).standard_normal(2)
    assert np.argmax(probs(xp)) == np.argmax(probs(x))
    num = np.linalg.norm(attr(x) - attr(xp))
    want_ris = np.linalg.norm(x) / np.linalg.norm(attr(x)) * num / np.linalg.norm(x - xp)
    want_ros = np.linalg.norm(probs(x)) / np.linalg.norm(attr(x)) * num / np.linalg.norm(probs(x) - probs(xp))
    assert M.ris(x, attr, probs, cfg).value == pytest.approx(want_ris, rel=1e-12)
    assert M.ros(x, attr, probs, cfg).value == pytest.approx(want_ros, rel=1e-12)


def test_ris_superset_neighborhood_never_decreases():
    rng = np.random.default_rng(1)
    attr = lambda v: np.tanh(3 * v) * v
    for _ in range(10):
        x = rng.normal(size=2) + np.array([2.0, 0.0])
        small = M.ris(x, attr, probs, M.StabilityConfig(n_perturbations=6, sigma=0.05, seed=2))
        both = M.ris(x, attr, probs, M.StabilityConfig(n_perturbations=6, sigma=0.05, seed=2, scales=(1.0, 2.0)))
        assert both.value >= small.value


def test_ros_denominator_guard():
    flat = lambda v: np.array([0.5, 0.5])
    res = M.ros(np.array([1.0, 2.0]), lambda v: v ** 2, flat, M.StabilityConfig(n_perturbations=3))
    assert "denominator_guard" in res.flags
    assert math.isfinite(res.value)


def test_empty_neighborhood():
    flip = iter(range(10 ** 6))
    prob = lambda v: np.array([1.0, 0.0]) if next(flip) == 0 else np.array([0.0, 1.0])
    with pytest.raises(M.EmptyNeighborhoodError):
        M.ris(np.ones(2), lambda v: v, prob, M.StabilityConfig(n_perturbations=4))


def test_stability_config_validation():
    with pytest.raises(M.ConfigError):
        M.StabilityConfig(n_perturbations=0)
    with pytest.raises(M.ConfigError):
        M.StabilityConfig(sigma=0.0)


def test_stability_is_nonnegative_on_random_draws():
    rng = np.random.default_rng(3)
    for _ in range(20):
        phi = rng.normal(size=6)
        res = M.stability_from_draws(phi, rng.normal(size=(4, 6)), rng.uniform(0, 1, 4), 1.3, M.StabilityConfig())
        assert res.value >= 0


# -- aggregation ------------------------------------------------------------------


def test_aggregate_examples():
    v = np.array([0.2, 1.0, 0.6])
    np.testing.assert_allclose(M.aggregate_weighted([v, v, v], [0.2, 0.5, 0.3]), M.minmax(v), atol=1e-15)
    rng = np.random.default_rng(0)
    phis = rng.normal(size=(4, 7))
    np.testing.assert_array_equal(M.aggregate_weighted(phis, [0, 0, 1, 0]), M.minmax(phis[2]))
    np.testing.assert_allclose(M.aggregate_weighted([[0, 1], [1, 0]], [0.5, 0.5]), [0.5, 0.5])


def test_aggregate_order_independent_bitwise():
    rng = np.random.default_rng(5)
    phis = rng.normal(size=(6, 20))
    w = rng.dirichlet(np.ones(6))
    names = [f"m{i}" for i in range(6)]
    ref = M.aggregate_weighted(phis, w, names=names)
    for perm in itertools.islice(itertools.permutations(range(6)), 0, 720, 37):
        p = list(perm)
        got = M.aggregate_weighted(phis[p], w[p], names=[names[i] for i in p])
        assert got.tobytes() == ref.tobytes()


def test_aggregate_simplex_violation():
    with pytest.raises(M.ConfigError):
        M.aggregate_weighted([[1, 2], [3, 4]], [0.7, 0.7])
    with pytest.raises(M.ConfigError):
        M.aggregate_weighted([[1, 2], [3, 4]], [1.5, -0.5])


def test_rank_composite_weights():
    w = M.rank_composite_weights([0.1, 0.5, 0.3], [0.2, 0.4, 0.9], [0.8, 0.1, 0.5])
    assert w.sum() == pytest.approx(1.0)
    assert np.argmax(w) == 0


# -- paired tests ------------------------------------------------------------------

# paired measurements (before, after) with one zero difference and tied magnitudes
BEFORE = np.array([125, 115, 130, 140, 140, 115, 140, 125, 140, 135], dtype=float)
AFTER = np.array([110, 122, 125, 120, 140, 124, 123, 137, 135, 145], dtype=float)


def wilcoxon_by_enumeration(d):
    """Two-sided exact p from all 2^n sign patterns of the midranks."""
    d = d[d != 0]
    r = stats.rankdata(np.abs(d))
    w = min(r[d > 0].sum(), r[d < 0].sum())
    hits = 0
    for signs in itertools.product((0, 1), repeat=d.size):
        wp = r[np.array(signs, bool)].sum()
        hits += min(wp, r.sum() - wp) <= w + 1e-9
    return w, hits / 2 ** d.size


def t_by_integration(d):
    """t statistic and two-sided p from numerically integrating the t density."""
    n = d.size
    t = d.mean() / (d.std(ddof=1) / math.sqrt(n))
    nu = n - 1
    c = math.gamma((nu + 1) / 2) / (math.sqrt(nu * math.pi) * math.gamma(nu / 2))
    density = lambda s: c * (1 + s * s / nu) ** (-(nu + 1) / 2)
    tail, _ = integrate.quad(density, abs(t), np.inf, epsabs=1e-14)
    return t, 2 * tail


def test_paired_compare_against_oracles():
    res = M.paired_compare(BEFORE, AFTER)
    d = BEFORE - AFTER
    w, p = wilcoxon_by_enumeration(d)
    assert res.exact and res.wilcoxon_W == w == 18.0
    assert res.wilcoxon_p == pytest.approx(p, abs=1e-12)
    t, tp = t_by_integration(d)
    assert res.t_stat == pytest.approx(t, rel=1e-12)
    assert res.t_p == pytest.approx(tp, rel=1e-8)


def test_wilcoxon_exact_random_inputs():
    rng = np.random.default_rng(9)
    for n in (5, 8, 12):
        d = np.round(rng.normal(0.3, 1, n), 1)
        w, p, exact = M.wilcoxon_signed_rank(d)
        assert (w, p) == pytest.approx(wilcoxon_by_enumeration(d), abs=1e-12)


def test_wilcoxon_normal_approximation_above_25():
    rng = np.random.default_rng(10)
    d = np.round(rng.normal(0.4, 1, 40), 1)
    w, p, exact = M.wilcoxon_signed_rank(d)
    ref = stats.wilcoxon(d, zero_method="wilcox", correction=False, method="approx")
    assert not exact
    assert w == ref.statistic
    assert p == pytest.approx(ref.pvalue, rel=1e-10)


def test_paired_compare_identical_and_shifted():
    a = np.arange(10.0)
    same = M.paired_compare(a, a)
    assert (same.t_stat, same.t_p, same.wilcoxon_p) == (0.0, 1.0, 1.0)
    assert "all_differences_zero" in same.flags
    with pytest.raises(M.DegenerateTestError):
        M.paired_compare(a, a, strict=True)
    rng = np.random.default_rng(2)
    b = rng.normal(size=10)
    shifted = M.paired_compare(b + 1 + rng.normal(0, 0.1, 10), b)
    assert shifted.t_p < 0.01 and shifted.wilcoxon_p < 0.01


def test_paired_compare_needs_five_pairs():
    with pytest.raises(ValueError):
        M.paired_compare([1, 2, 3, 4], [1, 2, 3, 5])


# -- BH-FDR ----------------------------------------------------------------------


def step_up_oracle(p, q):
    m = len(p)
    order = np.argsort(p)
    k = max([i + 1 for i in range(m) if p[order[i]] <= (i + 1) * q / m], default=0)
    rejected = np.zeros(m, bool)
    rejected[order[:k]] = True
    return rejected


def test_bh_examples():
    assert M.bh_fdr([0.03]).adjusted[0] == 0.03
    assert M.bh_fdr([0.01, 0.02, 0.03, 0.04], 0.05).rejected.all()
    assert not M.bh_fdr(np.ones(6)).rejected.any()
    with pytest.raises(ValueError):
        M.bh_fdr([0.5, 1.2])


def test_bh_textbook_adjusted_values():
    p = np.array([0.01, 0.04, 0.03, 0.005])
    np.testing.assert_allclose(M.bh_fdr(p).adjusted, [0.02, 0.04, 0.04, 0.02], atol=1e-15)


@settings(max_examples=300, deadline=None)
@given(arrays(np.float64, st.integers(1, 30), elements=st.floats(0, 1)), st.floats(0.001, 0.5))
def test_bh_matches_step_up_and_contains_bonferroni(p, q):
    ratios = np.sort(p) * p.size / np.arange(1, p.size + 1)
    assume(np.all(np.abs(ratios - q) > 1e-9))  # exact ties at the cut depend on rounding order
    res = M.bh_fdr(p, q)
    np.testing.assert_array_equal(res.rejected, step_up_oracle(p, q))
    assert np.all(res.rejected >= M.bonferroni(p, q))
    order = np.argsort(p, kind="stable")
    assert np.all(np.diff(res.adjusted[order]) >= -1e-15)


# -- AUC and report -----------------------------------------------------------------


def test_roc_auc_pairwise_oracle():
    rng = np.random.default_rng(4)
    s = np.round(rng.normal(size=60), 1)
    pos = rng.random(60) < 0.3
    pairs = [(1.0 if a > b else 0.5 if a == b else 0.0) for a in s[pos] for b in s[~pos]]
    assert M.roc_auc(s, pos) == pytest.approx(np.mean(pairs), abs=1e-12)


def test_metric_report_layout(tmp_path):
    rep = M.MetricReport()
    for i, v in enumerate([0.2, 0.4]):
        rep.add("binary", "no_sae", "TEO", 0, i, v, 1.0 + v, 2.0)
    rep.write_csv(tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == ",".join(M.REPORT_COLUMNS)
    assert lines[1].startswith("binary,no_sae,TEO,0,0.3,0.1,1.3,0.1,2,0")
