import itertools
import math

import numpy as np
import pytest

from monoattr import autodiff as ad
from monoattr.attribution import (ConfigError, LayerView, Method, ScaleError, attr_activation,
                                  attr_feature_ablation, attr_grad_times_act, attr_gradient_shap,
                                  attr_integrated_gradients, attr_layer_conductance, attr_shapley_exact,
                                  attribute, write_attribution_csv)
from monoattr.autodiff import ContractError


def linear_view(w, a, n_classes=2):
    """Identity layer, head f_0 = w . a (other logits zero)."""
    W = np.zeros((len(w), n_classes))
    W[:, 0] = w
    return LayerView(x=np.asarray(a, float), layer=lambda x: ad._lift(x), head=lambda h: ad.matmul(h, W))


def mlp_view(d_in=6, d=8, seed=0):
    rng = np.random.default_rng(seed)
    W1 = rng.normal(0, 0.6, (d_in, d))
    W2, W3 = rng.normal(0, 0.6, (d, 5)), rng.normal(0, 0.6, (5, 3))
    x = rng.uniform(-1, 1, d_in)
    return LayerView(x=x, layer=lambda t: ad.tanh(ad.matmul(t, W1)),
                     head=lambda h: ad.matmul(ad.tanh(ad.matmul(h, W2)), W3))


def f(view, a, t=0):
    return view.output(np.asarray(a))[t]


# -- definitions on linear heads ---------------------------------------------------


def test_activation_is_layer_output():
    view = mlp_view()
    phi = attr_activation(view)
    assert phi.values.tobytes() == view.layer(view.x).data.tobytes()
    assert phi.values.shape == (8,)
    assert not np.any(attr_activation(linear_view(np.ones(3), np.zeros(3))).values)


def test_linear_head_agreement():
    rng = np.random.default_rng(4)
    w, a = rng.normal(size=6), rng.normal(size=6)
    view = linear_view(w, a)
    want = w * a
    np.testing.assert_allclose(attr_grad_times_act(view, 0).values, want, atol=1e-14)
    for S in (1, 3, 64):
        np.testing.assert_allclose(attr_integrated_gradients(view, steps=S, target=0).values, want, atol=1e-14)
    np.testing.assert_allclose(attr_layer_conductance(view, steps=16, target=0).values, want, atol=1e-13)
    np.testing.assert_allclose(-attr_feature_ablation(view, target=0).values, want, atol=1e-14)


def test_gradient_shap_linear_monte_carlo():
    rng = np.random.default_rng(8)
    w, a = rng.normal(size=5), rng.normal(size=5)
    view = linear_view(w, a)
    n, sigma = 10000, 0.3
    # per-draw contribution is (a - b') w with b' ~ N(0, sigma^2): standard error sigma |w| / sqrt(n)
    se = sigma * np.abs(w) / math.sqrt(n)
    z = np.array([(attr_gradient_shap(view, sigma=sigma, n_samples=n, seed=s, target=0).values - w * a) / se
                  for s in range(20)])
    # 100 z-scores: a correct estimator exceeds 3 about 0.27 times on average
    assert np.sum(np.abs(z) > 3) <= 2
    assert abs(z.mean()) < 3 / math.sqrt(z.size)


def test_gradient_shap_degenerate_noise_is_one_step_ig():
    view = mlp_view(seed=2)
    shap = attr_gradient_shap(view, sigma=0.0, n_samples=1, alpha=0.5, target=1).values
    ig = attr_integrated_gradients(view, steps=1, target=1).values
    np.testing.assert_allclose(shap, ig, atol=1e-15)


def test_gradient_shap_deterministic_per_seed():
    view = mlp_view(seed=3)
    one = attr_gradient_shap(view, n_samples=16, seed=7).values
    assert one.tobytes() == attr_gradient_shap(view, n_samples=16, seed=7).values.tobytes()
    assert one.tobytes() != attr_gradient_shap(view, n_samples=16, seed=8).values.tobytes()


def test_grad_times_act_matches_jacobian_row():
    view = mlp_view(seed=5)
    a = view.activations
    J = ad.jacobian(lambda h: view.head(h), a)
    for t in range(3):
        np.testing.assert_allclose(attr_grad_times_act(view, t).values, a * J[t], atol=1e-10, rtol=0)


def test_zero_activation_gives_zero():
    view = linear_view(np.array([1.0, -2.0, 3.0]), np.zeros(3))
    assert not np.any(attr_grad_times_act(view, 0).values)


# -- completeness ---------------------------------------------------------------------


def test_integrated_gradients_completeness_and_convergence():
    view = mlp_view(seed=6)
    a = view.activations
    gap = f(view, a, 2) - f(view, np.zeros_like(a), 2)
    errs = [abs(attr_integrated_gradients(view, steps=S, target=2).values.sum() - gap) for S in (8, 32, 128, 512)]
    assert errs[1] < 1e-3
    assert abs(attr_integrated_gradients(view, steps=256, target=2).values.sum() - gap) < 1e-3
    assert all(e2 < e1 for e1, e2 in zip(errs, errs[1:]))


def test_integrated_gradients_baseline_equal_input():
    view = mlp_view(seed=1)
    assert not np.any(attr_integrated_gradients(view, baseline=view.activations, steps=8).values)


def test_conductance_completeness_and_convergence():
    view = mlp_view(seed=7)
    # the explained gap runs from the layer output at the zero input to the actual one
    a0 = view.layer(np.zeros_like(view.x)).data
    gap = f(view, view.activations, 1) - f(view, a0, 1)
    errs = [abs(attr_layer_conductance(view, steps=S, target=1).values.sum() - gap) for S in (8, 32, 128, 512)]
    assert abs(attr_layer_conductance(view, steps=256, target=1).values.sum() - gap) < 1e-2
    assert all(e2 < e1 for e1, e2 in zip(errs, errs[1:]))


def test_conductance_on_identity_layer_equals_ig():
    rng = np.random.default_rng(9)
    W1, W2 = rng.normal(size=(5, 4)), rng.normal(size=(4, 2))
    view = LayerView(x=rng.normal(size=5), layer=lambda t: ad._lift(t),
                     head=lambda h: ad.matmul(ad.tanh(ad.matmul(h, W1)), W2))
    np.testing.assert_allclose(attr_layer_conductance(view, steps=20, target=0).values,
                               attr_integrated_gradients(view, steps=20, target=0).values, atol=1e-14)


def test_ablation_all_at_once_and_identity_baseline():
    view = mlp_view(seed=10)
    a = view.activations
    whole = attr_feature_ablation(view, groups=[range(a.size)], target=0).values
    np.testing.assert_allclose(whole, f(view, np.zeros_like(a)) - f(view, a), atol=1e-15)
    assert not np.any(attr_feature_ablation(view, baseline=a).values)
    with pytest.raises(ContractError):
        attr_feature_ablation(view, groups=[[0, 1], [1, 2]])


# -- exact Shapley ---------------------------------------------------------------------


def brute_force_shapley(view, baseline, t):
    """Shapley values by averaging marginal contributions over all coalitions (subset formula)."""
    a = view.activations
    d = a.size
    phi = np.zeros(d)
    for i in range(d):
        others = [j for j in range(d) if j != i]
        for r in range(d):
            for S in itertools.combinations(others, r):
                with_i = baseline.copy()
                with_i[list(S) + [i]] = a[list(S) + [i]]
                without = baseline.copy()
                without[list(S)] = a[list(S)]
                weight = math.factorial(r) * math.factorial(d - r - 1) / math.factorial(d)
                phi[i] += weight * (f(view, with_i, t) - f(view, without, t))
    return phi


def test_shapley_efficiency_d8():
    view = mlp_view(d=8, seed=11)
    a, b = view.activations, np.zeros(8)
    phi = attr_shapley_exact(view, b, target=0).values
    assert abs(phi.sum() - (f(view, a) - f(view, b))) < 1e-9
    np.testing.assert_allclose(phi, brute_force_shapley(view, b, 0), atol=1e-12)


def test_shapley_additive_model():
    rng = np.random.default_rng(12)
    a, b = rng.normal(size=5), rng.normal(size=5)
    c = rng.normal(size=5)
    g = lambda v: c * v ** 3 + np.tanh(v)

    def head(h):
        s = ad.sum_(c * h * h * h + ad.tanh(h), axis=-1)
        return ad.stack([s, s * 0.0], axis=-1)

    view = LayerView(x=a, layer=lambda x: ad._lift(x), head=head)
    np.testing.assert_allclose(attr_shapley_exact(view, b, target=0).values, g(a) - g(b), atol=1e-12)


def test_shapley_symmetry():
    w = np.array([1.0, 1.0, 2.0, 0.5])
    W = np.stack([w, -w], axis=1)
    view = LayerView(x=np.array([0.7, 0.7, 0.2, -1.0]), layer=lambda x: ad._lift(x),
                     head=lambda h: ad.tanh(ad.matmul(h, W)))
    phi = attr_shapley_exact(view, target=0).values
    assert phi[0] == pytest.approx(phi[1], abs=1e-15)


def test_shapley_scale_limit():
    view = linear_view(np.ones(13), np.ones(13))
    with pytest.raises(ScaleError):
        attr_shapley_exact(view)


# -- properties -------------------------------------------------------------------------


def test_positive_logit_scaling():
    view = mlp_view(seed=13)
    c = 3.5
    scaled = LayerView(x=view.x, layer=view.layer, head=lambda h: view.head(h) * c)
    for m in (Method.GRAD_TIMES_ACT, Method.INTEGRATED_GRAD, Method.GRAD_SHAP, Method.CONDUCTANCE):
        base = attribute(view, m, 0).values
        up = attribute(scaled, m, 0).values
        np.testing.assert_allclose(up, c * base, rtol=1e-12, atol=1e-15)
        assert np.array_equal(np.argsort(up, kind="stable"), np.argsort(base, kind="stable"))


def test_target_defaults_to_prediction():
    view = mlp_view(seed=14)
    assert attribute(view, "GradTimesAct").target_class == view.predicted_class()


def test_step_count_errors():
    view = mlp_view()
    with pytest.raises(ConfigError):
        attr_integrated_gradients(view, steps=0)
    with pytest.raises(ConfigError):
        attr_layer_conductance(view, steps=0)


def test_attribution_csv(tmp_path):
    view = mlp_view()
    write_attribution_csv(tmp_path / "a.csv", [attribute(view, m) for m in ("Activation", "Ablation")])
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "sample_id,method,level,unit_index,value"
    assert len(lines) == 1 + 2 * 8
    assert lines[1].startswith("0,Activation,layer,0,")
