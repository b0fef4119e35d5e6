"""Layer attribution methods.

All methods work on a :class:`LayerView`: a model cut at the attributed
layer into ``layer`` (input -> activations) and ``head`` (activations ->
class outputs).  The explained quantity is ``head(a)[target]``.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor


class ConfigError(ValueError):
    pass


class ScaleError(ValueError):
    pass


class Method(str, Enum):
    ABLATION = "Ablation"
    ACTIVATION = "Activation"
    GRAD_TIMES_ACT = "GradTimesAct"
    GRAD_SHAP = "GradSHAP"
    INTEGRATED_GRAD = "IntegratedGrad"
    CONDUCTANCE = "Conductance"
    SHAPLEY = "Shapley"


# The six methods aggregated by the explanation optimizer, in channel order.
SIX_METHODS = (Method.ABLATION, Method.ACTIVATION, Method.CONDUCTANCE,
               Method.GRAD_SHAP, Method.INTEGRATED_GRAD, Method.GRAD_TIMES_ACT)


class Level(str, Enum):
    LAYER = "layer"
    SAE_FEATURE = "sae_feature"
    TOKEN = "token"


@dataclass
class AttributionVector:
    values: np.ndarray
    method: Method
    level: Level = Level.LAYER
    target_class: int = 0
    sample_id: int | str = 0
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise ad.NumericError(f"{self.method}: non-finite attribution")


@dataclass
class LayerView:
    """A model split at the attributed layer for one sample."""

    x: np.ndarray
    layer: Callable[[Tensor | np.ndarray], Tensor]
    head: Callable[[Tensor | np.ndarray], Tensor]
    sample_id: int | str = 0
    _a: np.ndarray | None = field(default=None, repr=False)

    @property
    def activations(self) -> np.ndarray:
        if self._a is None:
            self._a = np.array(self.layer(self.x).data)
        return self._a

    def output(self, a: np.ndarray) -> np.ndarray:
        return self.head(np.asarray(a)).data

    def predicted_class(self) -> int:
        return int(np.argmax(self.output(self.activations)))


def head_grads(view: LayerView, points: np.ndarray, target: int) -> tuple[np.ndarray, np.ndarray]:
    """f_target and d f_target / d a at each row of ``points``."""
    pts = Tensor(np.atleast_2d(points), requires_grad=True)
    out = view.head(pts)[..., target]
    total = ad.sum_(out)
    if not total.requires_grad:
        return out.data, np.zeros_like(pts.data)
    total.backward()
    g = pts.grad if pts.grad is not None else np.zeros_like(pts.data)
    return out.data, g


def _baseline(view: LayerView, baseline) -> np.ndarray:
    a = view.activations
    b = np.zeros_like(a) if baseline is None else np.broadcast_to(np.asarray(baseline, float), a.shape).copy()
    if not np.all(np.isfinite(b)):
        raise ContractError("baseline must be finite")
    return b


def _target(view: LayerView, target: int | None) -> int:
    return view.predicted_class() if target is None else int(target)


def attr_activation(view: LayerView, target: int | None = None) -> AttributionVector:
    return AttributionVector(view.activations.copy(), Method.ACTIVATION,
                             target_class=_target(view, target), sample_id=view.sample_id)


def attr_grad_times_act(view: LayerView, target: int | None = None) -> AttributionVector:
    t = _target(view, target)
    a = view.activations
    _, g = head_grads(view, a[None], t)
    flags = ("zero_gradient",) if not np.any(g) else ()
    return AttributionVector(a * g[0], Method.GRAD_TIMES_ACT, target_class=t,
                             sample_id=view.sample_id, flags=flags)


def attr_integrated_gradients(view: LayerView, baseline=None, steps: int = 32,
                              target: int | None = None) -> AttributionVector:
    """Midpoint-rule path integral of the gradient from baseline to activation."""
    if steps < 1:
        raise ConfigError("integrated gradients needs steps >= 1")
    t = _target(view, target)
    a, b = view.activations, _baseline(view, baseline)
    alphas = (np.arange(1, steps + 1) - 0.5) / steps
    _, g = head_grads(view, b + alphas[:, None] * (a - b), t)
    return AttributionVector((a - b) * g.mean(axis=0), Method.INTEGRATED_GRAD, target_class=t,
                             sample_id=view.sample_id)


def attr_gradient_shap(view: LayerView, baseline=None, sigma: float | None = None,
                       n_samples: int = 64, seed: int = 0, target: int | None = None,
                       alpha: float | None = None) -> AttributionVector:
    """Expected gradients over Gaussian-noised baselines.

    ``alpha`` pins the interpolation coefficient instead of drawing it
    from U(0, 1); ``sigma`` defaults to 0.1 * std(activations).
    """
    if n_samples < 1:
        raise ConfigError("gradient SHAP needs n_samples >= 1")
    t = _target(view, target)
    a, b = view.activations, _baseline(view, baseline)
    if sigma is None:
        sigma = 0.1 * float(np.std(a))
    if sigma < 0:
        raise ConfigError("sigma must be >= 0")
    rng = np.random.default_rng(seed)
    noisy = b + sigma * rng.standard_normal((n_samples, a.size))
    alphas = np.full(n_samples, alpha) if alpha is not None else rng.uniform(0, 1, n_samples)
    _, g = head_grads(view, noisy + alphas[:, None] * (a - noisy), t)
    return AttributionVector(((a - noisy) * g).mean(axis=0), Method.GRAD_SHAP, target_class=t,
                             sample_id=view.sample_id)


def attr_feature_ablation(view: LayerView, baseline=None, groups: Iterable[Iterable[int]] | None = None,
                          target: int | None = None) -> AttributionVector:
    """Output change f(x; a_S -> b_S) - f(x) for each group S (units share their group's score)."""
    t = _target(view, target)
    a, b = view.activations, _baseline(view, baseline)
    groups = [[i] for i in range(a.size)] if groups is None else [list(g) for g in groups]
    seen: set[int] = set()
    for g in groups:
        if seen & set(g):
            raise ContractError("ablation groups overlap")
        seen |= set(g)
    ablated = np.repeat(a[None], len(groups), axis=0)
    for r, g in enumerate(groups):
        ablated[r, g] = b[g]
    f0 = view.output(a)[t]
    deltas = view.output(ablated)[:, t] - f0
    deltas[np.all(ablated == a, axis=1)] = 0.0  # untouched input: exactly no change
    phi = np.zeros_like(a)
    for r, g in enumerate(groups):
        phi[g] = deltas[r]
    return AttributionVector(phi, Method.ABLATION, target_class=t, sample_id=view.sample_id)


def conductance_from_path(view: LayerView, a_path: np.ndarray, a_mid: np.ndarray,
                          target: int) -> np.ndarray:
    """Sum over steps of dF/da at the step midpoint times the step's change in a.

    ``a_path`` holds the S+1 layer activations along the input path and
    ``a_mid`` the S activations at the step midpoints.
    """
    _, g = head_grads(view, a_mid, target)
    return (g * np.diff(a_path, axis=0)).sum(axis=0)


def conductance_path(view: LayerView, input_baseline=None, steps: int = 32) -> tuple[np.ndarray, np.ndarray]:
    if steps < 1:
        raise ConfigError("conductance needs steps >= 1")
    x = np.asarray(view.x, dtype=np.float64)
    xb = np.zeros_like(x) if input_baseline is None else np.broadcast_to(input_baseline, x.shape)
    ends = np.arange(steps + 1) / steps
    mids = (np.arange(1, steps + 1) - 0.5) / steps
    shape = (-1,) + (1,) * x.ndim
    path_x = xb + ends.reshape(shape) * (x - xb)
    mid_x = xb + mids.reshape(shape) * (x - xb)
    a_path = np.array(view.layer(path_x).data).reshape(steps + 1, -1)
    a_mid = np.array(view.layer(mid_x).data).reshape(steps, -1)
    return a_path, a_mid


def attr_layer_conductance(view: LayerView, input_baseline=None, steps: int = 32,
                           target: int | None = None) -> AttributionVector:
    """Layer conductance along the straight input path from ``input_baseline`` to x."""
    t = _target(view, target)
    a_path, a_mid = conductance_path(view, input_baseline, steps)
    phi = conductance_from_path(view, a_path, a_mid, t)
    return AttributionVector(phi, Method.CONDUCTANCE, target_class=t, sample_id=view.sample_id)


MAX_EXACT_UNITS = 12


def attr_shapley_exact(view: LayerView, baseline=None, target: int | None = None) -> AttributionVector:
    """Exact Shapley values by enumerating all 2^d coalitions.

    Units outside a coalition are set to the baseline.
    """
    t = _target(view, target)
    a, b = view.activations, _baseline(view, baseline)
    d = a.size
    if d > MAX_EXACT_UNITS:
        raise ScaleError(f"exact Shapley needs d <= {MAX_EXACT_UNITS} (got {d}); use attr_gradient_shap")
    masks = np.array(list(itertools.product((0, 1), repeat=d)), dtype=bool)[:, ::-1]
    values = view.output(np.where(masks, a, b))[:, t]
    codes = masks @ (1 << np.arange(d))
    v = np.empty(1 << d)
    v[codes] = values
    weights = [math.factorial(k) * math.factorial(d - k - 1) / math.factorial(d) for k in range(d)]
    phi = np.zeros(d)
    sizes = masks.sum(axis=1)
    for i in range(d):
        without = ~masks[:, i]
        c = codes[without]
        phi[i] = np.sum(np.array(weights)[sizes[without]] * (v[c | (1 << i)] - v[c]))
    return AttributionVector(phi, Method.SHAPLEY, target_class=t, sample_id=view.sample_id)


def attribute(view: LayerView, method: Method | str, target: int | None = None, *,
              baseline=None, input_baseline=None, steps: int = 32, n_samples: int = 64,
              sigma: float | None = None, seed: int = 0) -> AttributionVector:
    """Dispatch one of the attribution methods by name."""
    method = Method(method)
    if method is Method.ACTIVATION:
        return attr_activation(view, target)
    if method is Method.GRAD_TIMES_ACT:
        return attr_grad_times_act(view, target)
    if method is Method.INTEGRATED_GRAD:
        return attr_integrated_gradients(view, baseline, steps, target)
    if method is Method.GRAD_SHAP:
        return attr_gradient_shap(view, baseline, sigma, n_samples, seed, target)
    if method is Method.ABLATION:
        return attr_feature_ablation(view, baseline, None, target)
    if method is Method.CONDUCTANCE:
        return attr_layer_conductance(view, input_baseline, steps, target)
    return attr_shapley_exact(view, baseline, target)


def write_attribution_csv(path, vectors: Iterable[AttributionVector]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "method", "level", "unit_index", "value"])
        for vec in vectors:
            for i, v in enumerate(vec.values):
                w.writerow([vec.sample_id, Method(vec.method).value, Level(vec.level).value, i, repr(float(v))])
