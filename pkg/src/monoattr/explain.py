"""Per-sample token explanations for the six methods, with or without the SAE.

Everything past the attributed layer is cheap, so methods are evaluated at
the actual activation and at perturbed activations a' = a + delta.  Layer
scores reach tokens through the token gradient matrix G taken at the
sample (``phi @ G``); with an SAE the feature scores psi first go back to
the layer as J_enc^T psi.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .attribution import (SIX_METHODS, LayerView, Method, attr_activation, attr_feature_ablation,
                          attr_grad_times_act, attr_gradient_shap, attr_integrated_gradients,
                          conductance_from_path, conductance_path)
from .classifier import ClassifierModel, layer_view
from .cohort import PAD_ID, VOCAB_SIZE, Sample
from .propagation import token_gradient_matrix
from .sae import SaeModel, encode

# Ablation scores f(ablated) - f(x) run opposite to every other method, so it
# enters the stacked channels and the consensus with its sign flipped.
# Token scores carry arbitrary signs (embedding-axis sums), so channels are
# scaled by their largest magnitude rather than min-max shifted, which would
# rank strong negative tokens as least important.
METHOD_SIGNS = {m: (-1.0 if m is Method.ABLATION else 1.0) for m in SIX_METHODS}


@dataclass
class MethodSettings:
    steps: int = 32
    shap_samples: int = 64
    seed: int = 0


class SampleExplainer:
    """The six methods for one sample, at its own or a perturbed activation."""

    def __init__(self, model: ClassifierModel, sample: Sample, sample_id=0, sae: SaeModel | None = None,
                 settings: MethodSettings | None = None):
        self.sample = sample
        self.sample_id = sample_id
        self.sae = sae
        self.settings = settings or MethodSettings()
        self.view = layer_view(model, sample, sample_id)
        self.a = self.view.activations.copy()
        self.head = model.head
        self.target = self.view.predicted_class()
        self.G = token_gradient_matrix(self.view)
        self.mask = np.asarray(sample.tokens) != PAD_ID
        self._path = conductance_path(self.view, None, self.settings.steps)

    # -- predictions ------------------------------------------------------------
    def probs(self, a) -> np.ndarray:
        return np.asarray(self.head(np.asarray(a, dtype=np.float64)).data)

    # -- attributions -----------------------------------------------------------
    def _space_view(self, a: np.ndarray) -> LayerView:
        if self.sae is None:
            return LayerView(x=self.view.x, layer=self.view.layer, head=self.head, _a=a)
        sae = self.sae
        return LayerView(x=self.view.x, layer=lambda t: sae.encode_tensor(self.view.layer(t)),
                         head=lambda s: self.head(sae.decode_tensor(s)), _a=encode(sae, a))

    def layer_scores(self, method: Method, a=None) -> np.ndarray:
        """Scores in the attributed space (layer units, or SAE features)."""
        a = self.a if a is None else np.asarray(a, dtype=np.float64)
        v, t, st = self._space_view(a), self.target, self.settings
        if method is Method.ACTIVATION:
            return attr_activation(v, t).values
        if method is Method.GRAD_TIMES_ACT:
            return attr_grad_times_act(v, t).values
        if method is Method.INTEGRATED_GRAD:
            return attr_integrated_gradients(v, None, st.steps, t).values
        if method is Method.GRAD_SHAP:
            return attr_gradient_shap(v, None, None, st.shap_samples, st.seed, t).values
        if method is Method.ABLATION:
            return attr_feature_ablation(v, None, None, t).values
        if method is Method.CONDUCTANCE:
            # the input path shifted by the activation perturbation
            a_path, a_mid = self._path
            shift = a - self.a
            a_path, a_mid = a_path + np.linspace(0, 1, len(a_path))[:, None] * shift, \
                a_mid + ((np.arange(len(a_mid)) + 0.5) / len(a_mid))[:, None] * shift
            if self.sae is not None:
                a_path, a_mid = encode(self.sae, a_path), encode(self.sae, a_mid)
            return conductance_from_path(v, a_path, a_mid, t)
        raise ValueError(f"{method} is not one of the six aggregated methods")

    def to_tokens(self, scores: np.ndarray, a=None) -> np.ndarray:
        if self.sae is None:
            return scores @ self.G
        a = self.a if a is None else a
        return (self.sae.encoder_jacobian(a).T @ scores) @ self.G

    def token_scores(self, method: Method, a=None) -> np.ndarray:
        return self.to_tokens(self.layer_scores(method, a), a)

    def all_token_scores(self, a=None) -> dict[Method, np.ndarray]:
        return {m: self.token_scores(m, a) for m in SIX_METHODS}

    # -- optimizer inputs -------------------------------------------------------
    def input_channel(self) -> np.ndarray:
        ids = np.asarray(self.sample.tokens, dtype=np.float64)
        return np.where(self.mask, ids / (VOCAB_SIZE - 1), 0.0)

    def stack(self, scores: dict[Method, np.ndarray]) -> np.ndarray:
        """(T, 7): max-|phi| scaled signed method channels, then the input channel."""
        return stack_channels(scores, self.mask, self.input_channel())


def stack_channels(scores: dict, mask: np.ndarray, input_channel: np.ndarray) -> np.ndarray:
    cols = []
    for m in SIX_METHODS:
        v = METHOD_SIGNS[m] * np.asarray(scores[m], dtype=np.float64)
        cols.append(_masked_maxabs(v, mask))
    cols.append(input_channel)
    return np.stack(cols, axis=1)


def _masked_maxabs(v: np.ndarray, mask: np.ndarray) -> np.ndarray:
    out = np.zeros_like(v)
    out[mask] = metrics.maxabs(v[mask])
    return out


def consensus(stacked: np.ndarray, weights, mask: np.ndarray) -> np.ndarray:
    """Weighted consensus of the six (already signed and scaled) channels."""
    phis = [stacked[mask, k] for k in range(len(SIX_METHODS))]
    out = np.zeros(stacked.shape[0])
    out[mask] = metrics.aggregate_weighted(phis, weights, names=[m.value for m in SIX_METHODS],
                                           normalize="maxabs")
    return out


@dataclass
class ExplanationExample:
    """One sample's optimizer inputs plus a frozen perturbation set."""

    sample_id: object
    stacked: np.ndarray           # (T, 7)
    phi_bar: np.ndarray           # (T,)
    mask: np.ndarray              # (T,) bool
    signal: np.ndarray            # (T,) bool, planted positions
    target: int
    label: int
    x_norm: float                 # ||a||
    f_norm: float                 # ||f(a)||
    pert_stacked: np.ndarray      # (N, T, 7)
    dx: np.ndarray                # (N,) ||a - a'||
    df: np.ndarray                # (N,) ||f(a) - f(a')||
    scores: dict = field(default_factory=dict, repr=False)  # method -> token scores at a


def perturbations(explainer: SampleExplainer, config: metrics.StabilityConfig) -> tuple[np.ndarray, np.ndarray]:
    """Neighbourhood draws around a and a mask of those keeping the prediction."""
    draws = metrics.neighborhood(explainer.a, config)
    probs = explainer.probs(draws)
    return draws, probs.argmax(axis=-1) == explainer.target


def build_example(explainer: SampleExplainer, weights, config: metrics.StabilityConfig,
                  n_loss: int) -> ExplanationExample:
    scores = explainer.all_token_scores()
    stacked = explainer.stack(scores)
    draws, keep = perturbations(explainer, config)
    kept = draws[keep][:n_loss]
    fa = explainer.probs(explainer.a)
    pert = np.stack([explainer.stack(explainer.all_token_scores(ap)) for ap in kept]) if len(kept) \
        else np.zeros((0,) + stacked.shape)
    return ExplanationExample(
        sample_id=explainer.sample_id, stacked=stacked,
        phi_bar=consensus(stacked, weights, explainer.mask), mask=explainer.mask,
        signal=explainer.sample.signal_mask(), target=explainer.target, label=explainer.sample.label,
        x_norm=float(np.linalg.norm(explainer.a)), f_norm=float(np.linalg.norm(fa)),
        pert_stacked=pert, dx=np.linalg.norm(kept - explainer.a, axis=1),
        df=np.linalg.norm(explainer.probs(kept) - fa, axis=1) if len(kept) else np.zeros(0),
        scores=scores)

