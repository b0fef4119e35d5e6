"""Moving attributions between SAE features, the encoder layer and input tokens."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attribution import AttributionVector, Level, LayerView, Method, attribute
from .autodiff import ContractError, Tensor
from .cohort import SEQ_LEN
from .sae import SaeModel


@dataclass
class DualAttribution:
    psi: np.ndarray | None = None
    phi_enc: np.ndarray | None = None
    phi_input: np.ndarray | None = None


def _reduce_tokens(g: np.ndarray, x_ndim: int, pad_to: int | None) -> np.ndarray:
    """Sum over the embedding axis and zero-fill the pad tail."""
    if x_ndim < 2:
        return g
    per_token = g.sum(axis=-1)
    if pad_to is None or per_token.shape[-1] >= pad_to:
        return per_token
    out = np.zeros(per_token.shape[:-1] + (pad_to,))
    out[..., : per_token.shape[-1]] = per_token
    return out


def feature_to_encoder(sae: SaeModel, psi) -> np.ndarray:
    psi = np.asarray(psi, dtype=np.float64)
    if psi.shape != (sae.F,):
        raise ContractError(f"psi must have length F={sae.F}, got {psi.shape}")
    return sae.W @ psi


def encoder_to_input(view: LayerView, phi_enc, pad_to: int | None = SEQ_LEN) -> np.ndarray:
    """(dx/dx_input)^T phi_enc, reduced to one signed score per token."""
    phi_enc = np.asarray(phi_enc, dtype=np.float64)
    a = view.activations
    if phi_enc.shape != a.shape:
        raise ContractError(f"phi_enc must have shape {a.shape}, got {phi_enc.shape}")
    x = np.asarray(view.x)
    if not np.any(phi_enc):
        return _reduce_tokens(np.zeros_like(x), x.ndim, pad_to)
    g = ad.vjp(view.layer, x, phi_enc)
    return _reduce_tokens(g, x.ndim, pad_to)


def chained_token_attribution(view: LayerView, sae: SaeModel, psi,
                              pad_to: int | None = SEQ_LEN) -> np.ndarray:
    """Sum_i psi_i d a_i / d x_input through the SAE encoder and the model."""
    psi = np.asarray(psi, dtype=np.float64)
    if psi.shape != (sae.F,):
        raise ContractError(f"psi must have length F={sae.F}, got {psi.shape}")
    x = np.asarray(view.x)
    if not np.any(psi):
        return _reduce_tokens(np.zeros_like(x), x.ndim, pad_to)
    g = ad.vjp(lambda t: sae.encode_tensor(view.layer(t)), x, psi)
    return _reduce_tokens(g, x.ndim, pad_to)


def token_gradient_matrix(view: LayerView, pad_to: int | None = SEQ_LEN) -> np.ndarray:
    """G[i, t] = sum_e d a_i / d x_input[t, e]; one backward pass over d copies.

    Any layer-level vector phi then maps to tokens as ``phi @ G``.
    """
    x = np.asarray(view.x, dtype=np.float64)
    d = view.activations.size
    copies = Tensor(np.broadcast_to(x, (d,) + x.shape).copy(), requires_grad=True)
    a = view.layer(copies)
    picked = ad.sum_(a * np.eye(d))
    picked.backward()
    if x.ndim < 2:
        return copies.grad
    return _reduce_tokens(copies.grad, x.ndim, pad_to)


def sae_layer_view(view: LayerView, sae: SaeModel) -> LayerView:
    """The composed model with SAE features as the attributed layer."""
    return LayerView(x=view.x, layer=lambda t: sae.encode_tensor(view.layer(t)),
                     head=lambda a: view.head(sae.decode_tensor(a)), sample_id=view.sample_id)


def attribute_in_sae_space(view: LayerView, sae: SaeModel, method: Method | str,
                           target: int | None = None, **kwargs) -> AttributionVector:
    """Run an attribution method with SAE features as the layer of f . decode . encode."""
    sview = sae_layer_view(view, sae)
    if target is None:
        target = view.predicted_class()
    res = attribute(sview, method, target, **kwargs)
    res.level = Level.SAE_FEATURE
    method = Method(method)
    gradient_based = method in (Method.GRAD_TIMES_ACT, Method.INTEGRATED_GRAD, Method.GRAD_SHAP,
                                Method.CONDUCTANCE)
    if gradient_based and not np.any(res.values) and np.any(sview.activations):
        res.flags = res.flags + ("zero_gradient_at_operating_point",)
    return res


def dual_attribution(view: LayerView, sae: SaeModel, psi) -> DualAttribution:
    phi_enc = feature_to_encoder(sae, psi)
    return DualAttribution(np.asarray(psi, dtype=np.float64), phi_enc, encoder_to_input(view, phi_enc))
