"""Sparse autoencoders over layer activations (Standard, TopK, JumpReLU, Gated)."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .optim import AdamW, restore, snapshot


class SaeTrainingError(RuntimeError):
    pass


class Variant(str, Enum):
    STANDARD = "standard"
    TOPK = "topk"
    JUMPRELU = "jumprelu"
    GATED = "gated"


@dataclass
class SaeTrainConfig:
    variant: str = "topk"
    expansion: int = 32
    k: int = 16
    l1: float = 1e-3
    lr: float = 1e-3
    steps: int = 500
    batch_size: int = 64
    seed: int = 0
    ste_eps: float = 1e-2
    theta_init: float = 0.05

    def __post_init__(self):
        Variant(self.variant)
        if self.lr < 0 or self.steps < 0 or self.batch_size < 1 or self.expansion < 1 or self.k < 1:
            raise ValueError("invalid SAE training configuration")


def topk_mask(z: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k largest entries per row; ties go to the lowest index."""
    z = np.atleast_2d(z)
    k = min(k, z.shape[-1])
    order = np.argsort(-z, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(z.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


class SaeModel:
    def __init__(self, d: int, expansion: int = 32, variant: str = "topk", k: int = 16,
                 seed: int = 0, ste_eps: float = 1e-2, theta_init: float = 0.05):
        self.variant = Variant(variant)
        self.d = d
        self.expansion = expansion
        self.F = d * expansion
        self.k = min(k, self.F)
        self.seed = seed
        self.ste_eps = ste_eps
        rng = np.random.default_rng([seed, 303])
        W = rng.standard_normal((d, self.F))
        W /= np.linalg.norm(W, axis=0, keepdims=True)
        p = {"W": W, "b": np.zeros(d), "W_enc": W.T.copy(), "b_enc": np.zeros(self.F)}
        if self.variant in (Variant.JUMPRELU, Variant.GATED):
            p["theta"] = np.full(self.F, theta_init)
        if self.variant is Variant.GATED:
            p["W_gate"] = W.T.copy()
            p["b_gate"] = np.zeros(self.F)
        self.params = {name: Tensor(v, requires_grad=True) for name, v in p.items()}

    # convenient read-only views
    @property
    def W(self) -> np.ndarray:
        return self.params["W"].data

    @property
    def b(self) -> np.ndarray:
        return self.params["b"].data

    @property
    def W_enc(self) -> np.ndarray:
        return self.params["W_enc"].data

    def preactivation(self, x) -> Tensor:
        x = ad._lift(x)
        return (x - self.params["b"]) @ ad.transpose(self.params["W_enc"]) + self.params["b_enc"]

    def encode_tensor(self, x) -> Tensor:
        P = self.params
        z = self.preactivation(x)
        if self.variant is Variant.STANDARD:
            return ad.relu(z)
        if self.variant is Variant.TOPK:
            mask = topk_mask(z.data, self.k).reshape(z.shape)
            return ad.relu(z) * mask
        if self.variant is Variant.JUMPRELU:
            return z * ad.heaviside_ste(z.detach() - P["theta"], self.ste_eps)
        gate = (ad._lift(x) - P["b"]) @ ad.transpose(P["W_gate"]) + P["b_gate"]
        return ad.relu(z) * ad.heaviside_ste(gate - P["theta"], self.ste_eps)

    def decode_tensor(self, a) -> Tensor:
        return ad._lift(a) @ ad.transpose(self.params["W"]) + self.params["b"]

    def sparsity_penalty(self, x, a: Tensor) -> Tensor:
        P = self.params
        if self.variant is Variant.STANDARD:
            return ad.mean(ad.sum_(ad.abs_(a), axis=-1))
        if self.variant is Variant.JUMPRELU:
            z = self.preactivation(x)
            return ad.mean(ad.sum_(ad.heaviside_ste(z.detach() - P["theta"], self.ste_eps), axis=-1))
        if self.variant is Variant.GATED:
            gate = (ad._lift(x) - P["b"]) @ ad.transpose(P["W_gate"]) + P["b_gate"]
            return ad.mean(ad.sum_(ad.relu(gate), axis=-1))
        return Tensor(0.0)

    def normalize_decoder(self) -> None:
        W = self.params["W"].data
        self.params["W"].data = W / np.maximum(np.linalg.norm(W, axis=0, keepdims=True), 1e-12)
        if "theta" in self.params:
            self.params["theta"].data = np.maximum(self.params["theta"].data, 0.0)

    def encoder_jacobian(self, x: np.ndarray) -> np.ndarray:
        """d a / d x at ``x`` (F x d); inactive features give zero rows."""
        x = np.asarray(x, dtype=np.float64)
        a = encode(self, x)
        # every variant is locally linear in x on its active set; gates are piecewise constant
        active = (a != 0).astype(np.float64)
        return active[:, None] * self.W_enc

    # -- checkpoints -------------------------------------------------------------
    def header(self) -> dict:
        return {"kind": "sae", "variant": self.variant.value, "d": self.d, "F": self.F, "K": self.k,
                "expansion": self.expansion, "seed": self.seed, "ste_eps": self.ste_eps}

    def save(self, path) -> None:
        ad.save_arrays(path, self.header(), snapshot(self.params))

    @classmethod
    def load(cls, path) -> "SaeModel":
        header, arrays = ad.load_arrays(path)
        if header.get("kind") != "sae":
            raise ValueError(f"{path}: not an SAE checkpoint")
        model = cls(header["d"], header["expansion"], header["variant"], header["K"], header["seed"],
                    header["ste_eps"])
        restore(model.params, arrays)
        return model


def encode(model: SaeModel, x) -> np.ndarray:
    return np.array(model.encode_tensor(np.asarray(x, dtype=np.float64)).data)


def decode(model: SaeModel, a) -> np.ndarray:
    return np.array(model.decode_tensor(np.asarray(a, dtype=np.float64)).data)


def reconstruction_mse(model: SaeModel, x: np.ndarray) -> float:
    return float(np.mean(np.sum((decode(model, encode(model, x)) - x) ** 2, axis=-1)))


def sae_train(activations: np.ndarray, config: SaeTrainConfig, on_step=None) -> tuple[SaeModel, dict]:
    """Fit an SAE to rows of ``activations``; returns the model and loss curves.

    ``on_step(step, model)`` runs after each update and decoder renormalisation.
    """
    x = np.asarray(activations, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("activations must be a non-empty (n, d) array")
    model = SaeModel(x.shape[1], config.expansion, config.variant, config.k, config.seed,
                     config.ste_eps, config.theta_init)
    model.params["b"].data = x.mean(axis=0)
    opt = AdamW(model.params, lr=config.lr)
    rng = np.random.default_rng([config.seed, 404])
    curves = {"loss": [], "mse": [], "l0": [], "initial_mse": reconstruction_mse(model, x)}
    use_penalty = model.variant is not Variant.TOPK
    for step in range(config.steps):
        batch = x[rng.integers(0, len(x), min(config.batch_size, len(x)))]
        opt.zero_grad()
        try:
            a = model.encode_tensor(batch)
            err = model.decode_tensor(a) - batch
            mse = ad.mean(ad.sum_(err * err, axis=-1))
            loss = mse + config.l1 * model.sparsity_penalty(batch, a) if use_penalty else mse
            loss.backward()
        except ad.NumericError as exc:
            raise SaeTrainingError(f"SAE training diverged at step {step}: {exc}") from exc
        opt.step()
        model.normalize_decoder()
        if on_step is not None:
            on_step(step, model)
        curves["loss"].append(float(loss.data))
        curves["mse"].append(float(mse.data))
        curves["l0"].append(float(np.mean(np.sum(a.data != 0, axis=-1))))
    curves["final_mse"] = reconstruction_mse(model, x)
    return model, curves


def neuron_polysemanticity(model: SaeModel, tau: float) -> dict:
    """Count features loading on each neuron (|W_ji| > tau) plus per-feature overlap."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    W = model.W
    loads = np.abs(W) > tau
    counts = loads.sum(axis=1)
    cols = W / np.maximum(np.linalg.norm(W, axis=0, keepdims=True), 1e-12)
    cos = np.abs(cols.T @ cols)
    np.fill_diagonal(cos, 0.0)
    return {
        "neuron_counts": counts,
        "monosemantic": counts <= 1,
        "feature_neuron_counts": loads.sum(axis=0),
        "feature_max_overlap": cos.max(axis=1) if cos.size else np.zeros(W.shape[1]),
    }


def synthetic_activations(n: int, d: int = 32, n_atoms: int = 64, active: int = 3,
                          noise: float = 0.01, seed: int = 0) -> np.ndarray:
    """Sparse non-negative mixtures of random unit directions plus small noise."""
    rng = np.random.default_rng([seed, 505])
    atoms = rng.standard_normal((n_atoms, d))
    atoms /= np.linalg.norm(atoms, axis=1, keepdims=True)
    x = np.zeros((n, d))
    for i in range(n):
        idx = rng.choice(n_atoms, active, replace=False)
        x[i] = rng.uniform(0.5, 2.0, active) @ atoms[idx]
    return x + noise * rng.standard_normal((n, d))


def write_feature_dictionary(path, model: SaeModel, top_tokens: dict[int, list[str]]) -> None:
    norms = np.linalg.norm(model.W, axis=0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature_id", "top_activating_tokens", "decoder_norm"])
        for i in range(model.F):
            w.writerow([i, " ".join(top_tokens.get(i, [])), f"{norms[i]:.12f}"])


def config_dict(config: SaeTrainConfig) -> dict:
    return asdict(config)
