"""Training loop and inference for the explanation optimizers."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..explain import ExplanationExample
from ..optim import AdamW
from .deo import DeoConfig, DeoModel, draw_training_noise, deo_q_sample, deo_simple_loss
from .loss import TERMS, LossOutput, LossWeights, principal_projection, total_loss
from .teo import TeoConfig, TeoModel

log = logging.getLogger(__name__)

N_METHODS = 6


class TrainingError(RuntimeError):
    pass


@dataclass
class OptimizerConfig:
    kind: str = "teo"
    lr: float = 2e-4
    steps: int = 200
    batch_size: int = 1
    seed: int = 0
    method_weights: tuple[float, ...] = (1 / 6,) * 6
    deo_t_start: int = 20
    teo: TeoConfig = field(default_factory=TeoConfig)
    deo: DeoConfig = field(default_factory=DeoConfig)

    def __post_init__(self):
        if self.kind not in ("teo", "deo"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.lr < 0 or self.steps < 0 or self.batch_size < 1:
            raise ValueError("lr must be >= 0, steps >= 0, batch_size >= 1")


def build_model(config: OptimizerConfig):
    if config.kind == "teo":
        return TeoModel(config.teo, config.seed)
    return DeoModel(config.deo, config.seed)


def _mix(channels, weights) -> Tensor:
    """Weighted sum of the six method channels of (..., T, 7)."""
    w = np.zeros(channels.shape[-1])
    w[:N_METHODS] = weights
    return ad._lift(channels) @ w


def batch_loss(model, batch: list[ExplanationExample], weights: LossWeights, config: OptimizerConfig,
               projection=None, step_seed: int = 0) -> LossOutput:
    B = len(batch)
    stacked = np.stack([e.stacked for e in batch])
    mask = np.stack([e.mask for e in batch]).astype(np.float64)
    phi_bar = np.stack([e.phi_bar for e in batch])
    N = min(len(e.pert_stacked) for e in batch)
    use_metrics = N > 0 and (weights.l1 or weights.l2)
    pert = np.stack([e.pert_stacked[:N] for e in batch]) if use_metrics else None
    inputs = stacked if pert is None else np.concatenate([stacked, pert.reshape((-1,) + stacked.shape[1:])])
    extra = {}
    if isinstance(model, TeoModel):
        out = model(inputs)[..., 0]
        similarity = None
    else:
        # metric terms act on the one-step x0 estimate, with shared t and noise across the perturbations
        t, noise = draw_training_noise(model.schedule, stacked.shape, step_seed)
        reps = 1 + (N if pert is not None else 0)
        t_all = np.tile(t, reps)
        noise_all = np.tile(noise, (reps, 1, 1))
        x_t = deo_q_sample(model.schedule, inputs, t_all, noise=noise_all)
        out = _mix(model.x0_estimate(x_t, t_all), config.method_weights)
        similarity = deo_simple_loss(model, stacked, draws=(t, noise))
    phi_hat = out[:B] * mask
    if pert is not None:
        phi_pert = ad.reshape(out[B:], (N, B, -1))
        phi_pert = ad.transpose(phi_pert, (1, 0, 2)) * mask[:, None, :]
        extra = dict(phi_pert=phi_pert, dx=np.stack([e.dx[:N] for e in batch]),
                     df=np.stack([e.df[:N] for e in batch]),
                     x_norm=[e.x_norm for e in batch], f_norm=[e.f_norm for e in batch])
    return total_loss(phi_hat, phi_bar, weights, projection=projection, similarity=similarity,
                      mask=mask.astype(bool), **extra)


def evaluate_loss(model, examples, weights, config, projection=None) -> LossOutput:
    with ad.no_grad():
        return batch_loss(model, examples, weights, config, projection, step_seed=config.seed)


def train_optimizer(examples: list[ExplanationExample], weights: LossWeights,
                    config: OptimizerConfig) -> tuple[object, dict]:
    """Fit TEO or DEO on IID explanation examples.

    Returns the model and a record with the per-step curve and the full-set
    loss before and after training.
    """
    if not examples:
        raise TrainingError("no training examples")
    model = build_model(config)
    projection = principal_projection(np.stack([e.phi_bar for e in examples])) if weights.l5 else None
    opt = AdamW(model.params, lr=config.lr, weight_decay=0.0)
    rng = np.random.default_rng([config.seed, 1001])
    initial = evaluate_loss(model, examples, weights, config, projection)
    curve = []
    for step in range(config.steps):
        idx = rng.choice(len(examples), min(config.batch_size, len(examples)), replace=False)
        opt.zero_grad()
        try:
            res = batch_loss(model, [examples[i] for i in sorted(idx)], weights, config, projection,
                             step_seed=int(rng.integers(2 ** 31)))
            res.total.backward()
        except ad.NumericError as exc:
            raise TrainingError(f"optimizer diverged at step {step}: {exc}") from exc
        opt.step()
        curve.append({"step": step, "total": float(res.total.data), **res.components})
    final = evaluate_loss(model, examples, weights, config, projection)
    log.info("%s loss %.4g -> %.4g", config.kind, float(initial.total.data), float(final.total.data))
    return model, {"curve": curve, "initial": float(initial.total.data), "final": float(final.total.data),
                   "initial_components": initial.components, "final_components": final.components,
                   "projection": projection}


def explain(model, stacked: np.ndarray, mask: np.ndarray, config: OptimizerConfig,
            seed: int = 0) -> np.ndarray:
    """Optimized token explanations (B, T) for stacked channel inputs (B, T, 7)."""
    stacked = np.asarray(stacked, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if isinstance(model, TeoModel):
        with ad.no_grad():
            out = model(stacked).data[..., 0]
    else:
        refined = model.refine(stacked, config.deo_t_start, seed)
        out = refined[..., :N_METHODS] @ np.asarray(config.method_weights)
    return out * mask


def write_curve_csv(path, curve: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "total", *TERMS])
        for row in curve:
            w.writerow([row["step"]] + [f"{row[k]:.12g}" for k in ("total", *TERMS)])
