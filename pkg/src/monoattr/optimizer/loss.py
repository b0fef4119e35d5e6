"""Composite optimizer objective: stability, sparseness, similarity and the diagonal penalty."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..autodiff import ContractError, Tensor
from ..metrics import gini_sparseness_tensor

TERMS = ("ris_term", "ros_term", "sparse_term", "sim_term", "umap_term")


@dataclass
class LossWeights:
    l1: float = 0.1
    l2: float = 0.3
    l3: float = 0.1
    l4: float = 0.5
    l5: float = 0.0
    orientation: str = "literal"  # literal | goal_aligned
    temperature: float = 10.0
    eps: float = 1e-8

    def __post_init__(self):
        if min(self.l1, self.l2, self.l3, self.l4, self.l5) < 0:
            raise ContractError("loss weights must be >= 0")
        if self.orientation not in ("literal", "goal_aligned"):
            raise ContractError(f"unknown loss orientation {self.orientation!r}")


@dataclass
class LossOutput:
    total: Tensor
    components: dict[str, float]
    flags: tuple[str, ...] = ()


def smooth_max(values: Tensor, temperature: float = 10.0) -> Tensor:
    """(1/tau) log mean exp(tau v): within [max - log(N)/tau, max]."""
    values = ad._lift(values)
    m = float(values.data.max())
    z = ad.exp((values - m) * temperature)
    return ad.log(ad.mean(z)) * (1.0 / temperature) + m


def _norm(t: Tensor, axis=-1) -> Tensor:
    return ad.sqrt(ad.sum_(t * t, axis=axis) + 1e-24)


def stability(phi_hat: Tensor, phi_pert: Tensor, deltas: np.ndarray, scale: float,
              temperature: float) -> Tensor:
    """scale / ||phi|| * smooth-max_j ||phi - phi_j|| / delta_j over the frozen draws."""
    ratios = _norm(phi_hat - phi_pert) / np.maximum(deltas, 1e-12)
    return smooth_max(ratios, temperature) * scale / _norm(phi_hat)


def diagonal_penalty(phi_hat: Tensor, projection: np.ndarray, centre: np.ndarray) -> Tensor:
    """Sum over samples of (u_1 - u_2)^2 with u the frozen 2-D projection."""
    u = (phi_hat - centre) @ projection
    diff = u[:, 0] - u[:, 1]
    return ad.sum_(diff * diff)


def total_loss(phi_hat: Tensor, phi_bar: np.ndarray, weights: LossWeights, phi_pert: Tensor | None = None,
               dx: np.ndarray | None = None, df: np.ndarray | None = None, x_norm=None, f_norm=None,
               projection: tuple[np.ndarray, np.ndarray] | None = None,
               similarity: Tensor | None = None, mask: np.ndarray | None = None) -> LossOutput:
    """Batch-mean composite loss.

    phi_hat (B, T) masked explanations; phi_pert (B, N, T) the same model's
    explanations of the frozen perturbation set with input distances dx and
    output distances df (B, N).  Sparseness counts only ``mask``ed
    (non-pad) positions when given.  ``similarity`` replaces the MSE term
    (the diffusion model supplies its denoising loss here).
    """
    w = weights
    phi_hat = ad._lift(phi_hat)
    B = phi_hat.shape[0]
    flags: list[str] = []
    zero = Tensor(0.0)
    parts = {k: zero for k in TERMS}

    if similarity is None:
        diff = phi_hat - np.asarray(phi_bar, dtype=np.float64)
        similarity = ad.mean(diff * diff)
    parts["sim_term"] = similarity * w.l4

    gini = ad.mean(gini_sparseness_tensor(phi_hat, mask))
    if w.orientation == "literal":
        parts["sparse_term"] = gini * w.l3
    else:
        parts["sparse_term"] = (1.0 - gini) * w.l3

    if phi_pert is not None and (w.l1 or w.l2):
        ris_terms, ros_terms = [], []
        for b in range(B):
            for key, deltas, scale, lam, out in (("ris", dx, x_norm, w.l1, ris_terms),
                                                 ("ros", df, f_norm, w.l2, ros_terms)):
                if not lam:
                    continue
                m = stability(phi_hat[b], phi_pert[b], np.asarray(deltas[b]), float(scale[b]), w.temperature)
                if w.orientation == "goal_aligned":
                    out.append(m * lam)
                elif m.data < w.eps:
                    flags.append(f"{key}_inverse_guard")
                    out.append(Tensor(lam / w.eps))
                else:
                    out.append(lam / m)
        if ris_terms:
            parts["ris_term"] = ad.mean(ad.stack(ris_terms))
        if ros_terms:
            parts["ros_term"] = ad.mean(ad.stack(ros_terms))

    if projection is not None and w.l5:
        parts["umap_term"] = diagonal_penalty(phi_hat, *projection) * w.l5

    total = parts["ris_term"]
    for k in TERMS[1:]:
        total = total + parts[k]
    return LossOutput(total, {k: float(v.data) for k, v in parts.items()}, tuple(sorted(set(flags))))


def principal_projection(targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Top-2 principal directions (T, 2) and centre of the training consensus targets."""
    X = np.asarray(targets, dtype=np.float64)
    centre = X.mean(axis=0)
    _, _, vt = np.linalg.svd(X - centre, full_matrices=False)
    comps = np.zeros((2, X.shape[1]))
    comps[: min(2, len(vt))] = vt[:2]
    return comps.T, centre
