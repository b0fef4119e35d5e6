"""Small transformer classifier used as the surrogate model under explanation.

The layer of interest is the output of the final block at the CLS position;
the head reads only that vector.  Pad positions are masked as attention
keys, so computing on the non-pad prefix of a batch gives exactly the same
CLS activations and gradients as the full 512-token sequence.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cohort import PAD_ID, SEQ_LEN, VOCAB_HASH, VOCAB_SIZE, Cohort, Sample
from .optim import AdamW, restore, snapshot

log = logging.getLogger(__name__)

_MASK_FILL = -1e9


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 2e-4
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    patience: int = 5
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.lr < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("lr must be >= 0, epochs >= 0, batch_size >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


@dataclass
class Architecture:
    vocab_size: int = VOCAB_SIZE
    seq_len: int = SEQ_LEN
    d_model: int = 32
    n_heads: int = 4
    n_layers: int = 2
    n_classes: int = 2
    layer_of_interest: int = 1

    def __post_init__(self):
        if not 0 <= self.layer_of_interest < self.n_layers:
            raise ValueError("layer_of_interest must index an existing block")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")


def rms_norm(h: Tensor, eps: float = 1e-5) -> Tensor:
    """Scale the last axis to unit root-mean-square.

    Unlike mean-centring layer norm this is not invariant to adding the same
    constant to every embedding dimension, so per-token gradient sums over
    the embedding axis stay informative.
    """
    return h / ad.sqrt(ad.mean(h * h, axis=-1, keepdims=True) + eps)


class ClassifierModel:
    def __init__(self, arch: Architecture, seed: int = 0):
        self.arch = arch
        self.seed = seed
        rng = np.random.default_rng([seed, 101])
        dm, V = arch.d_model, arch.vocab_size
        p: dict[str, np.ndarray] = {
            "tok_emb": rng.normal(0, 0.5, (V, dm)),
            "pos_emb": rng.normal(0, 0.1, (arch.seq_len, dm)),
            "head_w": rng.normal(0, 0.01, (dm, arch.n_classes)),
            "head_b": np.zeros(arch.n_classes),
        }
        for l in range(arch.n_layers):
            s = 1 / np.sqrt(dm)
            p |= {
                f"l{l}.ln1_g": np.ones(dm), f"l{l}.ln1_b": np.zeros(dm),
                f"l{l}.wq": rng.normal(0, s, (dm, dm)), f"l{l}.wk": rng.normal(0, s, (dm, dm)),
                f"l{l}.wv": rng.normal(0, s, (dm, dm)), f"l{l}.wo": rng.normal(0, s, (dm, dm)),
                f"l{l}.ln2_g": np.ones(dm), f"l{l}.ln2_b": np.zeros(dm),
                f"l{l}.w1": rng.normal(0, s, (dm, 2 * dm)), f"l{l}.b1": np.zeros(2 * dm),
                f"l{l}.w2": rng.normal(0, 1 / np.sqrt(2 * dm), (2 * dm, dm)), f"l{l}.b2": np.zeros(dm),
            }
        self.params = {k: Tensor(v, requires_grad=True) for k, v in p.items()}

    @property
    def d(self) -> int:
        return self.arch.d_model

    # -- forward pieces --------------------------------------------------------
    @staticmethod
    def _prefix(ids: np.ndarray) -> int:
        lengths = (np.asarray(ids) != PAD_ID).sum(axis=-1)
        return max(int(np.max(lengths)), 1)

    def embed(self, ids: np.ndarray) -> np.ndarray:
        """Token embeddings (the differentiable input) over the non-pad prefix."""
        ids = np.atleast_2d(ids)
        L = self._prefix(ids)
        return self.params["tok_emb"].data[ids[:, :L]]

    def _block(self, h: Tensor, l: int, mask_add: np.ndarray) -> Tensor:
        P = self.params
        B, L, dm = h.shape
        H = self.arch.n_heads
        dh = dm // H
        x = rms_norm(h) * P[f"l{l}.ln1_g"] + P[f"l{l}.ln1_b"]

        def heads(t):
            return ad.transpose(ad.reshape(t, (B, L, H, dh)), (0, 2, 1, 3))

        q, k, v = heads(x @ P[f"l{l}.wq"]), heads(x @ P[f"l{l}.wk"]), heads(x @ P[f"l{l}.wv"])
        scores = (q @ ad.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh)) + mask_add
        att = ad.softmax(scores, axis=-1) @ v
        att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (B, L, dm))
        h = h + att @ P[f"l{l}.wo"]
        x = rms_norm(h) * P[f"l{l}.ln2_g"] + P[f"l{l}.ln2_b"]
        return h + ad.relu(x @ P[f"l{l}.w1"] + P[f"l{l}.b1"]) @ P[f"l{l}.w2"] + P[f"l{l}.b2"]

    def hidden_from_embeddings(self, x: Tensor | np.ndarray, ids: np.ndarray) -> Tensor:
        """All-position hidden states of the layer of interest, shape (B, L, d)."""
        x = ad._lift(x)
        ids = np.atleast_2d(ids)
        lead = x.shape[:-2]
        L, dm = x.shape[-2:]
        if x.ndim == 2:
            x = ad.reshape(x, (1, L, dm))
        elif x.ndim > 3:
            x = ad.reshape(x, (-1, L, dm))
        B = x.shape[0]
        keys = ids[:, :L] != PAD_ID
        if keys.shape[0] != B:
            keys = np.broadcast_to(keys[:1], (B, L))
        mask_add = np.where(keys, 0.0, _MASK_FILL)[:, None, None, :]
        h = x + self.params["pos_emb"][:L]
        for l in range(self.arch.layer_of_interest + 1):
            h = self._block(h, l, mask_add)
        return ad.reshape(h, lead + (L, dm)) if len(lead) != 1 else h

    def layer_from_embeddings(self, x: Tensor | np.ndarray, ids: np.ndarray) -> Tensor:
        """CLS activation of the layer of interest, shape (..., d)."""
        h = self.hidden_from_embeddings(x, ids)
        return h[..., 0, :]

    def head(self, a: Tensor | np.ndarray) -> Tensor:
        """Class probabilities from layer activations (..., d) -> (..., C)."""
        return ad.softmax(self.logits_from_layer(a), axis=-1)

    def logits_from_layer(self, a: Tensor | np.ndarray) -> Tensor:
        a = ad._lift(a)
        if self.arch.layer_of_interest != self.arch.n_layers - 1:
            raise NotImplementedError("head must read the final block")
        return a @ self.params["head_w"] + self.params["head_b"]

    def logits(self, ids: np.ndarray) -> Tensor:
        ids = np.atleast_2d(ids)
        x = self.params["tok_emb"]
        L = self._prefix(ids)
        emb = ad.gather(x, ids[:, :L])
        return self.logits_from_layer(self.layer_from_embeddings(emb, ids))

    # -- checkpoints ------------------------------------------------------------
    def state(self) -> dict[str, np.ndarray]:
        return snapshot(self.params)

    def save(self, path) -> None:
        header = {"kind": "classifier", "architecture": asdict(self.arch), "seed": self.seed,
                  "vocab_hash": VOCAB_HASH}
        ad.save_arrays(path, header, self.state())

    @classmethod
    def load(cls, path) -> "ClassifierModel":
        header, arrays = ad.load_arrays(path)
        if header.get("kind") != "classifier":
            raise ValueError(f"{path}: not a classifier checkpoint")
        if header.get("vocab_hash") != VOCAB_HASH:
            raise ValueError(f"{path}: vocabulary mismatch")
        model = cls(Architecture(**header["architecture"]), header["seed"])
        restore(model.params, arrays)
        return model


# -- public operations ----------------------------------------------------------


def predict(model: ClassifierModel, sample: Sample | np.ndarray) -> tuple[np.ndarray, int]:
    ids = np.asarray(sample.tokens if isinstance(sample, Sample) else sample)
    probs = ad.softmax(model.logits(ids), axis=-1).data[0]
    return probs, int(np.argmax(probs))


def predict_batch(model: ClassifierModel, ids: np.ndarray, batch: int = 64) -> np.ndarray:
    out = []
    for i in range(0, len(ids), batch):
        out.append(ad.softmax(model.logits(ids[i:i + batch]), axis=-1).data)
    return np.concatenate(out) if out else np.zeros((0, model.arch.n_classes))


def layer_activations(model: ClassifierModel, sample: Sample | np.ndarray) -> np.ndarray:
    ids = np.asarray(sample.tokens if isinstance(sample, Sample) else sample)
    return model.layer_from_embeddings(model.embed(ids), ids).data[0]


def batch_activations(model: ClassifierModel, ids: np.ndarray, batch: int = 64) -> np.ndarray:
    out = []
    for i in range(0, len(ids), batch):
        chunk = ids[i:i + batch]
        out.append(model.layer_from_embeddings(model.embed(chunk), chunk).data)
    return np.concatenate(out) if out else np.zeros((0, model.d))


def accuracy(model: ClassifierModel, cohort: Cohort) -> float:
    if len(cohort) == 0:
        return float("nan")
    probs = predict_batch(model, cohort.token_matrix)
    return float(np.mean(probs.argmax(axis=1) == cohort.labels))


def _loss(model: ClassifierModel, ids: np.ndarray, labels: np.ndarray) -> Tensor:
    logp = ad.log_softmax(model.logits(ids), axis=-1)
    return -ad.mean(logp[np.arange(len(labels)), labels])


def train_classifier(train: Cohort, val: Cohort, config: TrainConfig,
                     arch: Architecture | None = None) -> tuple[ClassifierModel, dict]:
    arch = arch or Architecture(n_classes=train.n_classes)
    model = ClassifierModel(arch, config.seed)
    opt = AdamW(model.params, lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng([config.seed, 202])
    ids, labels = train.token_matrix, train.labels
    best = (np.inf, snapshot(model.params))
    history = []
    stale = 0
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(ids))
        for i in range(0, len(order), config.batch_size):
            b = order[i:i + config.batch_size]
            opt.zero_grad()
            try:
                loss = _loss(model, ids[b], labels[b])
                loss.backward()
            except ad.NumericError as exc:
                raise TrainingError(f"classifier diverged at step {step}: {exc}") from exc
            opt.step()
            step += 1
        val_loss = float(_loss(model, val.token_matrix, val.labels).data) if len(val) else 0.0
        val_acc = accuracy(model, val)
        history.append({"epoch": epoch, "val_loss": val_loss, "val_acc": val_acc})
        log.info("epoch %d val_loss %.4f val_acc %.3f", epoch, val_loss, val_acc)
        if val_loss < best[0] - 1e-9:
            best, stale = (val_loss, snapshot(model.params)), 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    if config.epochs:
        restore(model.params, best[1])
    metrics = {"history": history, "val_accuracy": accuracy(model, val),
               "train_accuracy": accuracy(model, train), "steps": step}
    return model, metrics


def layer_view(model: ClassifierModel, sample: Sample | np.ndarray, sample_id: int | str = 0):
    """Split the classifier at the layer of interest for one sample.

    The view's input is the sample's token embeddings over its non-pad prefix.
    """
    from .attribution import LayerView

    ids = np.asarray(sample.tokens if isinstance(sample, Sample) else sample)
    return LayerView(x=model.embed(ids)[0], layer=lambda x: model.layer_from_embeddings(x, ids),
                     head=model.head, sample_id=sample_id)
