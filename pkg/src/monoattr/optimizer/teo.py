"""Transformer explanation optimizer: an attention encoder-decoder over token channels."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .. import autodiff as ad
from ..autodiff import ContractError, Tensor
from ..cohort import SEQ_LEN
from ..optim import restore, snapshot

N_CHANNELS = 7


INITS = ("consensus", "positional", "random", "zeros")


@dataclass
class TeoConfig:
    d_in: int = N_CHANNELS
    d_model: int = 32
    n_heads: int = 4
    n_enc: int = 2
    n_dec: int = 2
    seq_len: int = SEQ_LEN
    init: str = "positional"
    pos_scale: float = 12.0
    channel_weights: tuple[float, ...] = (1 / 6,) * 6 + (0.0,)

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ContractError("d_model must be divisible by n_heads")
        if self.init not in INITS:
            raise ContractError(f"unknown init {self.init!r}")
        if self.init == "consensus" and len(self.channel_weights) != self.d_in:
            raise ContractError("channel_weights needs one entry per input channel")


def _positional_table(T: int, d: int, n_heads: int, scale: float, free: int = 0) -> np.ndarray:
    """Mixed-radix sinusoids, identical in every head.

    Frequency f turns once every base**(f+1) positions, so two distinct
    positions always differ by a wide angle on at least one circle.  With
    query/key maps near the identity this starts attention close to local.
    The last ``free`` dims of each head are left at zero.
    """
    dh = d // n_heads
    n_freq = (dh - free) // 2
    base = int(np.ceil(T ** (1.0 / n_freq))) + 1
    freqs = 2 * np.pi / base ** np.arange(1, n_freq + 1)
    ang = np.arange(T)[:, None] * freqs[None, :]
    head = np.zeros((T, dh))
    head[:, : 2 * n_freq] = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    return scale * np.tile(head, (1, n_heads))


class TeoModel:
    """Inits: ``consensus`` starts near the weighted channel average (local
    attention, content carried in the last dim of each head), ``positional``
    keeps local attention with random read-in/out, ``random`` and ``zeros``
    are plain."""

    def __init__(self, config: TeoConfig | None = None, seed: int = 0):
        self.config = c = config or TeoConfig()
        self.seed = seed
        rng = np.random.default_rng([seed, 606])
        d, s = c.d_model, 1 / np.sqrt(c.d_model)
        dh = d // c.n_heads
        near_identity = c.init in ("consensus", "positional")

        def mat(shape, scale=s, eye=False):
            if c.init == "zeros":
                return np.zeros(shape)
            m = rng.normal(0, scale, shape)
            if eye and near_identity:
                # exact identity for the consensus start: any mixing leaks the large positional code
                return np.eye(shape[0]) + (0.0 if c.init == "consensus" else 0.01) * m
            return m

        p = {"W_in": mat((c.d_in, d)), "W_dec": mat((1, d)), "W_out": mat((d, 1))}
        if c.init == "zeros":
            p["P"] = np.zeros((c.seq_len, d))
        elif c.init == "positional":
            p["P"] = _positional_table(c.seq_len, d, c.n_heads, c.pos_scale)
        elif c.init == "consensus":
            p["P"] = _positional_table(c.seq_len, d, c.n_heads, c.pos_scale, free=2)
            content = np.arange(c.n_heads) * dh + dh - 1
            p["W_in"] *= 0.01
            p["W_in"][:, content] = np.asarray(c.channel_weights)[:, None]
            p["W_out"] = np.zeros((d, 1))
            p["W_out"][content, 0] = 1.0 / c.n_heads
        else:
            p["P"] = rng.normal(0, 0.1, (c.seq_len, d))
        layers = [f"enc{l}" for l in range(c.n_enc)]
        layers += [f"dec{l}.self" for l in range(c.n_dec)] + [f"dec{l}.cross" for l in range(c.n_dec)]
        for name in layers:
            for w in ("wq", "wk", "wv"):
                p[f"{name}.{w}"] = mat((d, d), eye=True)
        self.params = {k: Tensor(v, requires_grad=True) for k, v in p.items()}

    def attention(self, name: str, x: Tensor, context: Tensor | None = None) -> Tensor:
        """Softmax(Q K^T / sqrt(d_h)) V per head, heads concatenated."""
        P, c = self.params, self.config
        kv = x if context is None else context
        B, T, d = (max(x.shape[0], kv.shape[0]),) + x.shape[1:]
        H, dh = c.n_heads, d // c.n_heads

        def heads(t):
            return ad.transpose(ad.reshape(t, (t.shape[0], -1, H, dh)), (0, 2, 1, 3))

        q, k, v = heads(x @ P[f"{name}.wq"]), heads(kv @ P[f"{name}.wk"]), heads(kv @ P[f"{name}.wv"])
        att = ad.softmax((q * (1.0 / np.sqrt(dh))) @ ad.swapaxes(k, -1, -2), axis=-1) @ v
        return ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (B, T, d))

    def forward(self, stacked, decoder_target=None) -> Tensor:
        """Phi_hat (B, T, 1) from stacked channels (B, T, d_in)."""
        P, c = self.params, self.config
        x = ad._lift(stacked)
        if x.ndim != 3 or x.shape[-1] != c.d_in:
            raise ContractError(f"expected (B, T, {c.d_in}) input, got {x.shape}")
        B, T, _ = x.shape
        if T != c.seq_len:
            raise ContractError(f"sequence length must be {c.seq_len}, got {T}")
        h = x @ P["W_in"] + P["P"]
        for l in range(c.n_enc):
            h = self.attention(f"enc{l}", h)
        # a zero decoder input is the same for every batch entry: run it once and broadcast
        y_in = np.zeros((1, T, 1)) if decoder_target is None else decoder_target
        y = ad._lift(y_in) @ P["W_dec"] + P["P"]
        for l in range(c.n_dec):
            y = self.attention(f"dec{l}.self", y)
        for l in range(c.n_dec):
            y = self.attention(f"dec{l}.cross", y, h)
        return y @ P["W_out"]

    __call__ = forward

    def header(self) -> dict:
        cfg = asdict(self.config)
        cfg["channel_weights"] = list(cfg["channel_weights"])
        return {"kind": "teo", "config": cfg, "seed": self.seed}

    def save(self, path) -> None:
        ad.save_arrays(path, self.header(), snapshot(self.params))

    @classmethod
    def load(cls, path) -> "TeoModel":
        header, arrays = ad.load_arrays(path)
        if header.get("kind") != "teo":
            raise ValueError(f"{path}: not a TEO checkpoint")
        cfg = dict(header["config"])
        cfg["channel_weights"] = tuple(cfg["channel_weights"])
        model = cls(TeoConfig(**cfg), header["seed"])
        restore(model.params, arrays)
        return model


def teo_forward(model: TeoModel, stacked_attrs, decoder_target=None) -> Tensor:
    return model.forward(stacked_attrs, decoder_target)


def teo_similarity_loss(phi_hat, phi_bar) -> Tensor:
    """Mean over tokens of the squared error (per batch element, then averaged)."""
    phi_hat = ad._lift(phi_hat)
    phi_bar = np.asarray(phi_bar.data if isinstance(phi_bar, Tensor) else phi_bar, dtype=np.float64)
    if phi_hat.shape != phi_bar.shape:
        raise ContractError(f"shape mismatch {phi_hat.shape} vs {phi_bar.shape}")
    diff = phi_hat - phi_bar
    return ad.mean(diff * diff)
