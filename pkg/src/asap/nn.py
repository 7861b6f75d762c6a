"""Neural building blocks: parameter store, MLP heads, sinusoidal positions,
causal multi-head attention, and the unidirectional encoder stack.

The same encoder architecture serves both the turn-level stack (over utterance
vectors) and the score-level stack (over soft-score embeddings). Each layer
applies the double-residual arithmetic ``FFN(attn + x) + attn + x`` with a
post-norm after each residual sum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    """Invalid or mutually inconsistent configuration values."""


@dataclass
class EncoderConfig:
    model_dim: int = 64
    num_heads: int = 4
    num_layers: int = 2
    ffn_dim: int | None = None  # defaults to 4 * model_dim
    dropout_p: float = 0.1

    def __post_init__(self):
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.model_dim
        if min(self.model_dim, self.num_heads, self.num_layers, self.ffn_dim) < 1:
            raise ConfigError("encoder dimensions and layer counts must be >= 1")
        if self.model_dim % self.num_heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}"
            )
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    def to_dict(self) -> dict:
        return {
            "model_dim": self.model_dim,
            "num_heads": self.num_heads,
            "num_layers": self.num_layers,
            "ffn_dim": self.ffn_dim,
            "dropout_p": self.dropout_p,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


class ParamStore:
    """Flat, insertion-ordered map of named parameter tensors.

    In "init" mode, ``get`` creates tensors from the seeded rng; in "load" mode
    (checkpoint restore) it hands back the preloaded tensor and treats any
    missing name or shape mismatch as configuration drift.
    """

    def __init__(self, rng=None, loaded: dict[str, Tensor] | None = None):
        if (rng is None) == (loaded is None):
            raise ConfigError("ParamStore needs exactly one of rng (init) or loaded (restore)")
        self.rng = rng
        self._loaded = loaded
        self.tensors: dict[str, Tensor] = {}

    def get(self, name: str, shape: tuple, init: str = "uniform", fan_in: int | None = None) -> Tensor:
        if name in self.tensors:
            raise ConfigError(f"duplicate parameter name {name!r}")
        if self._loaded is not None:
            if name not in self._loaded:
                raise ConfigError(f"checkpoint is missing parameter {name!r} (config drift)")
            t = self._loaded[name]
            if t.data.shape != tuple(shape):
                raise ConfigError(
                    f"checkpoint shape {t.data.shape} for {name!r} does not match expected {tuple(shape)}"
                )
        else:
            if init == "uniform":
                limit = 1.0 / math.sqrt(fan_in if fan_in else shape[0])
                data = self.rng.uniform(-limit, limit, size=shape)
            elif init == "normal":
                data = self.rng.normal(size=shape)
            elif init == "zeros":
                data = np.zeros(shape)
            elif init == "ones":
                data = np.ones(shape)
            else:
                raise ConfigError(f"unknown init {init!r}")
            t = Tensor(data, requires_grad=True)
        self.tensors[name] = t
        return t

    def finish_load(self):
        """After building in load mode, reject unclaimed checkpoint entries."""
        if self._loaded is not None:
            extra = set(self._loaded) - set(self.tensors)
            if extra:
                raise ConfigError(f"checkpoint has unexpected parameters: {sorted(extra)}")


class Linear:
    def __init__(self, store: ParamStore, name: str, in_dim: int, out_dim: int):
        self.w = store.get(f"{name}.w", (in_dim, out_dim), fan_in=in_dim)
        self.b = store.get(f"{name}.b", (out_dim,), init="uniform", fan_in=in_dim)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.w), self.b)


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, dim: int, eps: float = 1e-5):
        self.gain = store.get(f"{name}.gain", (dim,), init="ones")
        self.bias = store.get(f"{name}.bias", (dim,), init="zeros")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, eps=self.eps)


class MlpHead:
    """Single-hidden-layer ReLU MLP, dropout on the hidden activation."""

    def __init__(self, store: ParamStore, name: str, in_dim: int, hidden_dim: int,
                 out_dim: int, dropout_p: float = 0.0):
        self.lin1 = Linear(store, f"{name}.1", in_dim, hidden_dim)
        self.lin2 = Linear(store, f"{name}.2", hidden_dim, out_dim)
        self.dropout_p = dropout_p

    def __call__(self, x: Tensor, train: bool = False, rng=None) -> Tensor:
        h = T.relu(self.lin1(x))
        h = T.dropout(h, self.dropout_p, rng=rng, train=train)
        return self.lin2(h)


# positional encodings ---------------------------------------------------

_PE_BASE = 10000.0
_pe_cache: dict[tuple[int, int], np.ndarray] = {}


def positional_encoding(position: int, dim: int) -> np.ndarray:
    """Sinusoidal position vector for a 1-based sequence position."""
    if position < 1:
        raise ValueError(f"positions are 1-based, got {position}")
    pe = np.zeros(dim)
    even = np.arange(0, dim, 2)
    angles = position / np.power(_PE_BASE, even / dim)
    pe[even] = np.sin(angles)
    odd = even + 1
    odd = odd[odd < dim]
    pe[odd] = np.cos(angles[: len(odd)])
    return pe


def positional_matrix(length: int, dim: int) -> np.ndarray:
    """Rows ``positional_encoding(1..length, dim)``, cached per (length, dim)."""
    key = (length, dim)
    if key not in _pe_cache:
        _pe_cache[key] = np.stack([positional_encoding(p, dim) for p in range(1, length + 1)])
    return _pe_cache[key]


_mask_cache: dict[int, np.ndarray] = {}


def causal_mask(length: int) -> np.ndarray:
    """Additive attention mask: 0 on/below the diagonal, -1e9 above.

    -1e9 underflows to an exact zero attention weight after max-subtracted
    softmax, so masked positions contribute nothing, bit for bit.
    """
    if length not in _mask_cache:
        m = np.triu(np.full((length, length), -1e9), k=1)
        _mask_cache[length] = m
    return _mask_cache[length]


class MultiHeadAttention:
    """Causal self-attention with a packed QKV projection."""

    def __init__(self, store: ParamStore, name: str, cfg: EncoderConfig):
        d = cfg.model_dim
        self.num_heads = cfg.num_heads
        self.head_dim = d // cfg.num_heads
        self.dim = d
        self.dropout_p = cfg.dropout_p
        self.qkv = Linear(store, f"{name}.qkv", d, 3 * d)
        self.out = Linear(store, f"{name}.out", d, d)

    def __call__(self, x: Tensor, train: bool = False, rng=None) -> Tensor:
        t = x.data.shape[0]
        d, h, dh = self.dim, self.num_heads, self.head_dim
        qkv = self.qkv(x)  # (t, 3d)
        heads = []
        for part in range(3):
            block = T.take(qkv, (slice(None), slice(part * d, (part + 1) * d)))
            heads.append(T.transpose(T.reshape(block, (t, h, dh)), (1, 0, 2)))  # (h, t, dh)
        q, k, v = heads
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
        scores = T.add(scores, Tensor(causal_mask(t)))
        attn = T.softmax(scores, axis=-1)
        attn = T.dropout(attn, self.dropout_p, rng=rng, train=train)
        ctx = T.matmul(attn, v)  # (h, t, dh)
        merged = T.reshape(T.transpose(ctx, (1, 0, 2)), (t, d))
        return self.out(merged)


class FeedForward:
    def __init__(self, store: ParamStore, name: str, cfg: EncoderConfig):
        self.lin1 = Linear(store, f"{name}.1", cfg.model_dim, cfg.ffn_dim)
        self.lin2 = Linear(store, f"{name}.2", cfg.ffn_dim, cfg.model_dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(T.relu(self.lin1(x)))


class EncoderLayer:
    """One causal encoder layer with the double-residual update.

    ``a = LN1(dropout(attn(x)) + x)`` then ``out = LN2(dropout(ffn(a)) + a)``:
    the FFN input already carries the attention residual and the same sum is
    added back to the FFN output.
    """

    def __init__(self, store: ParamStore, name: str, cfg: EncoderConfig):
        self.attn = MultiHeadAttention(store, f"{name}.attn", cfg)
        self.ln1 = LayerNorm(store, f"{name}.ln1", cfg.model_dim)
        self.ffn = FeedForward(store, f"{name}.ffn", cfg)
        self.ln2 = LayerNorm(store, f"{name}.ln2", cfg.model_dim)
        self.dropout_p = cfg.dropout_p

    def __call__(self, x: Tensor, train: bool = False, rng=None) -> Tensor:
        a = self.attn(x, train=train, rng=rng)
        a = T.dropout(a, self.dropout_p, rng=rng, train=train)
        a = self.ln1(T.add(a, x))
        f = T.dropout(self.ffn(a), self.dropout_p, rng=rng, train=train)
        return self.ln2(T.add(f, a))


class Encoder:
    """Unidirectional encoder: add positional encodings, stack causal layers."""

    def __init__(self, store: ParamStore, name: str, cfg: EncoderConfig):
        self.cfg = cfg
        self.layers = [EncoderLayer(store, f"{name}.l{i}", cfg) for i in range(cfg.num_layers)]

    def __call__(self, rows: Tensor, train: bool = False, rng=None) -> Tensor:
        t = rows.data.shape[0]
        if t < 1:
            raise ValueError("cannot encode an empty sequence")
        h = T.add(rows, Tensor(positional_matrix(t, self.cfg.model_dim)))
        for layer in self.layers:
            h = layer(h, train=train, rng=rng)
        return h
