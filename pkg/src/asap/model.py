"""The satisfaction estimator: turn-level encoding, per-turn satisfaction
head, optional action head, and the self-exciting intensity layer driven by a
score-level encoder over soft score embeddings.

With the intensity layer disabled the model reduces exactly to the base
estimator: softmax head over the turn encoding, nothing else.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import ConfigError, Encoder, EncoderConfig, MlpHead, ParamStore
from .providers import BagOfTokensEncoder, EmbeddingProvider, StoreProvider
from .tensor import Tensor

CKPT_MAGIC = b"ASAPCKPT"
CKPT_VERSION = 1


@dataclass
class ModelConfig:
    num_classes: int = 3
    num_actions: int = 0  # 0 disables the action-recognition head
    dim: int = 64
    turn_encoder: EncoderConfig = field(default_factory=EncoderConfig)
    score_encoder: EncoderConfig = field(default_factory=EncoderConfig)
    mlp_hidden: int = 48
    beta: float = 1.0
    gamma: float = 0.0
    hawkes_enabled: bool = True

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.num_actions < 0:
            raise ConfigError("num_actions must be >= 0")
        if self.beta <= 0:
            raise ConfigError(f"softplus softness must be > 0, got {self.beta}")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.mlp_hidden < 1:
            raise ConfigError("mlp_hidden must be >= 1")
        for name, enc in (("turn", self.turn_encoder), ("score", self.score_encoder)):
            if enc.model_dim != self.dim:
                raise ConfigError(
                    f"{name} encoder dim {enc.model_dim} does not match model dim {self.dim}"
                )
        if self.gamma > 0 and self.num_actions == 0:
            raise ConfigError("gamma > 0 requires num_actions > 0")

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "num_actions": self.num_actions,
            "dim": self.dim,
            "turn_encoder": self.turn_encoder.to_dict(),
            "score_encoder": self.score_encoder.to_dict(),
            "mlp_hidden": self.mlp_hidden,
            "beta": self.beta,
            "gamma": self.gamma,
            "hawkes_enabled": self.hawkes_enabled,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["turn_encoder"] = EncoderConfig.from_dict(d["turn_encoder"])
        d["score_encoder"] = EncoderConfig.from_dict(d["score_encoder"])
        return cls(**d)


def desk_encoder(dim: int = 64, heads: int = 4, layers: int = 2, dropout_p: float = 0.1) -> EncoderConfig:
    return EncoderConfig(model_dim=dim, num_heads=heads, num_layers=layers, dropout_p=dropout_p)


@dataclass
class TurnPrediction:
    p_use: np.ndarray
    predicted_class: int
    intensity: np.ndarray | None = None
    p_uar: np.ndarray | None = None
    contribution: float | None = None


class Model:
    """Builds all parameters in a fixed order on one ParamStore.

    Order: turn encoder, satisfaction head, action head (if any), then the
    intensity branch (Z, score encoder, context MLP, state MLP). The order is
    part of the determinism contract: a fresh rng stream yields identical
    shared weights whether or not the intensity branch exists.
    """

    def __init__(self, config: ModelConfig, provider: EmbeddingProvider, store: ParamStore):
        if provider.dim != config.dim:
            raise ConfigError(
                f"provider dim {provider.dim} does not match model dim {config.dim}"
            )
        self.config = config
        self.provider = provider
        self.store = store
        p = config.turn_encoder.dropout_p

        self.turn_encoder = Encoder(store, "turn_enc", config.turn_encoder)
        self.use_head = MlpHead(store, "use_head", config.dim, config.mlp_hidden,
                                config.num_classes, dropout_p=p)
        self.uar_head = None
        if config.num_actions > 0:
            self.uar_head = MlpHead(store, "uar_head", config.dim, config.mlp_hidden,
                                    config.num_actions, dropout_p=p)
        if config.hawkes_enabled:
            self.Z = store.get("Z", (config.dim, config.num_classes), init="normal")
            self.score_encoder = Encoder(store, "score_enc", config.score_encoder)
            sp = config.score_encoder.dropout_p
            self.ctx_mlp = MlpHead(store, "ctx_mlp", config.dim, config.mlp_hidden,
                                   config.num_classes, dropout_p=sp)
            self.state_mlp = MlpHead(store, "state_mlp", config.dim, config.mlp_hidden,
                                     config.num_classes, dropout_p=sp)

    def parameters(self) -> dict[str, Tensor]:
        return {**self.provider.parameters(), **self.store.tensors}

    def forward_graph(self, dialogue, train: bool = False, rng=None) -> dict:
        """Full differentiable forward pass over one dialogue.

        Returns the per-turn distributions plus the raw intensity-branch score
        matrices needed for losses and contribution analysis.
        """
        if len(dialogue.turns) == 0:
            raise ConfigError(f"dialogue {dialogue.dialogue_id!r} has no turns")
        h = self.provider.embed_dialogue(dialogue)
        c = self.turn_encoder(h, train=train, rng=rng)
        p_use = T.softmax(self.use_head(c, train=train, rng=rng), axis=-1)
        out = {"c": c, "p_use": p_use, "intensity": None, "p_uar": None,
               "ctx_scores": None, "state_scores": None}
        if self.uar_head is not None:
            out["p_uar"] = T.softmax(self.uar_head(c, train=train, rng=rng), axis=-1)
        if self.config.hawkes_enabled:
            v = T.matmul(p_use, T.transpose(self.Z))  # soft score embeddings, (t, d)
            x = self.score_encoder(v, train=train, rng=rng)
            ctx = self.ctx_mlp(c, train=train, rng=rng)
            state = self.state_mlp(x, train=train, rng=rng)
            pre = T.softplus(T.add(ctx, state), beta=self.config.beta)
            out["intensity"] = T.softmax(pre, axis=-1)
            out["ctx_scores"] = ctx
            out["state_scores"] = state
            out["x"] = x
        return out

    def predict(self, dialogue, with_contribution: bool = False) -> list[TurnPrediction]:
        fwd = self.forward_graph(dialogue, train=False)
        p_use = fwd["p_use"].data
        intensity = None if fwd["intensity"] is None else fwd["intensity"].data
        p_uar = None if fwd["p_uar"] is None else fwd["p_uar"].data
        decide = intensity if intensity is not None else p_use
        preds = []
        for t in range(p_use.shape[0]):
            cls = int(np.argmax(decide[t]))
            contrib = None
            if with_contribution and intensity is not None:
                contrib = _contribution_value(
                    fwd["ctx_scores"].data[t, cls], fwd["state_scores"].data[t, cls]
                )
            preds.append(
                TurnPrediction(
                    p_use=p_use[t].copy(),
                    predicted_class=cls,
                    intensity=None if intensity is None else intensity[t].copy(),
                    p_uar=None if p_uar is None else p_uar[t].copy(),
                    contribution=contrib,
                )
            )
        return preds

    def intensity(self, c_t: np.ndarray, x_t: np.ndarray) -> np.ndarray:
        """Intensity vector for one turn from its two encodings (eval mode)."""
        if not self.config.hawkes_enabled:
            raise ConfigError("intensity branch is disabled in this configuration")
        ctx = self.ctx_mlp(Tensor(np.asarray(c_t)[None, :])).data[0]
        state = self.state_mlp(Tensor(np.asarray(x_t)[None, :])).data[0]
        pre = T.softplus(Tensor(ctx + state), beta=self.config.beta)
        return T.softmax(pre, axis=-1).data

    def contribution(self, c_t: np.ndarray, x_t: np.ndarray, cls: int) -> float:
        """Share of the class-cls intensity logit owed to the score history."""
        if not self.config.hawkes_enabled:
            raise ConfigError("contribution requires the intensity branch")
        if not 0 <= cls < self.config.num_classes:
            raise ConfigError(f"class {cls} outside 0..{self.config.num_classes - 1}")
        ctx = self.ctx_mlp(Tensor(np.asarray(c_t)[None, :])).data[0, cls]
        state = self.state_mlp(Tensor(np.asarray(x_t)[None, :])).data[0, cls]
        return _contribution_value(ctx, state)


def _contribution_value(ctx_score: float, state_score: float) -> float:
    # exp(state) / (exp(state) + exp(ctx)), computed as a stable sigmoid
    z = state_score - ctx_score
    if z >= 0:
        return float(1.0 / (1.0 + np.exp(-z)))
    e = np.exp(z)
    return float(e / (1.0 + e))


def build_model(config: ModelConfig, provider: EmbeddingProvider, rng) -> Model:
    return Model(config, provider, ParamStore(rng=rng))


# checkpointing ----------------------------------------------------------


def save_checkpoint(path, model: Model, extra: dict | None = None):
    provider = model.provider
    if isinstance(provider, BagOfTokensEncoder):
        prov_blob = {"kind": "bag", "dim": provider.dim,
                     "vocab": list(provider.vocab)}
    else:
        prov_blob = {"kind": "store", "dim": provider.dim}
    blob = {"model": model.config.to_dict(), "provider": prov_blob}
    if extra:
        blob["extra"] = extra
    blob_bytes = json.dumps(blob, sort_keys=True).encode("utf-8")

    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(blob_bytes)))
        fh.write(blob_bytes)
        for name, tensor in model.parameters().items():
            name_bytes = name.encode("utf-8")
            arr = tensor.data.astype("<f4")
            fh.write(struct.pack("<H", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


class CheckpointError(ValueError):
    """Unreadable checkpoint or checkpoint/configuration mismatch."""


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Raw checkpoint contents: JSON metadata and float32 arrays by name."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, blob_len = struct.unpack_from("<II", data, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    try:
        meta = json.loads(data[off : off + blob_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt metadata blob") from e
    off += blob_len
    arrays: dict[str, np.ndarray] = {}
    while off < len(data):
        try:
            (name_len,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape)
            off += 4 * count
        except (struct.error, ValueError) as e:
            raise CheckpointError(f"{path}: truncated parameter record") from e
        if name in arrays:
            raise CheckpointError(f"{path}: duplicate parameter {name!r}")
        arrays[name] = arr.copy()
    return meta, arrays


def load_checkpoint(path, store_provider: StoreProvider | None = None) -> Model:
    meta, arrays = read_checkpoint(path)
    config = ModelConfig.from_dict(meta["model"])
    prov_blob = meta["provider"]
    tensors = {name: Tensor(arr, requires_grad=True) for name, arr in arrays.items()}

    if prov_blob["kind"] == "bag":
        if "tok_emb" not in tensors:
            raise CheckpointError(f"{path}: bag-of-tokens checkpoint lacks tok_emb")
        vocab = {tok: i for i, tok in enumerate(prov_blob["vocab"])}
        provider: EmbeddingProvider = BagOfTokensEncoder(
            vocab, prov_blob["dim"], matrix=tensors.pop("tok_emb")
        )
    elif prov_blob["kind"] == "store":
        if store_provider is None:
            raise CheckpointError(
                f"{path}: checkpoint expects a file-backed embedding store; pass one"
            )
        if store_provider.dim != prov_blob["dim"]:
            raise CheckpointError(
                f"{path}: store dim {store_provider.dim} != checkpoint dim {prov_blob['dim']}"
            )
        provider = store_provider
    else:
        raise CheckpointError(f"{path}: unknown provider kind {prov_blob['kind']!r}")

    store = ParamStore(loaded=tensors)
    try:
        model = Model(config, provider, store)
        store.finish_load()
    except ConfigError as e:
        raise CheckpointError(f"{path}: {e}") from e
    return model
