"""Per-turn utterance vectors behind a pluggable interface.

Two providers: a read-only file-backed store of precomputed vectors, and a
trainable bag-of-tokens encoder whose embedding matrix lives in the model's
gradient graph.
"""

from __future__ import annotations

import re
import struct
from abc import ABC, abstractmethod
from collections import Counter

import numpy as np

from .tensor import Tensor
from . import tensor as T

MAGIC = b"ASAPEMB1"
FORMAT_VERSION = 1
UNK = "<unk>"
MAX_TURN_TOKENS = 512


class ProviderError(LookupError):
    """Missing embedding record or malformed embedding file."""


class EmbeddingProvider(ABC):
    """Maps each dialogue turn to a fixed-width vector h_t."""

    dim: int
    trainable: bool = False

    @abstractmethod
    def embed_dialogue(self, dialogue) -> Tensor:
        """Rows h_1..h_t for every turn of the dialogue, shape (t, dim)."""

    def embed_turn(self, dialogue_id: str, turn_index: int, system: str, user: str) -> Tensor:
        raise NotImplementedError

    def parameters(self) -> dict[str, Tensor]:
        return {}

    def missing_keys(self, dialogues) -> list:
        return []


def tokenize(text: str) -> list[str]:
    return re.findall(r"[a-z0-9]+", text.lower())


def turn_tokens(system: str, user: str) -> list[str]:
    # per-turn token budget mirrors the usual 512-token encoder limit
    return tokenize(system + " " + user)[:MAX_TURN_TOKENS]


def build_vocabulary(train_dialogues, min_count: int = 2) -> dict[str, int]:
    """Token -> index, ordered by (count desc, token asc); UNK fixed at 0."""
    if not train_dialogues:
        raise ProviderError("cannot build a vocabulary from an empty split")
    counts = Counter()
    for d in train_dialogues:
        for t in d.turns:
            counts.update(turn_tokens(t.system, t.user))
    kept = sorted(
        (tok for tok, c in counts.items() if c >= min_count),
        key=lambda tok: (-counts[tok], tok),
    )
    vocab = {UNK: 0}
    for tok in kept:
        vocab[tok] = len(vocab)
    return vocab


class BagOfTokensEncoder(EmbeddingProvider):
    """h_t = mean of token-embedding rows over the turn's tokens.

    The pooling is expressed as one constant (t x vocab) averaging matrix
    multiplied into the embedding table, so gradients reach the table through
    a single graph node per dialogue.
    """

    trainable = True

    def __init__(self, vocab: dict[str, int], dim: int, rng=None, matrix: Tensor | None = None):
        if (rng is None) == (matrix is None):
            raise ProviderError("need exactly one of rng (init) or matrix (restore)")
        self.vocab = vocab
        self.dim = dim
        if matrix is None:
            matrix = Tensor(rng.normal(size=(len(vocab), dim)), requires_grad=True)
        if matrix.data.shape != (len(vocab), dim):
            raise ProviderError(
                f"embedding matrix shape {matrix.data.shape} does not match "
                f"(vocab {len(vocab)}, dim {dim})"
            )
        self.matrix = matrix

    def parameters(self) -> dict[str, Tensor]:
        return {"tok_emb": self.matrix}

    def _pool_matrix(self, turns) -> np.ndarray:
        w = np.zeros((len(turns), len(self.vocab)))
        for i, (system, user) in enumerate(turns):
            toks = turn_tokens(system, user)
            if not toks:
                continue  # empty turn pools to the zero vector
            for tok in toks:
                w[i, self.vocab.get(tok, 0)] += 1.0
            w[i] /= len(toks)
        return w

    def embed_dialogue(self, dialogue) -> Tensor:
        w = self._pool_matrix([(t.system, t.user) for t in dialogue.turns])
        return T.matmul(Tensor(w), self.matrix)

    def embed_turn(self, dialogue_id: str, turn_index: int, system: str, user: str) -> Tensor:
        w = self._pool_matrix([(system, user)])
        return T.reshape(T.matmul(Tensor(w), self.matrix), (self.dim,))


class EmbeddingStore:
    """File-backed map (dialogue-id, 1-based turn-index) -> float32 vector."""

    def __init__(self, dim: int, records: dict | None = None):
        if dim < 1:
            raise ProviderError("embedding dim must be >= 1")
        self.dim = dim
        self.records: dict[tuple[str, int], np.ndarray] = {}
        for key, vec in (records or {}).items():
            self.put(key[0], key[1], vec)

    def put(self, dialogue_id: str, turn_index: int, vec):
        vec = np.asarray(vec, dtype="<f4")
        if vec.shape != (self.dim,):
            raise ProviderError(
                f"vector for ({dialogue_id!r}, {turn_index}) has shape {vec.shape}, "
                f"expected ({self.dim},)"
            )
        if not np.all(np.isfinite(vec)):
            raise ProviderError(f"non-finite vector for ({dialogue_id!r}, {turn_index})")
        self.records[(dialogue_id, int(turn_index))] = vec

    def get(self, dialogue_id: str, turn_index: int) -> np.ndarray:
        key = (dialogue_id, int(turn_index))
        if key not in self.records:
            raise ProviderError(f"no embedding record for ({dialogue_id!r}, turn {turn_index})")
        return self.records[key]

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IIQ", FORMAT_VERSION, self.dim, len(self.records)))
            for (did, turn), vec in self.records.items():
                id_bytes = did.encode("utf-8")
                if len(id_bytes) > 0xFFFF:
                    raise ProviderError(f"dialogue id too long to store: {did[:32]!r}...")
                fh.write(struct.pack("<H", len(id_bytes)))
                fh.write(id_bytes)
                fh.write(struct.pack("<I", turn))
                fh.write(vec.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "EmbeddingStore":
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:8] != MAGIC:
            raise ProviderError(f"{path}: not an embedding store (bad magic)")
        if len(blob) < 24:
            raise ProviderError(f"{path}: truncated header")
        version, dim, count = struct.unpack_from("<IIQ", blob, 8)
        if version != FORMAT_VERSION:
            raise ProviderError(f"{path}: unsupported format version {version}")
        store = cls(dim)
        off = 24
        for i in range(count):
            try:
                (id_len,) = struct.unpack_from("<H", blob, off)
                off += 2
                did = blob[off : off + id_len].decode("utf-8")
                off += id_len
                (turn,) = struct.unpack_from("<I", blob, off)
                off += 4
                vec = np.frombuffer(blob, dtype="<f4", count=dim, offset=off).copy()
                off += 4 * dim
            except (struct.error, ValueError) as e:
                raise ProviderError(f"{path}: truncated record {i + 1} of {count}") from e
            if (did, turn) in store.records:
                raise ProviderError(f"{path}: duplicate record ({did!r}, turn {turn})")
            store.records[(did, int(turn))] = vec
        if off != len(blob):
            raise ProviderError(f"{path}: {len(blob) - off} trailing bytes after records")
        return store


class StoreProvider(EmbeddingProvider):
    """Serves frozen vectors from an EmbeddingStore; constant in the graph."""

    def __init__(self, store: EmbeddingStore):
        self.store = store
        self.dim = store.dim

    def embed_dialogue(self, dialogue) -> Tensor:
        rows = [self.store.get(dialogue.dialogue_id, i) for i in range(1, len(dialogue.turns) + 1)]
        return Tensor(np.stack(rows))

    def embed_turn(self, dialogue_id: str, turn_index: int, system: str, user: str) -> Tensor:
        return Tensor(self.store.get(dialogue_id, turn_index))

    def missing_keys(self, dialogues) -> list:
        missing = []
        for d in dialogues:
            for i in range(1, len(d.turns) + 1):
                if (d.dialogue_id, i) not in self.store.records:
                    missing.append((d.dialogue_id, i))
        return missing
