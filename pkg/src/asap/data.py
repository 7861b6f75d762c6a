"""Dialogue schema, JSONL ingestion, rating mapping, splits, and a synthetic
corpus generator with controllable satisfaction autocorrelation.

The generator draws a per-turn text signal u_t uniformly over classes; the
label either copies recent history (probability rho, recency-weighted) or
follows u_t. Turn text encodes u_t noisily, so text alone cannot explain the
history-driven share of labels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class DataError(ValueError):
    """Malformed corpus content or inconsistent data configuration."""


@dataclass
class Turn:
    system: str
    user: str
    satisfaction: int | None = None
    action: int | None = None


@dataclass
class DialogueSession:
    dialogue_id: str
    turns: list[Turn]

    def __len__(self):
        return len(self.turns)


@dataclass
class RatingMap:
    """Total, monotone map from raw ratings 1..5 to class labels 0..K-1."""

    mapping: dict[int, int] = field(
        default_factory=lambda: {1: 0, 2: 0, 3: 1, 4: 2, 5: 2}
    )

    def __post_init__(self):
        if sorted(self.mapping) != [1, 2, 3, 4, 5]:
            raise DataError("rating map must cover exactly the ratings 1..5")
        classes = [self.mapping[r] for r in range(1, 6)]
        if any(b < a for a, b in zip(classes, classes[1:])):
            raise DataError("rating map must be monotone non-decreasing")
        if classes[0] != 0 or sorted(set(classes)) != list(range(max(classes) + 1)):
            raise DataError("rating map classes must be contiguous from 0")

    @property
    def num_classes(self) -> int:
        return max(self.mapping.values()) + 1

    def to_class(self, rating: int) -> int:
        if rating not in self.mapping:
            raise DataError(f"rating {rating!r} outside 1..5")
        return self.mapping[rating]

    def representative_rating(self, cls: int) -> int:
        for r in range(1, 6):
            if self.mapping[r] == cls:
                return r
        raise DataError(f"class {cls} has no preimage under the rating map")

    def to_dict(self) -> dict:
        return {str(r): c for r, c in sorted(self.mapping.items())}

    @classmethod
    def from_dict(cls, d: dict) -> "RatingMap":
        return cls({int(r): int(c) for r, c in d.items()})


# JSONL ingestion --------------------------------------------------------


def _parse_turn(obj: dict, where: str, rating_map: RatingMap) -> Turn:
    for key in ("system", "user"):
        if not isinstance(obj.get(key), str):
            raise DataError(f"{where}: turn field {key!r} must be a string")
    rating = obj.get("rating")
    action = obj.get("action")
    sat = None
    if rating is not None:
        if not isinstance(rating, int) or isinstance(rating, bool):
            raise DataError(f"{where}: rating must be an integer or null")
        try:
            sat = rating_map.to_class(rating)
        except DataError as e:
            raise DataError(f"{where}: {e}") from e
    if action is not None and (not isinstance(action, int) or isinstance(action, bool) or action < 0):
        raise DataError(f"{where}: action must be a nonnegative integer or null")
    return Turn(system=obj["system"], user=obj["user"], satisfaction=sat, action=action)


def load_dialogues(path, rating_map: RatingMap | None = None) -> list[DialogueSession]:
    rating_map = rating_map or RatingMap()
    out: list[DialogueSession] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: invalid JSON ({e.msg})") from e
            did = obj.get("dialogue_id")
            if not isinstance(did, str) or not did:
                raise DataError(f"{path}:{lineno}: dialogue_id must be a nonempty string")
            if did in seen:
                raise DataError(f"{path}:{lineno}: duplicate dialogue_id {did!r}")
            seen.add(did)
            raw_turns = obj.get("turns")
            if not isinstance(raw_turns, list) or not raw_turns:
                raise DataError(f"{path}:{lineno}: dialogue {did!r} must have >= 1 turn")
            try:
                turns = [
                    _parse_turn(t, f"dialogue {did!r} turn {i + 1}", rating_map)
                    for i, t in enumerate(raw_turns)
                ]
            except DataError as e:
                raise DataError(f"{path}:{lineno}: {e}") from e
            out.append(DialogueSession(dialogue_id=did, turns=turns))
    return out


def save_dialogues(dialogues, path, rating_map: RatingMap | None = None):
    rating_map = rating_map or RatingMap()
    with open(path, "w", encoding="utf-8") as fh:
        for d in dialogues:
            obj = {
                "dialogue_id": d.dialogue_id,
                "turns": [
                    {
                        "system": t.system,
                        "user": t.user,
                        "rating": None if t.satisfaction is None
                        else rating_map.representative_rating(t.satisfaction),
                        "action": t.action,
                    }
                    for t in d.turns
                ],
            }
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def split(dialogues, fractions, seed: int):
    """Dialogue-level partition under a seeded shuffle; disjoint, exhaustive."""
    fractions = list(fractions)
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"split fractions must sum to 1, got {sum(fractions)}")
    if any(f < 0 for f in fractions):
        raise DataError("split fractions must be nonnegative")
    n = len(dialogues)
    counts = [int(f * n) for f in fractions]
    remainders = [f * n - c for f, c in zip(fractions, counts)]
    for _ in range(n - sum(counts)):
        i = int(np.argmax(remainders))
        counts[i] += 1
        remainders[i] = -1.0
    order = np.random.default_rng(seed).permutation(n)
    parts, pos = [], 0
    for c in counts:
        parts.append([dialogues[i] for i in order[pos : pos + c]])
        pos += c
    return tuple(parts)


# synthetic corpus -------------------------------------------------------


@dataclass
class SynthSpec:
    num_dialogues: int = 100
    turns_min: int = 4
    turns_max: int = 12
    num_classes: int = 3
    num_actions: int = 0
    rho: float = 0.0  # probability a label copies recent history
    lexical_strength: float = 0.9  # probability turn text shows the true signal
    action_alignment: float = 0.6  # probability the action tracks satisfaction
    ambiguity: float = 0.0  # probability the text only narrows the label to two classes
    delta_talk: float = 0.0  # probability the text reports the change, not the level
    class_weights: tuple | None = None  # marginal distribution of fresh labels
    seed: int = 42

    def __post_init__(self):
        if not 0.0 <= self.rho < 1.0:
            raise DataError(f"rho must be in [0, 1), got {self.rho}")
        if not 0.0 <= self.lexical_strength <= 1.0:
            raise DataError("lexical_strength must be in [0, 1]")
        if not 0.0 <= self.action_alignment <= 1.0:
            raise DataError("action_alignment must be in [0, 1]")
        if not 0.0 <= self.ambiguity <= 1.0:
            raise DataError("ambiguity must be in [0, 1]")
        if not 0.0 <= self.delta_talk <= 1.0:
            raise DataError("delta_talk must be in [0, 1]")
        if self.class_weights is not None:
            self.class_weights = tuple(float(w) for w in self.class_weights)
            if len(self.class_weights) != self.num_classes:
                raise DataError("class_weights must have one entry per class")
            if min(self.class_weights) < 0 or sum(self.class_weights) <= 0:
                raise DataError("class_weights must be nonnegative with a positive sum")
        if self.num_classes < 2:
            raise DataError("num_classes must be >= 2")
        if not 1 <= self.turns_min <= self.turns_max:
            raise DataError("need 1 <= turns_min <= turns_max")
        if self.num_dialogues < 1:
            raise DataError("num_dialogues must be >= 1")

    def to_dict(self) -> dict:
        return {
            "num_dialogues": self.num_dialogues,
            "turns_min": self.turns_min,
            "turns_max": self.turns_max,
            "num_classes": self.num_classes,
            "num_actions": self.num_actions,
            "rho": self.rho,
            "lexical_strength": self.lexical_strength,
            "action_alignment": self.action_alignment,
            "ambiguity": self.ambiguity,
            "delta_talk": self.delta_talk,
            "class_weights": None if self.class_weights is None
            else list(self.class_weights),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        return cls(**d)


_FILLERS = [f"filler{i}" for i in range(16)]
_TOPICS = ["billing", "booking", "weather", "returns", "support", "music"]

# recency weights over (previous, one-before) labels when history wins
_RECENCY = (0.7, 0.3)


def _noisy_token(rng, true_value: int, count: int, strength: float) -> int:
    if count == 1 or rng.random() < strength:
        return true_value
    others = [v for v in range(count) if v != true_value]
    return others[rng.integers(len(others))]


def synthesize(spec: SynthSpec) -> list[DialogueSession]:
    rng = np.random.default_rng(spec.seed)
    K, A = spec.num_classes, spec.num_actions
    dialogues = []
    for d in range(spec.num_dialogues):
        n_turns = int(rng.integers(spec.turns_min, spec.turns_max + 1))
        topic = _TOPICS[rng.integers(len(_TOPICS))]
        labels: list[int] = []
        turns: list[Turn] = []
        for t in range(n_turns):
            # class_weights=None must keep the legacy rng stream
            if spec.class_weights is None:
                u_t = int(rng.integers(K))
            else:
                p = np.asarray(spec.class_weights)
                u_t = int(rng.choice(K, p=p / p.sum()))
            if t >= 1 and rng.random() < spec.rho:
                back = 1 if (t < 2 or rng.random() < _RECENCY[0]) else 2
                s_t = labels[t - back]
            else:
                s_t = u_t
            labels.append(s_t)

            # zero-valued knobs must leave the rng stream untouched here
            if (spec.delta_talk > 0.0 and t >= 1
                    and rng.random() < spec.delta_talk):
                diff = s_t - labels[t - 1]
                trend = 1 + (diff > 0) - (diff < 0)
                shown = _noisy_token(rng, trend, 3, spec.lexical_strength)
                user_tokens = [("down", "flat", "up")[shown]]
            elif spec.ambiguity > 0.0 and rng.random() < spec.ambiguity:
                others = [v for v in range(K) if v != s_t]
                lo, hi = sorted((s_t, others[rng.integers(K - 1)]))
                user_tokens = [f"maybe{lo}{hi}"]
            else:
                shown_mood = _noisy_token(rng, s_t, K, spec.lexical_strength)
                user_tokens = [f"mood{shown_mood}"]
            action = None
            if A > 0:
                if rng.random() < spec.action_alignment:
                    action = s_t % A
                else:
                    action = int(rng.integers(A))
                shown_act = _noisy_token(rng, action, A, spec.lexical_strength)
                user_tokens.append(f"act{shown_act}")
            user_tokens += [_FILLERS[rng.integers(len(_FILLERS))] for _ in range(2)]
            system = f"sys {topic} step{t + 1}"
            user = " ".join(user_tokens)
            turns.append(Turn(system=system, user=user, satisfaction=s_t, action=action))
        dialogues.append(DialogueSession(dialogue_id=f"synth-{spec.seed}-{d:05d}", turns=turns))
    return dialogues


# autocorrelation probes (oracle measurements for the generator) ---------


def lag1_agreement(dialogues) -> float:
    """Fraction of adjacent turn pairs with equal satisfaction labels."""
    same = total = 0
    for d in dialogues:
        labels = [t.satisfaction for t in d.turns if t.satisfaction is not None]
        for a, b in zip(labels, labels[1:]):
            total += 1
            same += a == b
    if total == 0:
        raise DataError("no adjacent labeled turn pairs")
    return same / total


def lag1_cramers_v(dialogues, K: int) -> float:
    """Cramer's V of the lag-1 label contingency table."""
    table = np.zeros((K, K))
    for d in dialogues:
        labels = [t.satisfaction for t in d.turns if t.satisfaction is not None]
        for a, b in zip(labels, labels[1:]):
            table[a, b] += 1
    n = table.sum()
    if n == 0:
        raise DataError("no adjacent labeled turn pairs")
    expected = table.sum(1, keepdims=True) * table.sum(0, keepdims=True) / n
    with np.errstate(invalid="ignore", divide="ignore"):
        chi2 = float(np.nansum((table - expected) ** 2 / expected))
    return float(np.sqrt(chi2 / (n * (K - 1))))
