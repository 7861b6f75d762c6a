"""Losses, AdamW with linear warmup/decay, the training loop with
validation-based checkpoint selection, and the finite-difference harness."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .metrics import EvalReport, evaluate
from .model import Model, ModelConfig, build_model, save_checkpoint
from .nn import ConfigError, EncoderConfig
from .providers import BagOfTokensEncoder, EmbeddingProvider, build_vocabulary
from .tensor import Tensor


class TrainingError(RuntimeError):
    """Invalid training inputs or a numerical abort mid-run."""


class PreflightError(TrainingError):
    """Input problems caught before any training compute."""


@dataclass
class TrainConfig:
    peak_lr: float = 1e-3
    warmup_proportion: float = 0.1
    epochs: int = 200
    batch_size: int = 8
    weight_decay: float = 0.01
    seed: int = 42
    min_token_count: int = 2

    def __post_init__(self):
        if not 0.0 <= self.warmup_proportion <= 1.0:
            raise ConfigError("warmup_proportion must be in [0, 1]")
        if self.peak_lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("peak_lr, epochs, and batch_size must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")

    def to_dict(self) -> dict:
        return {
            "peak_lr": self.peak_lr,
            "warmup_proportion": self.warmup_proportion,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "weight_decay": self.weight_decay,
            "seed": self.seed,
            "min_token_count": self.min_token_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# losses -----------------------------------------------------------------


def loss_use(fwd: dict, golds) -> Tensor:
    """Mean negative log of the scored distribution at the gold class.

    Scores come from the intensity when the self-exciting branch is on,
    otherwise from the plain satisfaction distribution.
    """
    dist = fwd["intensity"] if fwd["intensity"] is not None else fwd["p_use"]
    rows = [i for i, g in enumerate(golds) if g is not None]
    if not rows:
        raise TrainingError("no supervised turns for the satisfaction loss")
    cols = [golds[i] for i in rows]
    return T.scale(T.mean(T.log(T.pick(dist, rows, cols))), -1.0)


def loss_uar(fwd: dict, actions) -> Tensor:
    if fwd["p_uar"] is None:
        raise TrainingError("action loss requested but the action head is disabled")
    rows = [i for i, a in enumerate(actions) if a is not None]
    if not rows:
        raise TrainingError("no supervised turns for the action loss")
    cols = [actions[i] for i in rows]
    return T.scale(T.mean(T.log(T.pick(fwd["p_uar"], rows, cols))), -1.0)


def loss_joint(l_use: Tensor, l_uar: Tensor | None, gamma: float) -> Tensor:
    if gamma < 0:
        raise TrainingError("gamma must be >= 0")
    if gamma == 0.0 or l_uar is None:
        return l_use
    return T.add(l_use, T.scale(l_uar, gamma))


# optimizer --------------------------------------------------------------


def decay_excluded(name: str) -> bool:
    """Biases, norm parameters, and the score-embedding matrix skip decay."""
    last = name.rsplit(".", 1)[-1]
    return last in ("b", "bias", "gain") or name == "Z"


class AdamW:
    """Adam moments with decoupled weight decay and a linear warmup/decay
    schedule over a fixed total step count (1-based steps)."""

    BETA1, BETA2, EPS = 0.9, 0.999, 1e-8

    def __init__(self, params: dict[str, Tensor], config: TrainConfig, total_steps: int):
        if total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        self.params = params
        self.config = config
        self.total_steps = total_steps
        self.warmup_steps = config.warmup_proportion * total_steps
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.step_count = 0

    def lr_at(self, step: int) -> float:
        peak, w, total = self.config.peak_lr, self.warmup_steps, self.total_steps
        if step <= w and w > 0:
            return peak * step / w
        if total == w:
            return peak
        return peak * (total - step) / (total - w)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        self.step_count += 1
        lr = self.lr_at(self.step_count)
        b1, b2, eps = self.BETA1, self.BETA2, self.EPS
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        wd = self.config.weight_decay
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient in parameter {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + eps)
            if wd and not decay_excluded(name):
                update = update + wd * p.data
            p.data -= lr * update


# training loop ----------------------------------------------------------


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    selected_epoch: int = 0
    best_val_f1: float = 0.0
    checkpoint_path: str = ""

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.epochs:
                fh.write(json.dumps(rec) + "\n")
            fh.write(json.dumps({
                "selected_epoch": self.selected_epoch,
                "best_val_f1": self.best_val_f1,
                "checkpoint_path": self.checkpoint_path,
            }) + "\n")


def preflight(dialogues, config: ModelConfig, provider: EmbeddingProvider,
              require_labels: bool) -> list[str]:
    """Exhaustive list of validation problems; empty means ready to train."""
    problems = []
    K, A = config.num_classes, config.num_actions
    any_label = False
    for d in dialogues:
        for i, t in enumerate(d.turns, start=1):
            if t.satisfaction is not None:
                any_label = True
                if not 0 <= t.satisfaction < K:
                    problems.append(
                        f"dialogue {d.dialogue_id!r} turn {i}: satisfaction "
                        f"{t.satisfaction} outside 0..{K - 1}"
                    )
            if t.action is not None and A > 0 and not 0 <= t.action < A:
                problems.append(
                    f"dialogue {d.dialogue_id!r} turn {i}: action {t.action} "
                    f"outside 0..{A - 1}"
                )
    if require_labels and not any_label:
        problems.append("no labeled turns anywhere in the split")
    for key in provider.missing_keys(dialogues):
        problems.append(f"no embedding record for ({key[0]!r}, turn {key[1]})")
    return problems


def dialogue_losses(model: Model, dialogue, train: bool, rng=None):
    """Per-dialogue loss tensors (satisfaction, action-or-None)."""
    fwd = model.forward_graph(dialogue, train=train, rng=rng)
    golds = [t.satisfaction for t in dialogue.turns]
    l_use = loss_use(fwd, golds)
    l_uar = None
    if model.config.num_actions > 0 and model.config.gamma > 0:
        actions = [t.action for t in dialogue.turns]
        if any(a is not None for a in actions):
            l_uar = loss_uar(fwd, actions)
    return l_use, l_uar


def validate_report(model: Model, dialogues) -> EvalReport:
    preds, golds = [], []
    for d in dialogues:
        out = model.predict(d)
        for t, pred in zip(d.turns, out):
            if t.satisfaction is not None:
                preds.append(pred.predicted_class)
                golds.append(t.satisfaction)
    if not preds:
        raise TrainingError("validation split has no labeled turns")
    return evaluate(preds, golds, model.config.num_classes)


def train(train_dialogues, val_dialogues, model_config: ModelConfig,
          train_config: TrainConfig, out_dir, provider: EmbeddingProvider | None = None,
          quiet: bool = True) -> TrainReport:
    """Deterministic training run: seeded init, shuffling, and dropout.

    Builds a bag-of-tokens provider from the training split when no provider
    is passed. Selects the epoch with the best validation macro-F1 (earliest
    on ties) and persists that checkpoint plus a line-per-epoch report.
    """
    os.makedirs(out_dir, exist_ok=True)
    init_rng = np.random.default_rng(train_config.seed)
    if provider is None:
        vocab = build_vocabulary(train_dialogues, min_count=train_config.min_token_count)
        provider = BagOfTokensEncoder(vocab, model_config.dim, rng=init_rng)
    model = build_model(model_config, provider, init_rng)

    problems = preflight(train_dialogues, model_config, provider, require_labels=True)
    problems += preflight(val_dialogues, model_config, provider, require_labels=True)
    if problems:
        raise PreflightError("pre-flight validation failed:\n" + "\n".join(problems))

    supervised = [d for d in train_dialogues
                  if any(t.satisfaction is not None for t in d.turns)]
    n = len(supervised)
    batches_per_epoch = math.ceil(n / train_config.batch_size)
    total_steps = batches_per_epoch * train_config.epochs
    opt = AdamW(model.parameters(), train_config, total_steps)
    run_rng = np.random.default_rng(train_config.seed)

    report = TrainReport()
    best_f1 = -1.0
    ckpt_path = os.path.join(out_dir, "best.ckpt")
    for epoch in range(1, train_config.epochs + 1):
        order = run_rng.permutation(n)
        sum_use = sum_uar = sum_joint = 0.0
        for start in range(0, n, train_config.batch_size):
            batch = [supervised[i] for i in order[start : start + train_config.batch_size]]
            opt.zero_grad()
            joint_terms = []
            for d in batch:
                l_use, l_uar = dialogue_losses(model, d, train=True, rng=run_rng)
                l_joint = loss_joint(l_use, l_uar, model_config.gamma)
                joint_terms.append(l_joint)
                sum_use += l_use.item()
                sum_uar += 0.0 if l_uar is None else l_uar.item()
                sum_joint += l_joint.item()
            total = joint_terms[0]
            for term in joint_terms[1:]:
                total = T.add(total, term)
            batch_loss = T.scale(total, 1.0 / len(joint_terms))
            if not np.isfinite(batch_loss.data):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            batch_loss.backward()
            opt.step()

        val = validate_report(model, val_dialogues)
        record = {
            "epoch": epoch,
            "train_loss_use": sum_use / n,
            "train_loss_uar": sum_uar / n,
            "train_loss_joint": sum_joint / n,
            "val_accuracy": val.accuracy,
            "val_macro_precision": val.macro_precision,
            "val_macro_recall": val.macro_recall,
            "val_macro_f1": val.macro_f1,
        }
        report.epochs.append(record)
        if not quiet:
            print(json.dumps(record))
        if val.macro_f1 > best_f1:
            best_f1 = val.macro_f1
            report.selected_epoch = epoch
            report.best_val_f1 = val.macro_f1
            save_checkpoint(ckpt_path, model, extra={"epoch": epoch, "val_macro_f1": val.macro_f1})

    report.checkpoint_path = str(ckpt_path)
    report.save(os.path.join(out_dir, "train_report.jsonl"))
    return report


# gradient checking ------------------------------------------------------


def gradcheck_config(dim: int = 8, heads: int = 2, layers: int = 1,
                     num_classes: int = 3, num_actions: int = 4,
                     gamma: float = 0.5) -> ModelConfig:
    def enc():
        return EncoderConfig(model_dim=dim, num_heads=heads, num_layers=layers,
                             dropout_p=0.0)

    return ModelConfig(
        num_classes=num_classes, num_actions=num_actions, dim=dim,
        turn_encoder=enc(), score_encoder=enc(), mlp_hidden=6,
        beta=1.0, gamma=gamma, hawkes_enabled=True,
    )


def gradcheck(model_config: ModelConfig | None = None, seed: int = 0,
              h: float = 1e-4, threshold: float = 1e-4) -> dict:
    """Compare backward gradients against central finite differences on a
    2-turn dialogue; returns per-parameter worst relative errors."""
    from .data import DialogueSession, Turn

    model_config = model_config or gradcheck_config()
    A = model_config.num_actions
    acts = (1 % A, 3 % A) if A > 0 else (None, None)
    dialogue = DialogueSession(
        "gradcheck",
        [
            Turn("sys open", "mood0 filler1", 0, acts[0]),
            Turn("sys follow", "mood2 filler0", 2, acts[1]),
        ],
    )
    vocab = build_vocabulary([dialogue], min_count=1)
    rng = np.random.default_rng(seed)
    provider = BagOfTokensEncoder(vocab, model_config.dim, rng=rng)
    model = build_model(model_config, provider, rng)

    def compute_loss() -> Tensor:
        l_use, l_uar = dialogue_losses(model, dialogue, train=False)
        return loss_joint(l_use, l_uar, model_config.gamma)

    loss = compute_loss()
    loss.backward()
    analytic = {n: p.grad.copy() for n, p in model.parameters().items()}

    per_param = {}
    for name, p in model.parameters().items():
        flat = p.data.reshape(-1)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = compute_loss().item()
            flat[i] = orig - h
            fm = compute_loss().item()
            flat[i] = orig
            fd[i] = (fp - fm) / (2.0 * h)
        a = analytic[name].reshape(-1)
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(fd)))
        per_param[name] = float((np.abs(a - fd) / denom).max())

    worst = max(per_param, key=per_param.get)
    return {
        "per_param": per_param,
        "worst_param": worst,
        "max_rel_err": per_param[worst],
        "threshold": threshold,
        "passed": per_param[worst] < threshold,
    }
