"""Command-line front end: synthesize corpora, train, evaluate, predict,
and run the gradient checker.

One JSON config file per run, dotted `--set` overrides on top, and the
ASAP_SEED environment variable with the last word on seeds. Every command
echoes its effective configuration next to its outputs.

Exit codes: 0 success, 1 validation error, 2 runtime or numerical abort.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import traceback

from .data import DataError, RatingMap, SynthSpec, load_dialogues, save_dialogues, synthesize
from .metrics import (
    MetricsError,
    evaluate,
    paired_t_test,
    per_turn_breakdown,
    summarize_contributions,
)
from .model import CheckpointError, ModelConfig, load_checkpoint
from .nn import ConfigError
from .providers import EmbeddingStore, ProviderError, StoreProvider
from .tensor import GraphError, ShapeError
from .training import PreflightError, TrainConfig, TrainingError, gradcheck, train

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


class CliError(ValueError):
    """Bad invocation or config; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; route them to the validation code
    def error(self, message):
        raise CliError(message)


# config plumbing --------------------------------------------------------


def deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def apply_override(config: dict, item: str):
    """Apply one `--set dotted.key=value` entry; values parse as JSON when
    possible and fall back to plain strings."""
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise CliError(f"--set expects KEY=VALUE, got {item!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = config
    parts = key.split(".")
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            node[part] = {}
        node = node[part]
    node[parts[-1]] = value


def env_seed() -> int | None:
    raw = os.environ.get("ASAP_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise CliError(f"ASAP_SEED must be an integer, got {raw!r}") from None


def load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as e:
        raise CliError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})") from e


def default_run_config() -> dict:
    return {
        "model": ModelConfig().to_dict(),
        "train": TrainConfig().to_dict(),
        "data": {"train": None, "val": None, "embeddings": None, "rating_map": None},
        "out_dir": None,
    }


def assemble_run_config(config_path, overrides) -> dict:
    config = deep_merge(default_run_config(), load_json(config_path))
    for item in overrides:
        apply_override(config, item)
    seed = env_seed()
    if seed is not None:
        config["train"]["seed"] = seed
    return config


def echo_config(config: dict, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")


def sibling_config_path(out_path) -> str:
    stem, ext = os.path.splitext(str(out_path))
    return (stem if ext else str(out_path)) + ".config.json"


def resolve_rating_map(spec) -> RatingMap | None:
    """Accepts None, an inline mapping dict, or a path to a JSON mapping."""
    if spec is None:
        return None
    if isinstance(spec, dict):
        return RatingMap.from_dict(spec)
    return RatingMap.from_dict(load_json(spec))


def make_provider(embeddings_path) -> StoreProvider | None:
    if embeddings_path is None:
        return None
    return StoreProvider(EmbeddingStore.load(embeddings_path))


# commands ---------------------------------------------------------------


def cmd_synth(args) -> int:
    spec_dict = load_json(args.spec)
    seed = env_seed()
    if seed is not None:
        spec_dict["seed"] = seed
    try:
        spec = SynthSpec.from_dict(spec_dict)
    except TypeError as e:
        raise CliError(f"{args.spec}: {e}") from e
    dialogues = synthesize(spec)
    save_dialogues(dialogues, args.out)
    echo_config(spec.to_dict(), sibling_config_path(args.out))
    print(f"wrote {len(dialogues)} dialogues -> {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = assemble_run_config(args.config, args.overrides)
    out_dir = args.out or config.get("out_dir")
    if not out_dir:
        raise CliError("an output directory is required (config out_dir or --out)")
    data_cfg = config.get("data") or {}
    for split_name in ("train", "val"):
        if not data_cfg.get(split_name):
            raise CliError(f"config data.{split_name} is required")
    try:
        model_config = ModelConfig.from_dict(config["model"])
        train_config = TrainConfig.from_dict(config["train"])
    except (KeyError, TypeError) as e:
        raise CliError(f"bad model/train config: {e}") from e
    rating_map = resolve_rating_map(data_cfg.get("rating_map"))
    train_dialogues = load_dialogues(data_cfg["train"], rating_map)
    val_dialogues = load_dialogues(data_cfg["val"], rating_map)
    provider = make_provider(data_cfg.get("embeddings"))

    os.makedirs(out_dir, exist_ok=True)
    config["out_dir"] = str(out_dir)
    echo_config(config, os.path.join(out_dir, "effective_config.json"))

    report = train(train_dialogues, val_dialogues, model_config, train_config,
                   out_dir, provider=provider, quiet=args.quiet)
    print(
        f"selected epoch {report.selected_epoch} "
        f"val macro-F1 {report.best_val_f1:.4f} -> {report.checkpoint_path}"
    )
    return EXIT_OK


def _labeled_rows(model, dialogues, with_contribution: bool):
    """Per labeled turn: (dialogue_id, 1-based turn, prediction, gold, contribution)."""
    rows = []
    for d in dialogues:
        preds = model.predict(d, with_contribution=with_contribution)
        for i, (turn, pred) in enumerate(zip(d.turns, preds), start=1):
            if turn.satisfaction is not None:
                rows.append((d.dialogue_id, i, pred.predicted_class,
                             turn.satisfaction, pred.contribution))
    if not rows:
        raise CliError("no labeled turns to evaluate")
    return rows


def load_prediction_classes(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                key = (obj["dialogue_id"], int(obj["turn"]))
                cls = int(obj["predicted_class"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise CliError(f"{path}:{lineno}: bad prediction row ({e})") from e
            if key in out:
                raise CliError(f"{path}:{lineno}: duplicate prediction for {key}")
            out[key] = cls
    return out


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint, make_provider(args.embeddings))
    if args.contribution and not model.config.hawkes_enabled:
        raise CliError("--contribution requires a checkpoint with the "
                       "self-exciting branch enabled")
    rating_map = resolve_rating_map(args.rating_map)
    dialogues = load_dialogues(args.data, rating_map)
    rows = _labeled_rows(model, dialogues, with_contribution=args.contribution)
    preds = [r[2] for r in rows]
    golds = [r[3] for r in rows]
    report = evaluate(preds, golds, model.config.num_classes)

    if args.per_turn:
        turns = [r[1] for r in rows]
        table = per_turn_breakdown(preds, golds, turns, model.config.num_classes,
                                   min_turn=args.min_turn)
        report.per_depth = table["rows"]
        report.extras["total_turns"] = table["total_turns"]
    if args.contribution:
        report.contribution = summarize_contributions([r[4] for r in rows])
    if args.compare:
        other = load_prediction_classes(args.compare)
        missing = [(r[0], r[1]) for r in rows if (r[0], r[1]) not in other]
        if missing:
            raise CliError(
                f"{args.compare} lacks predictions for {len(missing)} labeled "
                f"turns, first {missing[0]}"
            )
        ours = [1.0 if p == g else 0.0 for p, g in zip(preds, golds)]
        theirs = [1.0 if other[(r[0], r[1])] == r[3] else 0.0 for r in rows]
        report.t_stat, report.p_value = paired_t_test(ours, theirs)
        report.extras["compared_with"] = str(args.compare)

    os.makedirs(args.out, exist_ok=True)
    echo_config({"command": "eval", "checkpoint": str(args.checkpoint),
                 "data": str(args.data), "per_turn": args.per_turn,
                 "min_turn": args.min_turn, "contribution": args.contribution,
                 "compare": args.compare and str(args.compare),
                 "embeddings": args.embeddings and str(args.embeddings)},
                os.path.join(args.out, "effective_config.json"))
    report.save_json(os.path.join(args.out, "report.json"))
    report.save_csv(os.path.join(args.out, "report.csv"))
    print(
        f"accuracy {report.accuracy:.4f} macro-P {report.macro_precision:.4f} "
        f"macro-R {report.macro_recall:.4f} macro-F1 {report.macro_f1:.4f} "
        f"({report.num_turns} turns)"
    )
    if report.t_stat is not None:
        print(f"paired t vs {args.compare}: t {report.t_stat:.4f} p {report.p_value:.4f}")
    print(f"reports -> {args.out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model = load_checkpoint(args.checkpoint, make_provider(args.embeddings))
    dialogues = load_dialogues(args.data, resolve_rating_map(args.rating_map))
    count = 0
    with open(args.out, "w", encoding="utf-8") as fh:
        for d in dialogues:
            preds = model.predict(d, with_contribution=model.config.hawkes_enabled)
            for i, pred in enumerate(preds, start=1):
                row = {
                    "dialogue_id": d.dialogue_id,
                    "turn": i,
                    "p_use": [float(x) for x in pred.p_use],
                    "predicted_class": pred.predicted_class,
                }
                if pred.intensity is not None:
                    row["intensity"] = [float(x) for x in pred.intensity]
                if pred.contribution is not None:
                    row["contribution"] = pred.contribution
                fh.write(json.dumps(row) + "\n")
                count += 1
    echo_config({"command": "predict", "checkpoint": str(args.checkpoint),
                 "data": str(args.data),
                 "embeddings": args.embeddings and str(args.embeddings)},
                sibling_config_path(args.out))
    print(f"wrote {count} rows -> {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    model_config = None
    if args.config:
        model_config = ModelConfig.from_dict(load_json(args.config))
    seed = env_seed()
    if seed is None:
        seed = args.seed
    result = gradcheck(model_config, seed=seed, threshold=args.threshold)
    ranked = sorted(result["per_param"].items(), key=lambda kv: -kv[1])
    for name, err in ranked:
        print(f"  {err:12.3e}  {name}")
    verdict = "PASS" if result["passed"] else "FAIL"
    print(
        f"gradcheck {verdict}: max rel err {result['max_rel_err']:.3e} "
        f"in {result['worst_param']} (threshold {result['threshold']:.1e})"
    )
    return EXIT_OK if result["passed"] else EXIT_RUNTIME


# entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="asap", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dialogue corpus")
    p.add_argument("--spec", required=True, help="JSON generator settings")
    p.add_argument("--out", required=True, help="output corpus JSONL path")

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True, help="run config JSON path")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="dotted config override, repeatable")
    p.add_argument("--out", default=None, help="output dir (overrides out_dir)")
    p.add_argument("--quiet", action="store_true", help="suppress per-epoch lines")

    p = sub.add_parser("eval", help="evaluate a checkpoint on labeled data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dialogue JSONL path")
    p.add_argument("--embeddings", default=None, help="embedding store file")
    p.add_argument("--out", required=True, help="report output dir")
    p.add_argument("--rating-map", default=None, help="JSON rating->class map file")
    p.add_argument("--per-turn", action="store_true", help="add depth breakdown")
    p.add_argument("--min-turn", type=int, default=4,
                   help="first depth shown in the breakdown")
    p.add_argument("--contribution", action="store_true",
                   help="summarize history-vs-context contribution")
    p.add_argument("--compare", default=None, metavar="PREDICTIONS",
                   help="prediction JSONL to test against (paired t)")

    p = sub.add_parser("predict", help="write per-turn predictions as JSONL")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--embeddings", default=None)
    p.add_argument("--rating-map", default=None)
    p.add_argument("--out", required=True, help="output JSONL path")

    p = sub.add_parser("gradcheck", help="compare gradients to finite differences")
    p.add_argument("--config", default=None, help="model config JSON (tiny default)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=1e-4)

    return parser


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
}

VALIDATION_ERRORS = (
    CliError,
    DataError,
    ConfigError,
    ProviderError,
    CheckpointError,
    PreflightError,
    MetricsError,
    OSError,
)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainingError, GraphError, ShapeError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception:  # anything else is still a runtime abort for CI
        traceback.print_exc()
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
