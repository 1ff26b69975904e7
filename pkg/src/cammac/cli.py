"""Command-line entry point: gen, train, eval, analyze-attn, gradcheck.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import gradcheck
from .evaluation import (UnsupportedAnalysisError, VocabMismatchError, check_vocab, coreferent_attention,
                         evaluate, summarize_attention, vocab_hash, write_attention, write_reports)
from .model import MODEL_FLAGS
from .scenegen import (DatasetFormatError, GenConfig, generate_dataset, histograms, load_dataset, write_dataset)
from .trainer import CheckpointFormatError, TrainConfig, TrainingError, load_checkpoint, save_checkpoint, train

log = logging.getLogger("cammac")

SEED_ENV = "CAMMAC_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class RunConfig:
    """Everything that determines a subcommand's outputs, written next to them."""

    command: str
    seed: int
    dataset: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(asdict(self), indent=2) + "\n")
        return path


def run_config_path(output) -> Path:
    output = Path(output)
    return output / "run_config.json" if output.is_dir() else output.with_name(output.name + ".run.json")


def parse_grid(spec: str) -> tuple[int, int]:
    try:
        h, w = (int(x) for x in spec.lower().split("x"))
    except ValueError:
        raise UsageError(f"invalid grid spec {spec!r}, expected HxW such as 4x4") from None
    if h <= 0 or w <= 0:
        raise UsageError(f"invalid grid spec {spec!r}, sides must be positive")
    return h, w


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return data


def _resolve_seed(flag, config: dict) -> int:
    if flag is not None:
        return flag
    if "seed" in config:
        return int(config["seed"])
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV}={env!r} is not an integer") from None
    return 0


def _merge(base: dict, overrides: dict, known) -> dict:
    out = dict(base)
    unknown = set(out) - set(known)
    if unknown:
        raise UsageError(f"unknown config fields: {sorted(unknown)}")
    out.update({k: v for k, v in overrides.items() if v is not None})
    return out


def _writable(path) -> Path:
    path = Path(path)
    parent = path.parent if path.parent != Path("") else Path(".")
    if not parent.is_dir():
        raise UsageError(f"output directory {parent} does not exist")
    return path


# Subcommands ----------------------------------------------------------------------

def cmd_gen(args) -> int:
    config = _load_config(args.config)
    seed = _resolve_seed(args.seed, config)
    overrides = {"turns": args.turns, "grid": parse_grid(args.grid) if args.grid else None}
    gen_fields = {f.name for f in fields(GenConfig)}
    merged = _merge(config.get("dataset", {}), overrides, gen_fields)
    try:
        cfg = GenConfig.from_dict(merged) if merged else GenConfig()
        cfg.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid dataset config: {exc}") from None
    n = args.dialogs if args.dialogs is not None else config.get("paths", {}).get("dialogs")
    if n is None or int(n) < 0:
        raise UsageError("--dialogs must be a non-negative integer")
    out = _writable(args.out)
    records = generate_dataset(seed, int(n), cfg, workers=args.workers)
    write_dataset(records, out, cfg)
    RunConfig("gen", seed, cfg.to_dict(), {}, {"out": str(out), "dialogs": int(n)}).write(run_config_path(out))
    templates, distances = histograms(records)
    print(f"wrote {len(records)} dialogs to {out}")
    print("template histogram:")
    for k in sorted(templates):
        print(f"  {k}\t{templates[k]}")
    print("coref-distance histogram:")
    for k in sorted(distances, key=lambda x: (not x.isdigit(), int(x) if x.isdigit() else 0)):
        print(f"  {k}\t{distances[k]}")
    return 0


def _train_overrides(args) -> dict:
    return {
        "model": args.model, "learning_rate": args.lr, "p": args.p, "d": args.d, "max_epochs": args.epochs,
        "early_stop_patience": args.patience, "batch_dialogs": args.batch_dialogs,
        "batch_turns": args.batch_turns, "precision": args.precision, "max_steps": args.max_steps,
    }


def cmd_train(args) -> int:
    config = _load_config(args.config)
    seed = _resolve_seed(args.seed, config)
    merged = _merge(config.get("train", {}), _train_overrides(args), {f.name for f in fields(TrainConfig)})
    merged["seed"] = seed
    if merged.get("model") not in MODEL_FLAGS:
        raise UsageError(f"unknown model {merged.get('model')!r}; valid names: {', '.join(MODEL_FLAGS)}")
    try:
        cfg = TrainConfig(**merged)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from None
    train_header, train_set = load_dataset(args.data)
    val_header, val_set = load_dataset(args.val)
    for kind in ("vocab", "answer_vocab"):
        if train_header[kind] != val_header[kind]:
            raise VocabMismatchError(f"{kind} mismatch: train {vocab_hash(train_header[kind])} "
                                     f"vs val {vocab_hash(val_header[kind])}")
    grid = tuple(train_header["cfg"]["grid"])
    out = _writable(args.out)
    metrics_path = out.with_name(out.name + ".metrics.log")
    last_path = out.with_name(out.name + ".last")
    resume = load_checkpoint(args.resume) if args.resume else None
    mode = "a" if resume is not None else "w"

    with metrics_path.open(mode) as mfh:
        def on_epoch(m, ckpt):
            line = f"{m.epoch} {m.train_loss:.6f} {m.val_acc:.6f}"
            print(line, flush=True)
            mfh.write(line + "\n")
            mfh.flush()
            save_checkpoint(ckpt, last_path)

        result = train(train_set, val_set, cfg, train_header["vocab"], train_header["answer_vocab"], grid,
                       resume=resume, on_epoch=on_epoch)
    save_checkpoint(result.best, out)
    RunConfig("train", seed, train_header["cfg"], asdict(cfg),
              {"data": str(args.data), "val": str(args.val), "out": str(out), "metrics": str(metrics_path),
               "last": str(last_path)}).write(run_config_path(out))
    print(f"best epoch {result.best.epoch} val_acc {result.best.val_accuracy:.4f}; checkpoint {out}")
    return 0


def _checked(ckpt_path, data_path):
    ckpt = load_checkpoint(ckpt_path)
    header, records = load_dataset(data_path)
    check_vocab(ckpt.model_config, header["vocab"], header["answer_vocab"])
    return ckpt, header, records


def cmd_eval(args) -> int:
    ckpt, header, records = _checked(args.ckpt, args.data)
    if not records:
        raise UsageError(f"{args.data} holds no dialogs")
    report = evaluate(ckpt, records)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    write_reports(report, outdir)
    RunConfig("eval", ckpt.train_config.seed, header["cfg"], asdict(ckpt.train_config),
              {"ckpt": str(args.ckpt), "data": str(args.data), "outdir": str(outdir)}).write(outdir / "run_config.json")
    print(f"overall accuracy {report.overall:.4f} on {report.total()} questions")
    for axis in ("family", "turn", "coref"):
        cells = ", ".join(f"{b}={a:.4f}" for b, a in sorted(report.table(axis).items()))
        print(f"  {axis}: {cells}")
    return 0


def cmd_analyze(args) -> int:
    ckpt, header, records = _checked(args.ckpt, args.data)
    summaries = summarize_attention(ckpt, records)
    out = _writable(args.out)
    write_attention(summaries, out)
    RunConfig("analyze-attn", ckpt.train_config.seed, header["cfg"], asdict(ckpt.train_config),
              {"ckpt": str(args.ckpt), "data": str(args.data), "out": str(out)}).write(run_config_path(out))
    print(f"wrote attention summaries for {len(summaries)} dialogs to {out}")
    try:
        score = coreferent_attention(summaries, records)
        print(f"coreferent-turn weight {score.mean_weight:.4f} vs uniform {score.mean_uniform:.4f} "
              f"over {score.n_questions} questions")
    except ValueError:
        pass
    return 0


def cmd_gradcheck(args) -> int:
    failed = 0
    for res in gradcheck.check_all_ops(args.seed):
        failed += not res.passed
        print(f"{res.name:<14} {res.max_rel_error:.3e} {'ok' if res.passed else 'FAIL'}")
    if not args.ops_only:
        worst = max(gradcheck.check_model(args.seed), key=lambda r: r.max_rel_error)
        failed += not worst.passed
        print(f"{'model':<14} {worst.max_rel_error:.3e} {'ok' if worst.passed else 'FAIL'} (worst: {worst.name})")
    print("gradient check " + ("passed" if not failed else f"FAILED ({failed})"))
    return 0 if not failed else 2


# Parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cammac", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a dialog dataset")
    g.add_argument("--seed", type=int)
    g.add_argument("--dialogs", type=int)
    g.add_argument("--turns", type=int)
    g.add_argument("--grid")
    g.add_argument("--out", required=True)
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--config")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--val", required=True)
    t.add_argument("--model")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--p", type=int)
    t.add_argument("--d", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--batch-dialogs", type=int)
    t.add_argument("--batch-turns", type=int)
    t.add_argument("--precision", choices=("float32", "float64"))
    t.add_argument("--max-steps", type=int)
    t.add_argument("--resume")
    t.add_argument("--config")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="accuracy breakdowns as CSV")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--outdir", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze-attn", help="per-dialog turn attention summaries as CSV")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_analyze)

    c = sub.add_parser("gradcheck", help="finite-difference check of every op and the model")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--ops-only", action="store_true")
    c.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("cammac: a subcommand is required (gen, train, eval, analyze-attn, gradcheck)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, DatasetFormatError, CheckpointFormatError, VocabMismatchError, UnsupportedAnalysisError,
            TrainingError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
