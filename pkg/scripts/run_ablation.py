"""Desk-scale ablation: vanilla vs caa vs caa+mtm over several training seeds.

Trains every (model, seed) pair on one fixed dataset, evaluates the best
checkpoint on the validation split and prints overall, long-range coreference
and per-turn accuracy, plus the turn-attention grounding score of the full model.
"""
import argparse
import json
import logging
import time
from dataclasses import asdict, dataclass

import numpy as np

from cammac.evaluation import coreferent_attention, evaluate, referent_cell_hits, summarize_attention
from cammac.scenegen import GenConfig, answer_vocab, generate_dataset, question_vocab
from cammac.trainer import DESK, TrainConfig, train

MODELS = ("vanilla", "caa", "caa+mtm")
SEEDS = (0, 1, 2)
TRAIN_SEED, VAL_SEED = 1, 2
N_TRAIN, N_VAL = 2000, 200

log = logging.getLogger(__name__)


@dataclass
class RunResult:
    model: str
    seed: int
    accuracy: float
    coref_far_correct: int  # coreference distance >= 2
    coref_far_total: int
    first_turn: float
    last_turn: float
    epochs: int
    seconds: float
    cell_hit: float  # final read step on the queried object, correct seek answers
    grounding: float | None = None
    grounding_uniform: float | None = None

    @property
    def coref_far(self) -> float:
        return self.coref_far_correct / self.coref_far_total


def desk_data(gen: GenConfig | None = None):
    gen = gen or GenConfig()
    return gen, generate_dataset(TRAIN_SEED, N_TRAIN, gen), generate_dataset(VAL_SEED, N_VAL, gen)


def run_one(model: str, seed: int, gen, train_set, val_set, base: TrainConfig = DESK) -> RunResult:
    cfg = TrainConfig(**{**asdict(base), "model": model, "seed": seed})
    t0 = time.time()
    res = train(train_set, val_set, cfg, question_vocab(gen), answer_vocab(gen), gen.grid)
    seconds = time.time() - t0
    rep = evaluate(res.best, val_set)
    far = [v for k, v in rep.counts["coref"].items() if k.isdigit() and int(k) >= 2]
    turns = rep.table("turn")
    hits, n_seek = referent_cell_hits(res.best, val_set)
    out = RunResult(model, seed, rep.overall, sum(c for c, _ in far), sum(n for _, n in far),
                    turns["1"], turns[str(max(int(k) for k in turns))], len(res.metrics), seconds,
                    hits / max(n_seek, 1))
    if res.best.model_config.caa:
        score = coreferent_attention(summarize_attention(res.best, val_set), val_set)
        out.grounding, out.grounding_uniform = score.mean_weight, score.mean_uniform
    log.info("%s seed %d: acc %.4f coref>=2 %.4f turn1 %.4f last %.4f (%d epochs, %.0fs)", model, seed,
             out.accuracy, out.coref_far, out.first_turn, out.last_turn, out.epochs, seconds)
    return out


def run_ablation(models=MODELS, seeds=SEEDS, base: TrainConfig = DESK) -> list[RunResult]:
    gen, train_set, val_set = desk_data()
    return [run_one(m, s, gen, train_set, val_set, base) for m in models for s in seeds]


def summarize(results: list[RunResult]) -> dict[str, dict[str, float]]:
    """Seed-averaged metrics per model."""
    table = {}
    for model in dict.fromkeys(r.model for r in results):
        rs = [r for r in results if r.model == model]
        row = {"accuracy": np.mean([r.accuracy for r in rs]),
               "coref_far": np.mean([r.coref_far for r in rs]),
               "turn_drop": np.mean([r.last_turn - r.first_turn for r in rs])}
        if rs[0].grounding is not None:
            row["grounding"] = np.mean([r.grounding for r in rs])
            row["grounding_uniform"] = np.mean([r.grounding_uniform for r in rs])
        table[model] = {k: float(v) for k, v in row.items()}
    return table


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--models", nargs="+", default=list(MODELS))
    ap.add_argument("--seeds", nargs="+", type=int, default=list(SEEDS))
    ap.add_argument("--json", help="write per-run results here")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    results = run_ablation(args.models, args.seeds)
    if args.json:
        with open(args.json, "w") as f:
            json.dump([asdict(r) for r in results], f, indent=2)
    print(f"{'model':10s} {'acc':>7s} {'coref>=2':>9s} {'turn drop':>10s} {'grounding':>10s}")
    for model, row in summarize(results).items():
        g = f"{row['grounding']:.3f}/{row['grounding_uniform']:.3f}" if "grounding" in row else "-"
        print(f"{model:10s} {row['accuracy']:7.4f} {row['coref_far']:9.4f} {row['turn_drop']:10.4f} {g:>10s}")


if __name__ == "__main__":
    main()
