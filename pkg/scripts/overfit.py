"""Memorize a small dialog set with the full model; reports training accuracy per epoch."""
import argparse
import logging

from cammac.scenegen import GenConfig, answer_vocab, generate_dataset, question_vocab
from cammac.trainer import TrainConfig, accuracy, train

OVERFIT = dict(model="caa+mtm", p=4, d=64, learning_rate=2e-3, max_steps=300,
               max_epochs=300, early_stop_patience=300)


def overfit(n_dialogs=50, seed=0, **overrides):
    """Train on ``n_dialogs`` dialogs for at most 300 optimizer steps; returns (train_acc, steps)."""
    gen = GenConfig()
    data = generate_dataset(seed, n_dialogs, gen)
    cfg = TrainConfig(**{**OVERFIT, "seed": seed, **overrides})
    res = train(data, data, cfg, question_vocab(gen), answer_vocab(gen), gen.grid)
    return accuracy(res.last.tensors(), res.last.model_config, data), res.metrics[-1].steps


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--dialogs", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--lr", type=float, default=OVERFIT["learning_rate"])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    acc, steps = overfit(args.dialogs, args.seed, learning_rate=args.lr)
    print(f"train accuracy {acc:.4f} after {steps} steps")


if __name__ == "__main__":
    main()
