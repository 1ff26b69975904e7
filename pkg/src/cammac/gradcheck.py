"""Finite-difference checks for every registered tensor op and the full model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T

OP_TOLERANCE = 1e-5
MODEL_TOLERANCE = 1e-4
# denominators below this are treated as zero gradients (softmax shift-invariant biases)
ZERO_GRAD_FLOOR = 1e-8


def _away_from_zero(rng, shape, lo=0.1):
    x = rng.uniform(lo, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _gru_mask():
    return np.array([[1, 1, 1, 0], [1, 1, 0, 0]], dtype=bool)


# name -> builder(rng) returning (fn, input arrays)
CASES: dict[str, Callable] = {
    "add": lambda rng: (lambda a, b: a + b, [rng.standard_normal((2, 3, 4)), rng.standard_normal((3, 4))]),
    "sub": lambda rng: (lambda a, b: a - b, [rng.standard_normal((2, 3)), rng.standard_normal((2, 3))]),
    "mul": lambda rng: (lambda a, b: a * b, [rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 1, 4))]),
    "relu": lambda rng: (T.Relu.apply, [_away_from_zero(rng, (3, 5))]),
    "sigmoid": lambda rng: (T.Sigmoid.apply, [rng.standard_normal((3, 5))]),
    "tanh": lambda rng: (T.Tanh.apply, [rng.standard_normal((3, 5))]),
    "matmul": lambda rng: (T.matmul, [rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 2))]),
    "masked_fill": lambda rng: (
        lambda a: T.softmax_lastdim(T.masked_fill(a, np.array([True, False, True, True]))),
        [rng.standard_normal((3, 4))],
    ),
    "softmax": lambda rng: (T.softmax_lastdim, [rng.standard_normal((2, 3, 5))]),
    "concat": lambda rng: (
        lambda a, b, c: T.concat_lastdim([a, b, c]),
        [rng.standard_normal((2, 3)), rng.standard_normal((2, 1)), rng.standard_normal((2, 4))],
    ),
    "stack": lambda rng: (
        lambda a, b: T.stack([a, b], axis=1),
        [rng.standard_normal((2, 3)), rng.standard_normal((2, 3))],
    ),
    "reshape": lambda rng: (lambda a: a.reshape(3, 4) * a.reshape(3, 4), [rng.standard_normal((2, 6))]),
    "transpose": lambda rng: (lambda a: T.transpose(a) @ a, [rng.standard_normal((2, 3, 4))]),
    "sum": lambda rng: (lambda a: a.sum(axis=1) * a.sum(axis=1), [rng.standard_normal((3, 4))]),
    "index": lambda rng: (lambda a: a[np.array([0, 2, 0])] * a[:, 1:].sum(), [rng.standard_normal((3, 4))]),
    "embedding": lambda rng: (lambda t: T.embedding(t, np.array([[0, 2], [2, 2]])), [rng.standard_normal((4, 3))]),
    "cross_entropy": lambda rng: (lambda z: T.cross_entropy(z, np.array([0, 3, 1])), [rng.standard_normal((3, 5))]),
    "gru": lambda rng: (
        lambda gx, wh, bh: T.gru_scan(gx, wh, bh, _gru_mask(), reverse=False)
        + T.gru_scan(gx, wh, bh, _gru_mask(), reverse=True),
        [rng.standard_normal((2, 4, 9)), 0.5 * rng.standard_normal((3, 9)), rng.standard_normal(9)],
    ),
}


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def check_op(name: str, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    fn, arrays = CASES[name](rng)
    errors = T.check_gradients(fn, arrays, eps=1e-6, seed=seed)
    return CheckResult(name, max(errors), OP_TOLERANCE)


def missing_cases() -> list[str]:
    return sorted(set(T.OPS) - set(CASES))


def check_all_ops(seed: int = 0) -> list[CheckResult]:
    missing = missing_cases()
    if missing:
        raise RuntimeError(f"no gradient-check case for registered ops: {missing}")
    return [check_op(name, seed) for name in sorted(T.OPS)]


def check_model(seed: int = 0, model: str = "caa+mtm", d: int = 4, p: int = 2, eps: float = 1e-5) -> list[CheckResult]:
    """Every parameter gradient of a tiny model on one caption + question, in double precision.

    Returns one result per parameter tensor.
    """
    from .model import ModelConfig, answer_targets, flags_for, forward_dialogs, init_params
    from .scenegen import GenConfig, answer_vocab, generate_record, question_vocab

    gen = GenConfig(turns=1)
    records = [generate_record(seed, gen), generate_record(seed + 1, gen)]
    f = flags_for(model)
    cfg = ModelConfig(question_vocab(gen), answer_vocab(gen), gen.grid, d, p, f.cq, f.caa, f.mtm)
    params = init_params(cfg, np.random.default_rng(seed), np.float64)
    # move biases off zero so their gradients are exercised in general position
    rng = np.random.default_rng(seed + 1)
    for prm in params.values():
        prm.data += 0.1 * rng.standard_normal(prm.shape)
    targets = answer_targets(records, [1, 1], cfg)

    def loss():
        return T.cross_entropy(forward_dialogs(params, cfg, records).logits[1], targets)

    with T.GradTape():
        value = loss()
    T.backward(value)
    analytic = {k: prm.grad.copy() for k, prm in params.items()}
    results = []
    for name, prm in params.items():
        numeric = T.numerical_gradient(lambda: loss().item(), prm.data, eps)
        results.append(CheckResult(name, T.relative_error(analytic[name], numeric, ZERO_GRAD_FLOOR), MODEL_TOLERANCE))
    return results
