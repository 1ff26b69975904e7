"""Training loop, Adam optimizer, and the binary checkpoint format."""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .model import (ModelConfig, answer_targets, flags_for, forward_dialogs, forward_turns, init_params,
                    model_name, params_from_arrays)
from .scenegen import DialogRecord

log = logging.getLogger(__name__)

MAGIC = b"CAMMAC01"


@dataclass
class TrainConfig:
    model: str = "caa+mtm"
    learning_rate: float = 2e-4
    p: int = 8
    d: int = 64
    batch_dialogs: int = 12
    batch_turns: int = 128
    max_epochs: int = 25
    early_stop_patience: int = 5
    seed: int = 0
    precision: str = "float32"
    clip_norm: float = 8.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_len: int = 128
    max_steps: int | None = None  # stop after this many optimizer steps (overfit runs)

    def __post_init__(self):
        flags_for(self.model)
        for name in ("learning_rate", "p", "d", "batch_dialogs", "batch_turns", "max_epochs",
                     "early_stop_patience", "clip_norm"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.early_stop_patience > self.max_epochs:
            raise ValueError("early_stop_patience must not exceed max_epochs")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"unknown precision {self.precision!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    def model_config(self, vocab: list[str], answer_vocab: list[str], grid) -> ModelConfig:
        f = flags_for(self.model)
        return ModelConfig(list(vocab), list(answer_vocab), tuple(grid), self.d, self.p,
                           f.cq, f.caa, f.mtm, self.max_len)


# Desk-scale preset: 2000 dialogs and at most 25 epochs, so a larger step than the
# default, and every epoch runs (the best-validation checkpoint is still kept).
DESK = TrainConfig(p=4, d=64, learning_rate=2e-3, early_stop_patience=25)


class TrainingError(RuntimeError):
    pass


class CheckpointFormatError(ValueError):
    pass


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_acc: float
    train_acc: float = float("nan")
    steps: int = 0
    seconds: float = 0.0


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    train_config: TrainConfig
    model_config: ModelConfig
    epoch: int
    val_accuracy: float
    rng_state: dict
    metrics: list[EpochMetrics] = field(default_factory=list)
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def tensors(self) -> dict[str, T.Tensor]:
        return params_from_arrays(self.params)


class Adam:
    """Adaptive-moment optimizer with global gradient-norm clipping."""

    def __init__(self, params: dict[str, T.Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8,
                 clip_norm: float | None = 8.0):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps, self.clip_norm = lr, beta1, beta2, eps, clip_norm
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self) -> float:
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()}
        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
        scale = self.clip_norm / norm if self.clip_norm and norm > self.clip_norm else 1.0
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        lr_t = self.lr * math.sqrt(1 - b2 ** self.t) / (1 - b1 ** self.t)
        for k, p in self.params.items():
            g = grads[k] * scale if scale != 1.0 else grads[k]
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p.data -= (lr_t * m / (np.sqrt(v) + self.eps)).astype(p.dtype, copy=False)
            p.grad = None
        return norm

    def state(self) -> dict[str, np.ndarray]:
        out = {f"adam.m/{k}": v for k, v in self.m.items()}
        out.update({f"adam.v/{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for k in self.m:
            self.m[k] = arrays[f"adam.m/{k}"].copy()
            self.v[k] = arrays[f"adam.v/{k}"].copy()
        self.t = t


# Batching -------------------------------------------------------------------

def _turn_loss(params, mcfg: ModelConfig, batch: Sequence[DialogRecord]):
    """Mean cross-entropy over every question turn of a dialog batch; the caption adds no loss."""
    out = forward_dialogs(params, mcfg, batch)
    n_turns = len(batch[0].turns)
    loss, correct = None, 0
    for t in range(1, n_turns + 1):
        targets = answer_targets(batch, [t] * len(batch), mcfg)
        l = T.cross_entropy(out.logits[t], targets)
        correct += int((out.logits[t].data.argmax(axis=-1) == targets).sum())
        loss = l if loss is None else loss + l
    return loss * (1.0 / n_turns), correct, len(batch) * n_turns


def _independent_loss(params, mcfg: ModelConfig, items):
    records = [r for r, _ in items]
    ts = [t for _, t in items]
    logits = forward_turns(params, mcfg, records, ts)
    targets = answer_targets(records, ts, mcfg)
    correct = int((logits.data.argmax(axis=-1) == targets).sum())
    return T.cross_entropy(logits, targets), correct, len(items)


def _batches(mcfg: ModelConfig, cfg: TrainConfig, records: Sequence[DialogRecord], rng: np.random.Generator):
    """Shuffled batches: whole dialogs for history-aware models, single turns otherwise."""
    if mcfg.history_aware:
        # dialogs of equal length share a batch
        order = rng.permutation(len(records))
        by_len: dict[int, list[int]] = {}
        for i in order:
            by_len.setdefault(len(records[i].turns), []).append(int(i))
        batches = []
        for idx in by_len.values():
            batches.extend([records[j] for j in idx[s:s + cfg.batch_dialogs]]
                           for s in range(0, len(idx), cfg.batch_dialogs))
        return [("dialogs", b) for b in batches]
    items = [(r, t) for r in records for t in range(1, len(r.turns) + 1)]
    order = rng.permutation(len(items))
    return [("turns", [items[j] for j in order[s:s + cfg.batch_turns]])
            for s in range(0, len(items), cfg.batch_turns)]


def predict(params, mcfg: ModelConfig, records: Sequence[DialogRecord], batch_size: int = 50) -> np.ndarray:
    """Argmax answer index for every question turn, shape [n_dialogs, n_turns]."""
    preds = []
    for s in range(0, len(records), batch_size):
        chunk = records[s:s + batch_size]
        n_turns = {len(r.turns) for r in chunk}
        if len(n_turns) > 1:
            for r in chunk:
                preds.append(predict(params, mcfg, [r])[0])
            continue
        out = forward_dialogs(params, mcfg, chunk)
        preds.extend(np.stack([lg.data.argmax(axis=-1) for lg in out.logits[1:]], axis=1))
    return preds


def accuracy(params, mcfg: ModelConfig, records: Sequence[DialogRecord]) -> float:
    preds = predict(params, mcfg, records)
    correct = total = 0
    for rec, pred in zip(records, preds):
        gold = np.array([mcfg.answer_index[t.answer] for t in rec.turns])
        correct += int((np.asarray(pred) == gold).sum())
        total += len(gold)
    return correct / total


# Training ---------------------------------------------------------------------

@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    metrics: list[EpochMetrics]


def _snapshot(params) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def train(train_set: Sequence[DialogRecord], val_set: Sequence[DialogRecord], cfg: TrainConfig,
          vocab: list[str], answer_vocab: list[str], grid=(4, 4), *, resume: Checkpoint | None = None,
          on_epoch: Callable[[EpochMetrics, Checkpoint], None] | None = None) -> TrainResult:
    """Train with early stopping on validation accuracy; returns the best-val checkpoint.

    ``on_epoch`` receives each epoch's metrics and a resumable checkpoint of
    the latest state; passing that checkpoint back as ``resume`` continues
    training exactly as if it had never stopped.
    """
    if not train_set or not val_set:
        raise TrainingError("training and validation sets must be non-empty")
    mcfg = cfg.model_config(vocab, answer_vocab, grid)
    rng = np.random.default_rng(cfg.seed)
    params = init_params(mcfg, rng, cfg.dtype)
    opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps, cfg.clip_norm)
    metrics: list[EpochMetrics] = []
    best_val, best_epoch, best_params, stale, start = -1.0, 0, _snapshot(params), 0, 1
    if resume is not None:
        if resume.model_config.to_dict() != mcfg.to_dict():
            raise TrainingError("resume checkpoint was trained with a different model configuration")
        for k, p in params.items():
            p.data = resume.params[k].astype(cfg.dtype).copy()
        opt.load_state(resume.optimizer, resume.extra["opt_step"])
        rng.bit_generator.state = resume.rng_state
        metrics = list(resume.metrics)
        best_val, best_epoch, stale = resume.extra["best_val"], resume.extra["best_epoch"], resume.extra["stale"]
        best_params = {k[len("best/"):]: v.copy() for k, v in resume.optimizer.items() if k.startswith("best/")}
        start = resume.epoch + 1

    steps = opt.t
    for epoch in range(start, cfg.max_epochs + 1):
        t0 = time.time()
        total_loss = total_n = total_correct = 0
        for kind, batch in _batches(mcfg, cfg, train_set, rng):
            with T.GradTape():
                try:
                    if kind == "dialogs":
                        loss, correct, n = _turn_loss(params, mcfg, batch)
                    else:
                        loss, correct, n = _independent_loss(params, mcfg, batch)
                except T.NonFiniteError as exc:
                    raise TrainingError(f"non-finite values at epoch {epoch}, step {steps + 1}: "
                                        f"first produced by op '{exc.op}'") from exc
            T.backward(loss)
            opt.step()
            steps += 1
            total_loss += loss.item() * n
            total_n += n
            total_correct += correct
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
        val_acc = accuracy(params, mcfg, val_set)
        m = EpochMetrics(epoch, total_loss / total_n, val_acc, total_correct / total_n, steps, time.time() - t0)
        metrics.append(m)
        log.info("epoch %d loss %.4f train_acc %.4f val_acc %.4f (%.1fs)", epoch, m.train_loss,
                 m.train_acc, val_acc, m.seconds)
        if val_acc > best_val:
            best_val, best_epoch, best_params, stale = val_acc, epoch, _snapshot(params), 0
        else:
            stale += 1
        last = _make_checkpoint(params, cfg, mcfg, epoch, val_acc, rng, metrics, opt, best_params,
                                dict(best_val=best_val, best_epoch=best_epoch, stale=stale))
        if on_epoch is not None:
            on_epoch(m, last)
        if stale >= cfg.early_stop_patience and epoch < cfg.max_epochs:
            log.info("early stop after epoch %d (best %d: %.4f)", epoch, best_epoch, best_val)
            break
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
    else:
        if start > cfg.max_epochs:
            last = resume
    best = Checkpoint(best_params, cfg, mcfg, best_epoch, best_val, rng.bit_generator.state, list(metrics))
    return TrainResult(best, last, metrics)


def _make_checkpoint(params, cfg, mcfg, epoch, val_acc, rng, metrics, opt, best_params, extra) -> Checkpoint:
    optimizer = opt.state()
    optimizer.update({f"best/{k}": v for k, v in best_params.items()})
    extra = dict(extra, opt_step=opt.t)
    return Checkpoint(_snapshot(params), cfg, mcfg, epoch, val_acc, rng.bit_generator.state, list(metrics),
                      {k: v.copy() for k, v in optimizer.items()}, extra)


# Checkpoint file format ---------------------------------------------------------
#   magic "CAMMAC01" | u32 count | per tensor: u32 name_len, name, u32 rank, u32 dims..., f32 data
#   | JSON trailer | u64 trailer length

def save_checkpoint(ckpt: Checkpoint, path) -> None:
    tensors = dict(ckpt.params)
    tensors.update(ckpt.optimizer)
    chunks = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        chunks.append(struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    trailer = json.dumps({
        "train_config": asdict(ckpt.train_config),
        "model_config": ckpt.model_config.to_dict(),
        "epoch": ckpt.epoch,
        "val_accuracy": ckpt.val_accuracy,
        "rng_state": ckpt.rng_state,
        "metrics": [asdict(m) for m in ckpt.metrics],
        "param_names": list(ckpt.params),
        "extra": ckpt.extra,
    }).encode("utf-8")
    chunks.append(trailer)
    chunks.append(struct.pack("<Q", len(trailer)))
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if len(buf) < len(MAGIC) + 12 or buf[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic bytes)")
    (trailer_len,) = struct.unpack_from("<Q", buf, len(buf) - 8)
    body_end = len(buf) - 8 - trailer_len
    if trailer_len <= 0 or body_end < len(MAGIC) + 4:
        raise CheckpointFormatError(f"{path}: truncated file or corrupt trailer length")
    try:
        meta = json.loads(buf[body_end: len(buf) - 8])
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise CheckpointFormatError(f"{path}: trailer is not valid JSON (truncated?)") from None
    off = len(MAGIC)
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, off)
            off += 4
            if off + nlen > body_end:
                raise CheckpointFormatError(f"{path}: tensor name runs past the tensor table")
            name = buf[off: off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            if off + 4 * rank > body_end:
                raise CheckpointFormatError(f"{path}: shape of {name!r} runs past the tensor table")
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            nbytes = 4 * int(np.prod(dims, dtype=np.int64))
            if off + nbytes > body_end:
                raise CheckpointFormatError(f"{path}: tensor {name!r} runs past the tensor table")
            tensors[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=off).reshape(dims).copy()
            off += nbytes
    except (struct.error, UnicodeDecodeError):
        raise CheckpointFormatError(f"{path}: corrupt or truncated tensor table") from None
    if off != body_end:
        raise CheckpointFormatError(f"{path}: tensor table size does not match trailer offset")
    names = meta["param_names"]
    if set(names) - set(tensors):
        raise CheckpointFormatError(f"{path}: missing tensors {sorted(set(names) - set(tensors))}")
    mcfg = ModelConfig.from_dict(meta["model_config"])
    from .model import param_shapes
    for name, (shape, _) in param_shapes(mcfg).items():
        if name not in tensors or tensors[name].shape != tuple(shape):
            raise CheckpointFormatError(f"{path}: tensor {name!r} inconsistent with model config")
    params = {k: tensors[k] for k in names}
    optimizer = {k: v for k, v in tensors.items() if k not in params}
    return Checkpoint(
        params=params,
        train_config=TrainConfig(**meta["train_config"]),
        model_config=mcfg,
        epoch=meta["epoch"],
        val_accuracy=meta["val_accuracy"],
        rng_state=meta["rng_state"],
        metrics=[EpochMetrics(**m) for m in meta["metrics"]],
        optimizer=optimizer,
        extra=meta["extra"],
    )
