"""Accuracy breakdowns, control-attention summaries and their CSV reports."""

from __future__ import annotations

import csv
import hashlib
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import ModelConfig, forward_dialogs, params_from_arrays
from .scenegen import DialogRecord, queried_object
from .trainer import Checkpoint, predict

AXES = ("overall", "family", "template", "turn", "coref")
REPORT_FILES = {
    "overall": "breakdown_overall.csv",
    "template": "breakdown_template.csv",
    "turn": "breakdown_turn.csv",
    "coref": "breakdown_coref.csv",
}
NO_COREF = "none"


class VocabMismatchError(ValueError):
    pass


class UnsupportedAnalysisError(ValueError):
    pass


def vocab_hash(vocab: Sequence[str]) -> str:
    return hashlib.sha256(json.dumps(list(vocab)).encode("utf-8")).hexdigest()[:12]


def check_vocab(mcfg: ModelConfig, vocab: Sequence[str], answer_vocab: Sequence[str]) -> None:
    """Raise unless a dataset's vocabularies equal the ones the model was built with."""
    for kind, ours, theirs in (("question", mcfg.vocab, vocab), ("answer", mcfg.answer_vocab, answer_vocab)):
        if list(ours) != list(theirs):
            raise VocabMismatchError(f"{kind} vocabulary mismatch: checkpoint {vocab_hash(ours)} "
                                     f"vs dataset {vocab_hash(theirs)}")


# Breakdowns -----------------------------------------------------------------

@dataclass
class BreakdownReport:
    """Per-bucket (correct, total) counts along each axis; empty buckets never appear."""

    counts: dict[str, dict[str, list[int]]] = field(default_factory=lambda: {a: {} for a in AXES})

    def add(self, axis: str, bucket, correct: bool) -> None:
        c = self.counts[axis].setdefault(str(bucket), [0, 0])
        c[0] += int(correct)
        c[1] += 1

    def accuracy(self, axis: str = "overall", bucket: str = "all") -> float:
        correct, total = self.counts[axis][str(bucket)]
        return correct / total

    @property
    def overall(self) -> float:
        return self.accuracy()

    def table(self, axis: str) -> dict[str, float]:
        return {b: c / n for b, (c, n) in self.counts[axis].items()}

    def total(self, axis: str = "overall") -> int:
        return sum(n for _, n in self.counts[axis].values())

    def merge(self, other: "BreakdownReport") -> "BreakdownReport":
        out = BreakdownReport()
        for rep in (self, other):
            for axis, buckets in rep.counts.items():
                for b, (c, n) in buckets.items():
                    cur = out.counts[axis].setdefault(b, [0, 0])
                    cur[0] += c
                    cur[1] += n
        return out


def _sort_key(bucket: str):
    return (0, int(bucket), "") if bucket.isdigit() else (1, 0, bucket)


def breakdown(records: Sequence[DialogRecord], predictions: Iterable[Sequence[str]]) -> BreakdownReport:
    """Compare predicted answer strings with gold answers, bucketed along every axis."""
    report = BreakdownReport()
    for rec, preds in zip(records, predictions, strict=True):
        if len(preds) != len(rec.turns):
            raise ValueError(f"expected {len(rec.turns)} predictions, got {len(preds)}")
        for t, (turn, pred) in enumerate(zip(rec.turns, preds), start=1):
            ok = pred == turn.answer
            report.add("overall", "all", ok)
            report.add("family", turn.question_family, ok)
            report.add("template", turn.template_id, ok)
            report.add("turn", t, ok)
            report.add("coref", NO_COREF if turn.coref_distance is None else turn.coref_distance, ok)
    return report


def evaluate(ckpt: Checkpoint, records: Sequence[DialogRecord], vocab=None, answer_vocab=None) -> BreakdownReport:
    """Argmax accuracy of a checkpoint on a dataset; parameters are never modified."""
    mcfg = ckpt.model_config
    if vocab is not None or answer_vocab is not None:
        check_vocab(mcfg, vocab if vocab is not None else mcfg.vocab,
                    answer_vocab if answer_vocab is not None else mcfg.answer_vocab)
    params = params_from_arrays(ckpt.params)
    preds = predict(params, mcfg, records)
    return breakdown(records, [[mcfg.answer_vocab[i] for i in p] for p in preds])


def referent_cell_hits(ckpt: Checkpoint, records: Sequence[DialogRecord], batch_size: int = 50) -> tuple[int, int]:
    """Correctly answered seek questions whose final read step peaks on the queried object's cell.

    Returns (hits, correct seek questions with a queried object).
    """
    mcfg = ckpt.model_config
    params = params_from_arrays(ckpt.params)
    W = mcfg.grid[1]
    hits = total = 0
    for s in range(0, len(records), batch_size):
        chunk = list(records[s: s + batch_size])
        groups = defaultdict(list)
        for r in chunk:
            groups[len(r.turns)].append(r)
        for sub in groups.values():
            fwd = forward_dialogs(params, mcfg, sub)
            for t in range(1, len(sub[0].turns) + 1):
                pred = fwd.logits[t].data.argmax(axis=-1)
                peak = fwd.cell_attention[t][-1].argmax(axis=-1)
                for b, rec in enumerate(sub):
                    turn = rec.turns[t - 1]
                    obj = queried_object(rec.scene, turn.template_id, turn.bindings)
                    if obj is None or mcfg.answer_vocab[pred[b]] != turn.answer:
                        continue
                    r, c = rec.scene.objects[obj].cell
                    total += 1
                    hits += int(peak[b] == r * W + c)
    return hits, total


# Attention summaries -------------------------------------------------------------

@dataclass
class TurnAttentionSummary:
    """``weights[t, s]``: strongest attention from any step of turn t to any step of turn s (s <= t)."""

    dialog_id: int
    weights: np.ndarray  # [T+1, T+1], NaN above the diagonal

    def rows(self):
        n = self.weights.shape[0]
        for t in range(n):
            for s in range(t + 1):
                yield self.dialog_id, t, s, float(self.weights[t, s])


def reduce_attention(records, n_turns: int, p: int, batch: int) -> np.ndarray:
    """Max-reduce per-step attention records into [batch, n_turns, n_turns] turn matrices."""
    out = np.full((batch, n_turns, n_turns), np.nan)
    for rec in records:
        t = rec.turn
        for s in range(t + 1):
            span = rec.weights[:, s * p: (s + 1) * p]
            if span.shape[1] == 0:
                continue
            best = span.max(axis=1)
            cur = out[:, t, s]
            out[:, t, s] = np.where(np.isnan(cur), best, np.maximum(cur, best))
    return out


def summarize_attention(ckpt: Checkpoint, records: Sequence[DialogRecord], batch_size: int = 50,
                        first_id: int = 0) -> list[TurnAttentionSummary]:
    mcfg = ckpt.model_config
    if not mcfg.caa:
        raise UnsupportedAnalysisError("attention analysis needs a checkpoint trained with context-aware attention")
    params = params_from_arrays(ckpt.params)
    out = []
    for s in range(0, len(records), batch_size):
        chunk = list(records[s: s + batch_size])
        groups = defaultdict(list)
        for i, r in enumerate(chunk):
            groups[len(r.turns)].append(i)
        found = {}
        for idx in groups.values():
            sub = [chunk[i] for i in idx]
            fwd = forward_dialogs(params, mcfg, sub)
            mats = reduce_attention(fwd.attention, len(sub[0].turns) + 1, mcfg.p, len(sub))
            found.update({i: m for i, m in zip(idx, mats)})
        out.extend(TurnAttentionSummary(first_id + s + i, found[i]) for i in range(len(chunk)))
    return out


def mean_attention(summaries: Sequence[TurnAttentionSummary]) -> tuple[np.ndarray, np.ndarray]:
    """Mean turn matrix over dialogs and the number of dialogs contributing to each cell."""
    n = max(s.weights.shape[0] for s in summaries)
    total, count = np.zeros((n, n)), np.zeros((n, n), dtype=np.int64)
    for s in summaries:
        k = s.weights.shape[0]
        ok = ~np.isnan(s.weights)
        total[:k, :k][ok] += s.weights[ok]
        count[:k, :k][ok] += 1
    with np.errstate(invalid="ignore"):
        return np.where(count > 0, total / np.maximum(count, 1), np.nan), count


@dataclass
class GroundingScore:
    mean_weight: float
    mean_uniform: float
    n_questions: int

    @property
    def above_uniform(self) -> bool:
        return self.mean_weight > self.mean_uniform


def coreferent_attention(summaries: Sequence[TurnAttentionSummary], records: Sequence[DialogRecord]) -> GroundingScore:
    """Average summary weight on each coreferent question's gold referent turn vs. the 1/(t+1) baseline."""
    weights, uniform = [], []
    for summ, rec in zip(summaries, records, strict=True):
        for t, turn in enumerate(rec.turns, start=1):
            if turn.coref_turn is None:
                continue
            weights.append(summ.weights[t, turn.coref_turn])
            uniform.append(1.0 / (t + 1))
    if not weights:
        raise ValueError("no coreferent questions in the dataset")
    return GroundingScore(float(np.mean(weights)), float(np.mean(uniform)), len(weights))


# CSV reports ---------------------------------------------------------------------

def _fmt(x: float) -> str:
    return f"{x:.4f}"


def write_reports(report: BreakdownReport, outdir, summaries: Sequence[TurnAttentionSummary] | None = None) -> list[Path]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    for axis, name in REPORT_FILES.items():
        path = outdir / name
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["axis", "bucket", "correct", "total", "accuracy"])
            axes = ("overall", "family") if axis == "overall" else (axis,)
            for a in axes:
                for b in sorted(report.counts[a], key=_sort_key):
                    c, n = report.counts[a][b]
                    w.writerow([a, b, c, n, _fmt(c / n)])
        written.append(path)
    if summaries is not None:
        written.append(write_attention(summaries, outdir / "attention_summary.csv"))
    return written


def read_reports(outdir) -> BreakdownReport:
    report = BreakdownReport()
    for name in REPORT_FILES.values():
        with (Path(outdir) / name).open(newline="") as fh:
            for row in csv.DictReader(fh):
                c, n = int(row["correct"]), int(row["total"])
                if _fmt(c / n) != row["accuracy"]:
                    raise ValueError(f"{name}: accuracy {row['accuracy']} disagrees with {c}/{n}")
                report.counts[row["axis"]][row["bucket"]] = [c, n]
    return report


def write_attention(summaries: Sequence[TurnAttentionSummary], path) -> Path:
    """Per-dialog rows, plus the mean matrix in a sibling ``*_mean.csv``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dialog_id", "t", "s", "weight"])
        for summ in summaries:
            for dialog_id, t, s, weight in summ.rows():
                w.writerow([dialog_id, t, s, _fmt(weight)])
    if summaries:
        mean, count = mean_attention(summaries)
        with path.with_name(path.stem + "_mean.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "s", "weight", "dialogs"])
            for t in range(mean.shape[0]):
                for s in range(t + 1):
                    if count[t, s]:
                        w.writerow([t, s, _fmt(mean[t, s]), int(count[t, s])])
    return path


def read_attention(path) -> list[tuple[int, int, int, float]]:
    with Path(path).open(newline="") as fh:
        return [(int(r["dialog_id"]), int(r["t"]), int(r["s"]), float(r["weight"])) for r in csv.DictReader(fh)]
