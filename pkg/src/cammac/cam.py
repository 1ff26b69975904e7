"""Context-aware attention over past control states and multi-turn memory.

A :class:`DialogState` carries everything one dialog needs across turns: the
chronological log of raw control states (turn-major, step-minor) and the
memory handed from one turn to the next.  :func:`run_turn` executes one full
MAC pass for a batch of dialogs that are all at the same turn index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoder import KnowledgeBase, QuestionEncoding
from .maccell import ControlState, control_step, linear, output_answer, read_step, write_step
from .tensor import Tensor


@dataclass(frozen=True)
class Flags:
    cq: bool = False
    caa: bool = False
    mtm: bool = False


@dataclass
class AttentionRecord:
    turn: int
    step: int
    weights: np.ndarray  # [B, turn*p + step + 1]; the last entry is the current step itself


@dataclass
class DialogState:
    control_log: list[ControlState] | None = field(default_factory=list)
    carry_memory: Tensor | None = None
    turn_index: int = 0
    keys: list[Tensor] = field(default_factory=list)  # key projection of each log entry


def new_dialog_state(keep_log: bool = True) -> DialogState:
    """Fresh state; ``keep_log=False`` builds the log-free variant (no CAA possible)."""
    return DialogState(control_log=[] if keep_log else None)


def init_turn_memory(state: DialogState, mtm: bool, batch: int, d: int, dtype=np.float32) -> Tensor:
    if state.turn_index == 0 or not mtm or state.carry_memory is None:
        return Tensor(np.zeros((batch, d), dtype=dtype))
    return state.carry_memory


def fusion(x: Tensor, y: Tensor, params) -> Tensor:
    """Gated merge of ``x`` with a candidate computed from ``x`` and ``y``."""
    z = T.concat_lastdim([x, y, x * y, x - y])
    candidate = linear(z, params, "fusion.r").relu()
    gate = linear(z, params, "fusion.g").sigmoid()
    return gate * candidate + (1.0 - gate) * x


def context_attend(raw: ControlState, state: DialogState, params) -> tuple[Tensor, AttentionRecord]:
    """Attend from the newest log entry (``raw``) over the whole log, itself included."""
    log = state.control_log
    if not log or log[-1] is not raw:
        raise ValueError("raw control state must be the last entry of the control log")
    B, d = raw.c.shape
    query = raw.c @ params["caa.proj_a"]
    keys = T.stack(state.keys, axis=1)  # [B, n, d]
    scores = (keys @ query.reshape(B, d, 1)).reshape(B, len(log)) * (1.0 / math.sqrt(d))
    weights = T.softmax_lastdim(scores)
    values = T.stack([entry.c for entry in log], axis=1)
    attended = (weights.reshape(B, 1, len(log)) @ values).reshape(B, d)
    record = AttentionRecord(raw.turn_index, raw.step_index, weights.data)
    return fusion(raw.c, attended, params), record


def causal_attention_matrix(controls: Tensor, params) -> Tensor:
    """Full lower-triangular attention over a stacked log [B, n, d] -> [B, n, n].

    Row i equals the online weights :func:`context_attend` produced for
    entry i; positions above the diagonal are masked before the softmax.
    """
    B, n, d = controls.shape
    scores = (controls @ params["caa.proj_a"]) @ T.transpose(controls @ params["caa.proj_b"])
    scores = scores * (1.0 / math.sqrt(d))
    causal = np.tril(np.ones((n, n), dtype=bool))
    return T.softmax_lastdim(T.masked_fill(scores, causal))


@dataclass
class TurnResult:
    logits: Tensor
    state: DialogState
    records: list[AttentionRecord]
    word_attention: list[np.ndarray]
    cell_attention: list[np.ndarray]


def run_turn(state: DialogState, kb: KnowledgeBase, qenc: QuestionEncoding, flags: Flags, params,
             p: int) -> TurnResult:
    """One dialog turn: memory init, ``p`` control/attend/read/write steps, answer."""
    q, words = qenc.q, qenc.words
    B, d = q.shape
    t = state.turn_index
    if flags.caa and state.control_log is None:
        raise ValueError("context-aware attention needs a control log")
    new = DialogState(
        control_log=None if state.control_log is None else list(state.control_log),
        carry_memory=state.carry_memory,
        turn_index=t,
        keys=list(state.keys),
    )
    m = init_turn_memory(state, flags.mtm, B, d, q.dtype)
    prev = params["ctrl.init"] + np.zeros((B, d), dtype=q.dtype)
    records, word_attn, cell_attn = [], [], []
    for k in range(p):
        c_raw, wa = control_step(prev, q, words, qenc.mask, k, params)
        entry = ControlState(c_raw, k, t)
        if new.control_log is not None:
            new.control_log.append(entry)
        if flags.caa:
            new.keys.append(c_raw @ params["caa.proj_b"])
            c, rec = context_attend(entry, new, params)
            records.append(rec)
        else:
            c = c_raw
        r, ca = read_step(m, c, kb.features, params)
        m = write_step(m, r, params)
        prev = c
        word_attn.append(wa)
        cell_attn.append(ca)
    logits = output_answer(m, q, params)
    if flags.mtm:
        new.carry_memory = m
    new.turn_index = t + 1
    return TurnResult(logits, new, records, word_attn, cell_attn)
