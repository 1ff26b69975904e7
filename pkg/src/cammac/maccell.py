"""MAC reasoning cell: control, read and write units plus the output classifier.

All functions are batched: vectors are [B, d], word states [B, L, d] and the
knowledge base [B, N, d].  Each unit also returns its attention distribution
as a plain array so callers can inspect it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class ControlState:
    c: Tensor  # [B, d]
    step_index: int
    turn_index: int


def linear(x: Tensor, params, prefix: str) -> Tensor:
    return x @ params[prefix + ".w"] + params[prefix + ".b"]


def _expand(x: Tensor) -> Tensor:
    B, d = x.shape
    return x.reshape(B, 1, d)


def _attend(logits: Tensor, values: Tensor) -> Tensor:
    """Weighted sum over the middle axis of ``values`` using [B, n] weights."""
    B, n = logits.shape
    return (logits.reshape(B, 1, n) @ values).reshape(B, values.shape[-1])


def control_step(prev: Tensor, q: Tensor, words: Tensor, mask: np.ndarray, k: int, params):
    """Next reasoning operation: attention over contextual word states."""
    cq = linear(q, params, f"ctrl.q{k}")
    interaction = linear(T.concat_lastdim([cq, prev]), params, "ctrl.inter")
    B, L, _ = words.shape
    logits = linear(_expand(interaction) * words, params, "ctrl.attn").reshape(B, L)
    attn = T.softmax_lastdim(T.masked_fill(logits, mask))
    return _attend(attn, words), attn.data


def read_step(m: Tensor, c: Tensor, kb: Tensor, params):
    """Retrieve information from the knowledge base guided by memory and control."""
    B, N, _ = kb.shape
    interaction = linear(_expand(m) * kb, params, "read.mem")
    combined = linear(T.concat_lastdim([interaction, kb]), params, "read.comb")
    logits = linear(_expand(c) * combined, params, "read.attn").reshape(B, N)
    attn = T.softmax_lastdim(logits)
    return _attend(attn, kb), attn.data


def write_step(m_prev: Tensor, r: Tensor, params) -> Tensor:
    return linear(T.concat_lastdim([r, m_prev]), params, "write")


def output_answer(m: Tensor, q: Tensor, params) -> Tensor:
    hidden = linear(T.concat_lastdim([m, q]), params, "out.hidden").relu()
    return linear(hidden, params, "out.logits")
