"""Input unit: grid-scene knowledge base and bidirectional GRU question encoder."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .scenegen import COLORS, MATERIALS, SEP, SHAPES, SIZES, SceneGraph
from .tensor import Tensor

_ATTR_INDEX = {
    "color": {v: i for i, v in enumerate(COLORS)},
    "shape": {v: i for i, v in enumerate(SHAPES)},
    "size": {v: i for i, v in enumerate(SIZES)},
    "material": {v: i for i, v in enumerate(MATERIALS)},
}


class VocabularyError(KeyError):
    def __init__(self, token: str):
        super().__init__(f"token {token!r} is not in the vocabulary")
        self.token = token

    def __str__(self) -> str:
        return self.args[0]


@dataclass
class KnowledgeBase:
    features: Tensor  # [B, H*W, d]


@dataclass
class QuestionEncoding:
    q: Tensor  # [B, d]
    words: Tensor  # [B, L, d]
    mask: np.ndarray  # [B, L] bool, False on padding
    lengths: np.ndarray  # [B]


def scene_arrays(scenes: Sequence[SceneGraph], grid: tuple[int, int]) -> dict[str, np.ndarray]:
    H, W = grid
    B, N = len(scenes), H * W
    out = {a: np.zeros((B, N), dtype=np.int64) for a in _ATTR_INDEX}
    occupied = np.zeros((B, N), dtype=bool)
    for b, scene in enumerate(scenes):
        if tuple(scene.grid_size) != (H, W):
            raise T.ShapeError(f"scene grid {scene.grid_size} does not match configured grid {grid}")
        for obj in scene.objects:
            cell = obj.cell[0] * W + obj.cell[1]
            occupied[b, cell] = True
            for attr, index in _ATTR_INDEX.items():
                try:
                    out[attr][b, cell] = index[getattr(obj, attr)]
                except KeyError:
                    raise ValueError(f"{attr}={getattr(obj, attr)!r} is outside the attribute inventory") from None
    out["occupied"] = occupied
    return out


def embed_scene(scenes: Sequence[SceneGraph], params, grid: tuple[int, int]) -> KnowledgeBase:
    """One feature row per grid cell.

    Occupied cells get the sum of their four attribute embeddings, empty cells
    the learned empty embedding; every cell adds its position embedding.
    """
    arr = scene_arrays(scenes, grid)
    occ = arr["occupied"][..., None].astype(params["kb.pos"].dtype)
    obj = None
    for attr in ("color", "shape", "size", "material"):
        e = T.embedding(params[f"kb.{attr}"], arr[attr])
        obj = e if obj is None else obj + e
    feats = obj * occ + params["kb.empty"] * (1.0 - occ) + params["kb.pos"]
    return KnowledgeBase(feats)


def token_ids(token_lists: Sequence[Sequence[str]], vocab: dict[str, int]) -> tuple[np.ndarray, np.ndarray]:
    if any(len(toks) == 0 for toks in token_lists):
        raise ValueError("cannot encode an empty token list")
    L = max(len(toks) for toks in token_lists)
    ids = np.zeros((len(token_lists), L), dtype=np.int64)
    mask = np.zeros((len(token_lists), L), dtype=bool)
    for b, toks in enumerate(token_lists):
        for i, tok in enumerate(toks):
            try:
                ids[b, i] = vocab[tok]
            except KeyError:
                raise VocabularyError(tok) from None
        mask[b, : len(toks)] = True
    return ids, mask


def _linear(x: Tensor, params, prefix: str) -> Tensor:
    return x @ params[prefix + ".w"] + params[prefix + ".b"]


def encode_ids(ids: np.ndarray, mask: np.ndarray, params) -> QuestionEncoding:
    x = T.embedding(params["tok_emb"], ids)
    fwd = T.gru_scan(_linear(x, params, "enc.f.x"), params["enc.f.wh"], params["enc.f.bh"], mask)
    bwd = T.gru_scan(_linear(x, params, "enc.b.x"), params["enc.b.wh"], params["enc.b.bh"], mask, reverse=True)
    # padding carries the forward state to the end; the reverse state finishes at position 0
    final = T.concat_lastdim([fwd[:, -1], bwd[:, 0]])
    q = _linear(final, params, "enc.q")
    words = _linear(T.concat_lastdim([fwd, bwd]), params, "enc.words")
    return QuestionEncoding(q, words, mask, mask.sum(axis=1))


def encode_question(token_lists: Sequence[Sequence[str]], params, vocab: dict[str, int]) -> QuestionEncoding:
    """Encode a batch of token lists (closed vocabulary, no unknown-token fallback)."""
    ids, mask = token_ids(token_lists, vocab)
    return encode_ids(ids, mask, params)


def history_tokens(caption: Sequence[str], history: Sequence[tuple[Sequence[str], str]],
                   current: Sequence[str], max_len: int | None = None) -> list[str]:
    """Token sequence for the concatenated-history input.

    ``[caption, q1, a1, ..., SEP, current]``; with no caption and no history
    the current question is returned unchanged.  Over ``max_len`` the oldest
    segments (caption first) are dropped; the current question is never cut.
    """
    segments = ([list(caption)] if caption else []) + [list(q) + [a] for q, a in history]
    current = list(current)

    def build(segs):
        return [tok for seg in segs for tok in seg] + [SEP] + current if segs else current

    seq = build(segments)
    while max_len is not None and len(seq) > max_len and segments:
        segments = segments[1:]
        seq = build(segments)
    return seq


def encode_history_concat(caption, history, current, params, vocab: dict[str, int],
                          max_len: int | None = None) -> QuestionEncoding:
    return encode_question([history_tokens(caption, history, current, max_len)], params, vocab)
