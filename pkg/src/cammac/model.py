"""Model configuration, named parameters, and batched dialog forward passes."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .cam import AttentionRecord, DialogState, Flags, new_dialog_state, run_turn
from .encoder import QuestionEncoding, embed_scene, encode_ids, history_tokens, token_ids
from .scenegen import ATTRIBUTES, DialogRecord
from .tensor import Tensor

# Table-1 style model names -> (cq, caa, mtm)
MODEL_FLAGS = {
    "vanilla": Flags(cq=False, caa=False, mtm=False),
    "mtm": Flags(cq=False, caa=False, mtm=True),
    "caa": Flags(cq=False, caa=True, mtm=False),
    "caa+mtm": Flags(cq=False, caa=True, mtm=True),
    "cq": Flags(cq=True, caa=False, mtm=False),
    "cq+caa": Flags(cq=True, caa=True, mtm=False),
    "cq+caa+mtm": Flags(cq=True, caa=True, mtm=True),
}


def flags_for(model: str) -> Flags:
    try:
        return MODEL_FLAGS[model]
    except KeyError:
        raise ValueError(f"unknown model {model!r}; valid names: {', '.join(MODEL_FLAGS)}") from None


def model_name(flags: Flags) -> str:
    for name, f in MODEL_FLAGS.items():
        if f == flags:
            return name
    raise ValueError(f"no model name for {flags}")


@dataclass
class ModelConfig:
    vocab: list[str]
    answer_vocab: list[str]
    grid: tuple[int, int] = (4, 4)
    d: int = 64
    p: int = 4
    cq: bool = False
    caa: bool = False
    mtm: bool = False
    max_len: int = 128
    _index: dict = field(default=None, init=False, repr=False, compare=False)
    _answer_index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.grid = tuple(self.grid)
        self._index = {w: i for i, w in enumerate(self.vocab)}
        self._answer_index = {a: i for i, a in enumerate(self.answer_vocab)}

    @property
    def flags(self) -> Flags:
        return Flags(self.cq, self.caa, self.mtm)

    @property
    def token_index(self) -> dict[str, int]:
        return self._index

    @property
    def answer_index(self) -> dict[str, int]:
        return self._answer_index

    @property
    def history_aware(self) -> bool:
        """True when turns must be fed in order within a dialog."""
        return self.caa or self.mtm

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if not k.startswith("_")}
        d["grid"] = list(self.grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: v for k, v in d.items() if not k.startswith("_")})


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[tuple[int, ...], str]]:
    """Name -> (shape, init kind) where kind is 'weight', 'bias' or 'embedding'."""
    d, V, A = cfg.d, len(cfg.vocab), len(cfg.answer_vocab)
    N = cfg.grid[0] * cfg.grid[1]
    shapes: dict[str, tuple[tuple[int, ...], str]] = {}

    def lin(name, fan_in, fan_out):
        shapes[name + ".w"] = ((fan_in, fan_out), "weight")
        shapes[name + ".b"] = ((fan_out,), "bias")

    shapes["tok_emb"] = ((V, d), "embedding")
    for direction in ("f", "b"):
        lin(f"enc.{direction}.x", d, 3 * d)
        shapes[f"enc.{direction}.wh"] = ((d, 3 * d), "weight")
        shapes[f"enc.{direction}.bh"] = ((3 * d,), "bias")
    lin("enc.q", 2 * d, d)
    lin("enc.words", 2 * d, d)
    for attr, values in ATTRIBUTES.items():
        shapes[f"kb.{attr}"] = ((len(values), d), "embedding")
    shapes["kb.empty"] = ((d,), "embedding")
    shapes["kb.pos"] = ((N, d), "embedding")
    shapes["ctrl.init"] = ((d,), "embedding")
    for k in range(cfg.p):
        lin(f"ctrl.q{k}", d, d)
    lin("ctrl.inter", 2 * d, d)
    lin("ctrl.attn", d, 1)
    lin("read.mem", d, d)
    lin("read.comb", 2 * d, d)
    lin("read.attn", d, 1)
    lin("write", 2 * d, d)
    lin("out.hidden", 2 * d, d)
    lin("out.logits", d, A)
    if cfg.caa:
        shapes["caa.proj_a"] = ((d, d), "weight")
        shapes["caa.proj_b"] = ((d, d), "weight")
        lin("fusion.r", 4 * d, d)
        lin("fusion.g", 4 * d, d)
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    params = {}
    for name, (shape, kind) in param_shapes(cfg).items():
        if kind == "bias":
            data = np.zeros(shape)
        elif kind == "embedding":
            data = rng.normal(0.0, 1.0 / np.sqrt(cfg.d), size=shape)
        else:
            limit = np.sqrt(6.0 / (shape[-2] + shape[-1]))
            data = rng.uniform(-limit, limit, size=shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    return params


def params_from_arrays(arrays: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in arrays.items()}


def parameter_count(params: dict[str, Tensor]) -> int:
    return sum(p.size for p in params.values())


# Forward passes ----------------------------------------------------------------

def turn_tokens(record: DialogRecord, t: int, cfg: ModelConfig) -> list[str]:
    """Input tokens for turn ``t`` (0 is the caption) under the configured input mode."""
    current = list(record.caption) if t == 0 else list(record.turns[t - 1].text)
    if not cfg.cq or t == 0:
        return current
    history = [(turn.text, turn.answer) for turn in record.turns[: t - 1]]
    return history_tokens(record.caption, history, current, cfg.max_len)


def encode_turn(records: Sequence[DialogRecord], ts: Sequence[int], params, cfg: ModelConfig) -> QuestionEncoding:
    ids, mask = token_ids([turn_tokens(r, t, cfg) for r, t in zip(records, ts)], cfg.token_index)
    return encode_ids(ids, mask, params)


def answer_targets(records: Sequence[DialogRecord], ts: Sequence[int], cfg: ModelConfig) -> np.ndarray:
    return np.array([cfg.answer_index[r.turns[t - 1].answer] for r, t in zip(records, ts)], dtype=np.int64)


@dataclass
class DialogForward:
    logits: list[Tensor]  # per turn index, 0 = caption
    attention: list[AttentionRecord]
    word_attention: list[list[np.ndarray]]
    cell_attention: list[list[np.ndarray]]
    state: DialogState


def forward_dialogs(params, cfg: ModelConfig, records: Sequence[DialogRecord], *, upto: int | None = None,
                    keep_log: bool = True, state: DialogState | None = None) -> DialogForward:
    """Run a batch of equal-length dialogs turn by turn (caption first).

    ``upto`` stops after that turn index.  Passing ``state`` resumes from a
    previous call, which must have covered turns ``0 .. state.turn_index - 1``.
    """
    n_turns = {len(r.turns) for r in records}
    if len(n_turns) != 1:
        raise ValueError(f"dialogs in one batch must have equal length, got {sorted(n_turns)}")
    last = n_turns.pop() if upto is None else upto
    kb = embed_scene([r.scene for r in records], params, cfg.grid)
    state = new_dialog_state(keep_log) if state is None else state
    out = DialogForward([], [], [], [], state)
    for t in range(state.turn_index, last + 1):
        qenc = encode_turn(records, [t] * len(records), params, cfg)
        res = run_turn(state, kb, qenc, cfg.flags, params, cfg.p)
        state = res.state
        out.logits.append(res.logits)
        out.attention.extend(res.records)
        out.word_attention.append(res.word_attention)
        out.cell_attention.append(res.cell_attention)
    out.state = state
    return out


def forward_turns(params, cfg: ModelConfig, records: Sequence[DialogRecord], ts: Sequence[int]) -> Tensor:
    """Independent single-turn passes (history only via concatenated input when cq is set)."""
    if cfg.history_aware:
        raise ValueError("independent-turn forward is only valid for history-agnostic models")
    kb = embed_scene([r.scene for r in records], params, cfg.grid)
    qenc = encode_turn(records, ts, params, cfg)
    return run_turn(new_dialog_state(), kb, qenc, cfg.flags, params, cfg.p).logits
