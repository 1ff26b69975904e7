"""Synthetic grid scenes and templated multi-turn dialogs with exact answers.

Scenes are occupancy grids.  ``front``/``behind`` compare row indices
(smaller row is in front), ``left``/``right`` compare column indices.
Every question answer is produced by :func:`oracle_answer`, which enumerates
the scene objects directly from the turn's resolved bindings.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

COLORS = ("blue", "brown", "cyan", "gray", "green", "purple", "red", "yellow")
SHAPES = ("cylinder", "cube", "sphere")
SIZES = ("large", "small")
MATERIALS = ("metal", "rubber")
ATTRIBUTES = {"color": COLORS, "shape": SHAPES, "size": SIZES, "material": MATERIALS}
# word order inside a noun phrase, e.g. "small red metal cube"
PHRASE_ORDER = ("size", "color", "material", "shape")
RELATIONS = ("left", "right", "front", "behind")
RELATION_WORDS = {"left": ["left", "of"], "right": ["right", "of"], "front": ["in", "front", "of"], "behind": ["behind"]}
FAMILIES = ("count", "exist", "seek")
SEP = "<sep>"
NONE_ANSWER = "none"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class Template:
    id: str
    family: str
    history: bool


TEMPLATES = {
    t.id: t
    for t in [
        Template("count-attr", "count", False),
        Template("count-rel-desc", "count", False),
        Template("count-rel-it", "count", True),
        Template("count-other", "count", True),
        Template("exist-attr", "exist", False),
        Template("exist-rel-it", "exist", True),
        Template("exist-rel-prev", "exist", True),
        Template("seek-attr-desc", "seek", False),
        Template("seek-attr-it", "seek", True),
        Template("seek-attr-prev", "seek", True),
        Template("seek-attr-rel-it", "seek", True),
        Template("seek-attr-rel-desc", "seek", False),
    ]
}


class GenerationError(RuntimeError):
    pass


class RegenerateScene(GenerationError):
    """No template could be instantiated for a turn; the caller should resample the scene."""


class OracleError(ValueError):
    pass


class DatasetFormatError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class SceneObject:
    color: str
    shape: str
    size: str
    material: str
    cell: tuple[int, int]

    def __post_init__(self):
        for attr, values in ATTRIBUTES.items():
            if getattr(self, attr) not in values:
                raise ValueError(f"{attr}={getattr(self, attr)!r} not in {values}")


@dataclass(frozen=True)
class SceneGraph:
    grid_size: tuple[int, int]
    objects: tuple[SceneObject, ...]

    def __post_init__(self):
        H, W = self.grid_size
        cells = [o.cell for o in self.objects]
        if not 1 <= len(cells) <= H * W:
            raise ValueError(f"scene must hold 1..{H * W} objects, got {len(cells)}")
        if len(set(cells)) != len(cells):
            raise ValueError("two objects share a grid cell")
        for r, c in cells:
            if not (0 <= r < H and 0 <= c < W):
                raise ValueError(f"cell {(r, c)} outside {H}x{W} grid")


@dataclass(frozen=True)
class DialogTurn:
    text: tuple[str, ...]
    answer: str
    template_id: str
    question_family: str
    coref_turn: int | None = None
    coref_distance: int | None = None
    referent_object: int | None = None
    bindings: dict = field(default_factory=dict, compare=True, hash=False)


@dataclass(frozen=True)
class DialogRecord:
    scene: SceneGraph
    caption: tuple[str, ...]
    turns: tuple[DialogTurn, ...]
    seed: int


@dataclass
class GenConfig:
    grid: tuple[int, int] = (4, 4)
    min_objects: int = 3
    max_objects: int = 6
    turns: int = 5
    count_cap: int = 9
    family_weights: dict = field(default_factory=lambda: {"seek": 0.60, "count": 0.23, "exist": 0.17})
    templates: tuple[str, ...] = tuple(TEMPLATES)
    caption_unique_prob: float = 0.7
    max_attempts: int = 50

    def validate(self) -> None:
        H, W = self.grid
        if H < 1 or W < 1:
            raise ValueError(f"invalid grid {self.grid}")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError(f"invalid object range {self.min_objects}..{self.max_objects}")
        if self.max_objects > H * W:
            raise ValueError(f"{self.max_objects} objects do not fit a {H}x{W} grid")
        if self.turns < 1:
            raise ValueError("need at least one turn")
        unknown = set(self.templates) - set(TEMPLATES)
        if unknown:
            raise ValueError(f"unknown templates {sorted(unknown)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        d["family_weights"] = {f: self.family_weights[f] for f in FAMILIES if f in self.family_weights}
        d["templates"] = list(self.templates)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        """Missing fields take their defaults; unknown fields are an error."""
        d = dict(d)
        if "grid" in d:
            d["grid"] = tuple(d["grid"])
        if "templates" in d:
            d["templates"] = tuple(d["templates"])
        return cls(**d)


# Vocabularies ----------------------------------------------------------------

def answer_vocab(cfg: GenConfig) -> list[str]:
    counts = [str(i) for i in range(cfg.count_cap + 1)]
    return counts + ["yes", "no"] + list(COLORS) + list(SHAPES) + list(SIZES) + list(MATERIALS) + [NONE_ANSWER]


_TEMPLATE_WORDS = (
    "how many are there things thing other is there a any the of what it its if , ? . "
    "does previous have to in front left right behind color shape size material"
).split()


def question_vocab(cfg: GenConfig) -> list[str]:
    """Closed token inventory; includes answers so history can be concatenated."""
    words = list(_TEMPLATE_WORDS) + [s + "s" for s in SHAPES]
    for values in ATTRIBUTES.values():
        words.extend(values)
    words.extend(answer_vocab(cfg))
    words.append(SEP)
    seen: dict[str, None] = {}
    for w in words:
        seen.setdefault(w, None)
    return list(seen)


# Scene sampling ----------------------------------------------------------------

def sample_scene(rng: np.random.Generator, cfg: GenConfig) -> SceneGraph:
    cfg.validate()
    H, W = cfg.grid
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    cells = rng.choice(H * W, size=n, replace=False)
    objects = []
    for cell in cells:
        objects.append(SceneObject(
            color=COLORS[rng.integers(len(COLORS))],
            shape=SHAPES[rng.integers(len(SHAPES))],
            size=SIZES[rng.integers(len(SIZES))],
            material=MATERIALS[rng.integers(len(MATERIALS))],
            cell=(int(cell) // W, int(cell) % W),
        ))
    return SceneGraph((H, W), tuple(objects))


# Oracle ----------------------------------------------------------------------

def matches(obj: SceneObject, flt: dict) -> bool:
    return all(getattr(obj, a) == v for a, v in flt.items())


def related(obj: SceneObject, anchor: SceneObject, relation: str) -> bool:
    """True when ``obj`` lies in direction ``relation`` of ``anchor``."""
    (r, c), (ar, ac) = obj.cell, anchor.cell
    if relation == "left":
        return c < ac
    if relation == "right":
        return c > ac
    if relation == "front":
        return r < ar
    if relation == "behind":
        return r > ar
    raise OracleError(f"unknown relation {relation!r}")


def _resolve_anchor(scene: SceneGraph, bindings: dict) -> int:
    if bindings.get("referent") is not None:
        return int(bindings["referent"])
    hits = [i for i, o in enumerate(scene.objects) if matches(o, bindings["filter"])]
    if len(hits) != 1:
        raise OracleError(f"description {bindings['filter']} matches {len(hits)} objects, expected 1")
    return hits[0]


def _related_indices(scene: SceneGraph, anchor: int, relation: str) -> list[int]:
    a = scene.objects[anchor]
    return [i for i, o in enumerate(scene.objects) if i != anchor and related(o, a, relation)]


def oracle_answer(scene: SceneGraph, template_id: str, bindings: dict, count_cap: int = 9) -> str:
    """Answer a template instance by exhaustive enumeration over the scene."""
    objs = scene.objects
    if template_id in ("count-attr", "exist-attr"):
        n = sum(matches(o, bindings["filter"]) for o in objs)
        return str(min(n, count_cap)) if template_id == "count-attr" else ("yes" if n else "no")
    if template_id in ("count-rel-desc", "count-rel-it"):
        n = len(_related_indices(scene, _resolve_anchor(scene, bindings), bindings["relation"]))
        return str(min(n, count_cap))
    if template_id == "count-other":
        excluded = set(bindings["excluded"])
        return str(min(sum(i not in excluded for i in range(len(objs))), count_cap))
    if template_id in ("exist-rel-it", "exist-rel-prev"):
        hits = _related_indices(scene, _resolve_anchor(scene, bindings), bindings["relation"])
        return "yes" if hits else "no"
    if template_id in ("seek-attr-desc", "seek-attr-it", "seek-attr-prev"):
        return getattr(objs[_resolve_anchor(scene, bindings)], bindings["attribute"])
    if template_id in ("seek-attr-rel-it", "seek-attr-rel-desc"):
        hits = _related_indices(scene, _resolve_anchor(scene, bindings), bindings["relation"])
        if not hits:
            return NONE_ANSWER
        if len(hits) > 1:
            raise OracleError(f"{len(hits)} objects satisfy the relation, expected at most 1")
        return getattr(objs[hits[0]], bindings["attribute"])
    raise OracleError(f"unknown template {template_id!r}")


def queried_object(scene: SceneGraph, template_id: str, bindings: dict) -> int | None:
    """Index of the object whose attribute a seek question asks for (None otherwise)."""
    if template_id in ("seek-attr-desc", "seek-attr-it", "seek-attr-prev"):
        return _resolve_anchor(scene, bindings)
    if template_id in ("seek-attr-rel-it", "seek-attr-rel-desc"):
        hits = _related_indices(scene, _resolve_anchor(scene, bindings), bindings["relation"])
        return hits[0] if len(hits) == 1 else None
    return None


# Phrases -----------------------------------------------------------------------

def describe(flt: dict, plural: bool = False) -> list[str]:
    words = [flt[a] for a in PHRASE_ORDER[:3] if a in flt]
    if "shape" in flt:
        words.append(flt["shape"] + ("s" if plural else ""))
    else:
        words.append("things" if plural else "thing")
    return words


def parse_description(words: Iterable[str]) -> dict:
    """Inverse of :func:`describe`."""
    flt = {}
    lookup = {v: a for a, vals in ATTRIBUTES.items() for v in vals}
    lookup.update({s + "s": "shape" for s in SHAPES})
    for w in words:
        if w in ("thing", "things"):
            continue
        attr = lookup[w]
        flt[attr] = w[:-1] if w.endswith("s") and attr == "shape" and w not in SHAPES else w
    return flt


def unique_filters(scene: SceneGraph, idx: int) -> list[dict]:
    """Smallest attribute subsets that single out object ``idx``."""
    obj = scene.objects[idx]
    attrs = list(PHRASE_ORDER)
    for k in range(1, 5):
        found = []
        for combo in _combinations(attrs, k):
            flt = {a: getattr(obj, a) for a in combo}
            if sum(matches(o, flt) for o in scene.objects) == 1:
                found.append(flt)
        if found:
            return found
    return []


def _combinations(items, k):
    if k == 0:
        yield ()
        return
    for i in range(len(items)):
        for rest in _combinations(items[i + 1:], k - 1):
            yield (items[i],) + rest


def caption_fact_holds(scene: SceneGraph, caption: Iterable[str]) -> bool:
    """Check that a generated caption states something true about the scene."""
    words = list(caption)
    if words[:3] == ["there", "is", "a"] and words[-1] == ".":
        flt = parse_description(words[3:-1])
        return sum(matches(o, flt) for o in scene.objects) == 1
    if words[:2] == ["there", "are"] and words[-1] == ".":
        flt = parse_description(words[3:-1])
        return sum(matches(o, flt) for o in scene.objects) == int(words[2])
    return False


# Dialog generation ---------------------------------------------------------------

@dataclass
class _History:
    mentions: dict = field(default_factory=dict)  # object index -> last turn mentioning it
    it: int | None = None

    def mention(self, obj: int, turn: int, focus: bool = True) -> None:
        self.mentions[obj] = turn
        if focus:
            self.it = obj


def _pick(rng, seq):
    return seq[int(rng.integers(len(seq)))]


def _attr_filter(rng, scene: SceneGraph) -> dict:
    k = 1 if rng.random() < 0.6 else 2
    attrs = [PHRASE_ORDER[i] for i in sorted(rng.choice(4, size=k, replace=False))]
    if rng.random() < 0.75:
        obj = _pick(rng, scene.objects)
        return {a: getattr(obj, a) for a in attrs}
    return {a: _pick(rng, ATTRIBUTES[a]) for a in attrs}


def _describable(scene: SceneGraph) -> list[int]:
    return [i for i in range(len(scene.objects)) if unique_filters(scene, i)]


def _previous_candidates(scene: SceneGraph, hist: _History) -> list[tuple[int, str]]:
    """(object, attribute) pairs where the value singles out a mentioned object.

    The value must also be shared with some other object in the scene, so the
    phrase "the previous <value> thing" cannot be resolved without the history.
    """
    mentioned = list(hist.mentions)
    out = []
    for i in mentioned:
        for a in PHRASE_ORDER:
            v = getattr(scene.objects[i], a)
            among_mentioned = sum(getattr(scene.objects[j], a) == v for j in mentioned)
            in_scene = sum(getattr(o, a) == v for o in scene.objects)
            if among_mentioned == 1 and in_scene >= 2:
                out.append((i, a))
    return out


def _previous_phrase(obj: SceneObject, attr: str) -> list[str]:
    return ["previous", obj.shape] if attr == "shape" else ["previous", getattr(obj, attr), "thing"]


def _instantiate(tid: str, scene: SceneGraph, hist: _History, turn: int, rng) -> dict | None:
    """Build one question; returns None when the template does not apply here."""
    objs = scene.objects
    rel = _pick(rng, RELATIONS)
    qattr = _pick(rng, list(ATTRIBUTES))
    it = hist.it
    if tid == "count-attr":
        flt = _attr_filter(rng, scene)
        return dict(text=["how", "many"] + describe(flt, True) + ["are", "there", "?"], bindings={"filter": flt})
    if tid == "exist-attr":
        flt = _attr_filter(rng, scene)
        return dict(text=["are", "there", "any"] + describe(flt, True) + ["?"], bindings={"filter": flt})
    if tid == "count-other":
        if not hist.mentions:
            return None
        return dict(text="how many other things are there ?".split(),
                    bindings={"excluded": sorted(hist.mentions)})
    if tid in ("count-rel-desc", "seek-attr-desc", "seek-attr-rel-desc"):
        cands = _describable(scene)
        if not cands:
            return None
        anchor = _pick(rng, cands)
        flt = _pick(rng, unique_filters(scene, anchor))
        phrase = ["the"] + describe(flt)
        if tid == "count-rel-desc":
            hist_update = [(anchor, True)]
            return dict(text=["how", "many", "things", "are"] + RELATION_WORDS[rel] + phrase + ["?"],
                        bindings={"filter": flt, "relation": rel}, mentions=hist_update)
        if tid == "seek-attr-desc":
            free = [a for a in ATTRIBUTES if a not in flt]
            qattr = _pick(rng, free)
            return dict(text=["what", "is", "the", qattr, "of"] + phrase + ["?"],
                        bindings={"filter": flt, "attribute": qattr}, mentions=[(anchor, True)])
        hits = _related_indices(scene, anchor, rel)
        if len(hits) > 1 or (not hits and rng.random() < 0.7):
            return None
        mentions = [(anchor, True)] + [(h, True) for h in hits]
        return dict(text=["if", "there", "is", "a", "thing"] + RELATION_WORDS[rel] + phrase
                    + [",", "what", "is", "its", qattr, "?"],
                    bindings={"filter": flt, "relation": rel, "attribute": qattr}, mentions=mentions)
    # templates below refer back into the dialog
    if tid in ("count-rel-it", "exist-rel-it", "seek-attr-it", "seek-attr-rel-it"):
        if it is None:
            return None
        coref = dict(referent_object=it, coref_turn=hist.mentions[it], surface={})
        if tid == "count-rel-it":
            return dict(text=["how", "many", "things", "are"] + RELATION_WORDS[rel] + ["it", "?"],
                        bindings={"referent": it, "relation": rel}, mentions=[(it, True)], **coref)
        if tid == "exist-rel-it":
            return dict(text=["is", "there", "a", "thing"] + RELATION_WORDS[rel] + ["it", "?"],
                        bindings={"referent": it, "relation": rel}, mentions=[(it, True)], **coref)
        if tid == "seek-attr-it":
            return dict(text=["what", "is", "the", qattr, "of", "it", "?"],
                        bindings={"referent": it, "attribute": qattr}, mentions=[(it, True)], **coref)
        hits = _related_indices(scene, it, rel)
        if len(hits) > 1 or (not hits and rng.random() < 0.7):
            return None
        mentions = [(it, True)] + [(h, True) for h in hits]
        return dict(text=["if", "there", "is", "a", "thing"] + RELATION_WORDS[rel]
                    + ["it", ",", "what", "is", "its", qattr, "?"],
                    bindings={"referent": it, "relation": rel, "attribute": qattr}, mentions=mentions, **coref)
    if tid in ("exist-rel-prev", "seek-attr-prev"):
        cands = _previous_candidates(scene, hist)
        older = [c for c in cands if c[0] != it]
        if older and rng.random() < 0.8:
            cands = older
        if tid == "seek-attr-prev":
            cands = [c for c in cands if c[1] != qattr]
        if not cands:
            return None
        ref, attr = _pick(rng, cands)
        coref = dict(referent_object=ref, coref_turn=hist.mentions[ref], surface={attr: getattr(objs[ref], attr)})
        phrase = ["the"] + _previous_phrase(objs[ref], attr)
        if tid == "exist-rel-prev":
            return dict(text=["does"] + phrase + ["have", "things", "to", "its", rel, "?"],
                        bindings={"referent": ref, "relation": rel}, mentions=[(ref, True)], **coref)
        return dict(text=["what", "is", "the", qattr, "of"] + phrase + ["?"],
                    bindings={"referent": ref, "attribute": qattr}, mentions=[(ref, True)], **coref)
    raise GenerationError(f"unknown template {tid!r}")


def _caption(scene: SceneGraph, rng, cfg: GenConfig, hist: _History) -> list[str]:
    if rng.random() >= cfg.caption_unique_prob:
        flt = _attr_filter(rng, scene)
        flt = {a: v for a, v in list(flt.items())[:1]}
        n = sum(matches(o, flt) for o in scene.objects)
        if n >= 2:
            return ["there", "are", str(n)] + describe(flt, True) + ["."]
    cands = _describable(scene)
    if not cands:
        raise RegenerateScene("no object in the scene has a unique description")
    idx = _pick(rng, cands)
    hist.mention(idx, 0)
    return ["there", "is", "a"] + describe(_pick(rng, unique_filters(scene, idx))) + ["."]


def needs_history(scene: SceneGraph, template_id: str, inst: dict, count_cap: int = 9) -> bool:
    """False when every object the words could denote gives the same answer.

    Such a question is answerable from the scene alone, so it would not test
    coreference.  Questions without a referent always pass.
    """
    if "surface" not in inst:
        return True
    answers = set()
    for i, o in enumerate(scene.objects):
        if not matches(o, inst["surface"]):
            continue
        try:
            answers.add(oracle_answer(scene, template_id, dict(inst["bindings"], referent=i), count_cap))
        except OracleError:
            answers.add(None)
    return len(answers) > 1


def generate_dialog(scene: SceneGraph, rng: np.random.Generator, cfg: GenConfig, seed: int = 0) -> DialogRecord:
    """Caption plus ``cfg.turns`` question turns; turn indices count the caption as 0."""
    hist = _History()
    caption = _caption(scene, rng, cfg, hist)
    families = [f for f in FAMILIES if any(TEMPLATES[t].family == f for t in cfg.templates)]
    weights = np.array([cfg.family_weights[f] for f in families], dtype=float)
    weights /= weights.sum()
    by_family = {f: [t for t in cfg.templates if TEMPLATES[t].family == f] for f in families}
    turns = []
    for t in range(1, cfg.turns + 1):
        for attempt in range(cfg.max_attempts):
            # stay within the sampled family for a while so failures do not skew the mix
            if attempt % 10 == 0:
                fam = families[int(rng.choice(len(families), p=weights))]
            tid = _pick(rng, by_family[fam])
            inst = _instantiate(tid, scene, hist, t, rng)
            if inst is not None and needs_history(scene, tid, inst, cfg.count_cap):
                break
        else:
            raise RegenerateScene(f"no template could be instantiated at turn {t}")
        answer = oracle_answer(scene, tid, inst["bindings"], cfg.count_cap)
        coref_turn = inst.get("coref_turn")
        turns.append(DialogTurn(
            text=tuple(inst["text"]),
            answer=answer,
            template_id=tid,
            question_family=TEMPLATES[tid].family,
            coref_turn=coref_turn,
            coref_distance=None if coref_turn is None else t - coref_turn,
            referent_object=inst.get("referent_object"),
            bindings=inst["bindings"],
        ))
        for obj, focus in inst.get("mentions", ()):
            hist.mention(obj, t, focus)
    return DialogRecord(scene, tuple(caption), tuple(turns), seed)


def dialog_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def generate_record(seed: int, cfg: GenConfig) -> DialogRecord:
    """One dialog from its own seed; resamples the scene when generation gets stuck."""
    rng = np.random.default_rng(seed)
    for _ in range(100):
        scene = sample_scene(rng, cfg)
        try:
            return generate_dialog(scene, rng, cfg, seed)
        except RegenerateScene:
            continue
    raise GenerationError(f"could not generate a dialog for seed {seed}; check the template set")


def generate_dataset(master_seed: int, n_dialogs: int, cfg: GenConfig, workers: int = 1) -> list[DialogRecord]:
    cfg.validate()
    seeds = [dialog_seed(master_seed, i) for i in range(n_dialogs)]
    if workers <= 1:
        return [generate_record(s, cfg) for s in seeds]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(generate_record, seeds, [cfg] * len(seeds), chunksize=max(1, n_dialogs // (4 * workers))))


def histograms(records: Iterable[DialogRecord]) -> tuple[Counter, Counter]:
    templates, distances = Counter(), Counter()
    for rec in records:
        for turn in rec.turns:
            templates[turn.template_id] += 1
            distances["none" if turn.coref_distance is None else str(turn.coref_distance)] += 1
    return templates, distances


# Serialization -------------------------------------------------------------------

def record_to_json(rec: DialogRecord) -> dict:
    return {
        "scene": {
            "grid_size": list(rec.scene.grid_size),
            "objects": [
                {"color": o.color, "shape": o.shape, "size": o.size, "material": o.material, "cell": list(o.cell)}
                for o in rec.scene.objects
            ],
        },
        "caption": list(rec.caption),
        "turns": [
            {
                "text": list(t.text),
                "answer": t.answer,
                "template_id": t.template_id,
                "question_family": t.question_family,
                "coref_turn": t.coref_turn,
                "coref_distance": t.coref_distance,
                "referent_object": t.referent_object,
                "bindings": t.bindings,
            }
            for t in rec.turns
        ],
        "seed": rec.seed,
    }


def record_from_json(d: dict) -> DialogRecord:
    scene = SceneGraph(
        tuple(d["scene"]["grid_size"]),
        tuple(SceneObject(o["color"], o["shape"], o["size"], o["material"], tuple(o["cell"]))
              for o in d["scene"]["objects"]),
    )
    turns = tuple(
        DialogTurn(tuple(t["text"]), t["answer"], t["template_id"], t["question_family"],
                   t["coref_turn"], t["coref_distance"], t["referent_object"], t["bindings"])
        for t in d["turns"]
    )
    return DialogRecord(scene, tuple(d["caption"]), turns, int(d["seed"]))


def make_header(cfg: GenConfig) -> dict:
    return {"version": FORMAT_VERSION, "cfg": cfg.to_dict(), "vocab": question_vocab(cfg),
            "answer_vocab": answer_vocab(cfg)}


def write_dataset(records: Iterable[DialogRecord], path, cfg: GenConfig | None = None) -> None:
    cfg = cfg or GenConfig()
    lines = [json.dumps(make_header(cfg))]
    lines.extend(json.dumps(record_to_json(r)) for r in records)
    Path(path).write_text("\n".join(lines) + "\n")


def read_header(path) -> dict:
    with open(path) as fh:
        first = fh.readline()
    return _parse_header(first)


def _parse_header(line: str) -> dict:
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(1, f"header is not JSON ({exc.msg})") from None
    if not isinstance(header, dict) or not {"version", "cfg", "vocab", "answer_vocab"} <= set(header):
        raise DatasetFormatError(1, "header must be an object with version, cfg, vocab, answer_vocab")
    if header["version"] != FORMAT_VERSION:
        raise DatasetFormatError(1, f"unsupported format version {header['version']}")
    return header


def read_dataset(path) -> list[DialogRecord]:
    records = []
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetFormatError(1, "empty file, expected a header line")
    _parse_header(lines[0])
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            records.append(record_from_json(json.loads(line)))
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(lineno, f"invalid JSON ({exc.msg})") from None
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(lineno, f"malformed record ({exc})") from None
    return records


def load_dataset(path) -> tuple[dict, list[DialogRecord]]:
    return read_header(path), read_dataset(path)
