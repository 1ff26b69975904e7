import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cammac import scenegen as S
from cammac.scenegen import GenConfig, SceneGraph, SceneObject


def obj(color="red", shape="cube", size="large", material="metal", cell=(0, 0)):
    return SceneObject(color, shape, size, material, cell)


@pytest.fixture(scope="module")
def dataset():
    return S.generate_dataset(11, 300, GenConfig())


def test_single_cell_grid_holds_one_object():
    cfg = GenConfig(grid=(1, 1), min_objects=1, max_objects=1)
    scene = S.sample_scene(np.random.default_rng(0), cfg)
    assert len(scene.objects) == 1 and scene.objects[0].cell == (0, 0)


def test_same_seed_same_scene():
    a = S.sample_scene(np.random.default_rng(5), GenConfig())
    b = S.sample_scene(np.random.default_rng(5), GenConfig())
    assert a == b


def test_color_frequencies_within_three_sigma_of_uniform():
    rng = np.random.default_rng(123)
    cfg = GenConfig(grid=(1, 1), min_objects=1, max_objects=1)
    n = 10_000
    counts = Counter(S.sample_scene(rng, cfg).objects[0].color for _ in range(n))
    p = 1 / len(S.COLORS)
    sigma = np.sqrt(n * p * (1 - p))
    for color in S.COLORS:
        assert abs(counts[color] - n * p) <= 3 * sigma, color


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), h=st.integers(1, 5), w=st.integers(1, 5))
def test_scene_invariants(seed, h, w):
    cfg = GenConfig(grid=(h, w), min_objects=1, max_objects=min(6, h * w))
    scene = S.sample_scene(np.random.default_rng(seed), cfg)
    cells = [o.cell for o in scene.objects]
    assert len(set(cells)) == len(cells)
    assert 1 <= len(scene.objects) <= h * w
    for o in scene.objects:
        for attr, values in S.ATTRIBUTES.items():
            assert getattr(o, attr) in values


def test_invalid_scenes_rejected():
    with pytest.raises(ValueError):
        SceneGraph((2, 2), (obj(cell=(0, 0)), obj(cell=(0, 0))))
    with pytest.raises(ValueError):
        SceneGraph((2, 2), (obj(cell=(2, 0)),))
    with pytest.raises(ValueError):
        obj(color="mauve")


def test_relations_follow_grid_indices():
    anchor, other = obj(cell=(1, 1)), obj(cell=(0, 2))
    assert S.related(other, anchor, "front") and not S.related(other, anchor, "behind")
    assert S.related(other, anchor, "right") and not S.related(other, anchor, "left")


def test_count_two_red_things():
    scene = SceneGraph((4, 4), (obj(cell=(0, 0)), obj(shape="sphere", cell=(1, 1)), obj(color="blue", cell=(2, 2))))
    assert S.oracle_answer(scene, "count-attr", {"filter": {"color": "red"}}) == "2"
    assert S.oracle_answer(scene, "count-attr", {"filter": {"color": "green"}}) == "0"


def test_exist_red_cube():
    scene = SceneGraph((4, 4), (obj(cell=(0, 0)), obj(color="blue", shape="sphere", cell=(1, 1))))
    assert S.oracle_answer(scene, "exist-attr", {"filter": {"color": "red", "shape": "cube"}}) == "yes"


def test_seek_material_left_of_referent():
    scene = SceneGraph((4, 4), (
        obj(color="blue", material="rubber", cell=(3, 0)),
        obj(color="red", cell=(0, 2)),
        obj(color="green", cell=(1, 3)),
    ))
    bindings = {"filter": {"color": "red"}, "relation": "left", "attribute": "material"}
    candidates = [o for o in scene.objects if S.related(o, scene.objects[1], "left")]
    assert len(candidates) == 1
    assert S.oracle_answer(scene, "seek-attr-rel-desc", bindings) == candidates[0].material == "rubber"
    scene2 = SceneGraph((4, 4), scene.objects + (obj(color="gray", cell=(2, 1)),))
    with pytest.raises(S.OracleError):
        S.oracle_answer(scene2, "seek-attr-rel-desc", bindings)


def test_queried_object_is_the_one_whose_attribute_is_asked():
    scene = SceneGraph((4, 4), (
        obj(color="blue", material="rubber", cell=(3, 0)),
        obj(color="red", cell=(0, 2)),
        obj(color="green", cell=(1, 3)),
    ))
    rel = {"filter": {"color": "red"}, "relation": "left", "attribute": "material"}
    assert S.queried_object(scene, "seek-attr-rel-desc", rel) == 0
    assert S.queried_object(scene, "seek-attr-desc", {"filter": {"color": "red"}, "attribute": "size"}) == 1
    assert S.queried_object(scene, "seek-attr-it", {"referent": 2, "attribute": "size"}) == 2
    assert S.queried_object(scene, "count-attr", {"filter": {"color": "red"}}) is None
    crowded = SceneGraph((4, 4), scene.objects + (obj(color="gray", cell=(2, 1)),))
    assert S.queried_object(crowded, "seek-attr-rel-desc", rel) is None


def test_non_coref_templates_only_give_no_coref():
    cfg = GenConfig(turns=1, templates=("count-attr", "exist-attr", "seek-attr-desc"))
    for seed in range(20):
        rec = S.generate_record(seed, cfg)
        assert rec.turns[0].coref_turn is None and rec.turns[0].coref_distance is None


def test_previous_phrase_points_at_introducing_turn(dataset):
    found = 0
    for rec in dataset:
        for t, turn in enumerate(rec.turns, start=1):
            if turn.template_id != "seek-attr-prev":
                continue
            found += 1
            assert "previous" in turn.text
            antecedent = rec.caption if turn.coref_turn == 0 else rec.turns[turn.coref_turn - 1].text
            assert antecedent is not None and 0 <= turn.coref_turn < t
            referent = rec.scene.objects[turn.referent_object]
            word = turn.text[turn.text.index("previous") + 1]
            assert word in {referent.color, referent.shape, referent.size, referent.material}
            # the phrase alone does not single the referent out of the scene
            attr = next(a for a, vals in S.ATTRIBUTES.items() if word in vals)
            assert sum(getattr(o, attr) == word for o in rec.scene.objects) >= 2
    assert found > 0


def test_dialog_invariants(dataset):
    answers = set(S.answer_vocab(GenConfig()))
    vocab = set(S.question_vocab(GenConfig()))
    for rec in dataset:
        assert S.caption_fact_holds(rec.scene, rec.caption)
        assert set(rec.caption) <= vocab
        for t, turn in enumerate(rec.turns, start=1):
            assert turn.answer in answers
            assert set(turn.text) <= vocab
            assert S.oracle_answer(rec.scene, turn.template_id, turn.bindings) == turn.answer
            if turn.coref_turn is not None:
                assert turn.coref_distance == t - turn.coref_turn
                assert S.TEMPLATES[turn.template_id].history


def test_family_mix_near_targets(dataset):
    fams = Counter(t.question_family for r in dataset for t in r.turns)
    total = sum(fams.values())
    for fam, target in GenConfig().family_weights.items():
        assert abs(fams[fam] / total - target) < 0.05


def test_answer_set_size_matches_order_of_magnitude():
    assert 10 <= len(S.answer_vocab(GenConfig())) <= 60


def test_template_inventory():
    families = Counter(t.family for t in S.TEMPLATES.values())
    assert families == {"count": 4, "exist": 3, "seek": 5}
    for fam in families:
        assert any(t.history for t in S.TEMPLATES.values() if t.family == fam)


def test_empty_dataset_has_only_header(tmp_path):
    path = tmp_path / "empty.jsonl"
    S.write_dataset([], path)
    lines = path.read_text().splitlines()
    assert len(lines) == 1 and json.loads(lines[0])["version"] == S.FORMAT_VERSION
    assert S.read_dataset(path) == []


def test_ten_records_round_trip(tmp_path):
    records = S.generate_dataset(3, 10, GenConfig())
    path = tmp_path / "d.jsonl"
    S.write_dataset(records, path)
    assert S.read_dataset(path) == records
    for rec in S.read_dataset(path):
        for turn in rec.turns:
            assert S.oracle_answer(rec.scene, turn.template_id, turn.bindings) == turn.answer


def test_dataset_files_are_byte_identical(tmp_path):
    for name in ("a", "b"):
        S.write_dataset(S.generate_dataset(9, 20, GenConfig()), tmp_path / name)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_parallel_generation_matches_serial():
    cfg = GenConfig()
    assert S.generate_dataset(4, 12, cfg, workers=2) == S.generate_dataset(4, 12, cfg)


def test_malformed_line_reports_line_number(tmp_path):
    path = tmp_path / "bad.jsonl"
    S.write_dataset(S.generate_dataset(1, 2, GenConfig()), path)
    lines = path.read_text().splitlines()
    lines[2] = lines[2][:-5]
    path.write_text("\n".join(lines))
    with pytest.raises(S.DatasetFormatError) as info:
        S.read_dataset(path)
    assert info.value.line == 3


def test_describe_parse_round_trip():
    for flt in ({"color": "red"}, {"size": "small", "shape": "sphere"}, {"material": "rubber", "color": "cyan"}):
        for plural in (False, True):
            assert S.parse_description(S.describe(flt, plural)) == flt


def test_config_round_trip_and_partial_dict():
    cfg = GenConfig(grid=(3, 5), turns=2)
    assert GenConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    assert GenConfig.from_dict({"turns": 3}) == GenConfig(turns=3)
