import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cammac import tensor as T
from cammac.cam import (causal_attention_matrix, context_attend, fusion, init_turn_memory, new_dialog_state,
                        run_turn)
from cammac.encoder import embed_scene
from cammac.maccell import ControlState, control_step, output_answer, read_step, write_step
from cammac.model import MODEL_FLAGS, encode_turn, forward_dialogs, parameter_count
from cammac.scenegen import DialogRecord, DialogTurn
from cammac.tensor import Tensor

from conftest import small_model


def test_memory_starts_at_zero():
    state = new_dialog_state()
    assert not init_turn_memory(state, True, 2, 4).data.any()
    state.turn_index, state.carry_memory = 3, Tensor(np.ones((2, 4)))
    assert not init_turn_memory(state, False, 2, 4).data.any()


def test_memory_carries_final_memory_of_previous_turn(dialogs):
    cfg, params = small_model("mtm")
    kb = embed_scene([r.scene for r in dialogs[:3]], params, cfg.grid)
    state = new_dialog_state()
    turn0 = run_turn(state, kb, encode_turn(dialogs[:3], [0] * 3, params, cfg), cfg.flags, params, cfg.p)
    carried = init_turn_memory(turn0.state, True, 3, cfg.d)
    # recompute turn 0 by hand and take memory after the last step
    m = Tensor(np.zeros((3, cfg.d)))
    q = encode_turn(dialogs[:3], [0] * 3, params, cfg)
    prev = params["ctrl.init"] + np.zeros((3, cfg.d))
    for k in range(cfg.p):
        c, _ = control_step(prev, q.q, q.words, q.mask, k, params)
        r, _ = read_step(m, c, kb.features, params)
        m = write_step(m, r, params)
        prev = c
    assert carried.data.tobytes() == m.data.tobytes()


def test_first_step_attends_only_to_itself():
    cfg, params = small_model("caa")
    rng = np.random.default_rng(0)
    raw = ControlState(Tensor(rng.standard_normal((2, cfg.d))), 0, 0)
    state = new_dialog_state()
    state.control_log.append(raw)
    state.keys.append(raw.c @ params["caa.proj_b"])
    out, rec = context_attend(raw, state, params)
    np.testing.assert_array_equal(rec.weights, 1.0)
    assert out.data.tobytes() == fusion(raw.c, raw.c, params).data.tobytes()


def zero_fusion(params):
    for name in ("fusion.r.w", "fusion.r.b", "fusion.g.w", "fusion.g.b"):
        params[name].data[:] = 0.0


def test_zero_fusion_halves_input():
    cfg, params = small_model("caa")
    zero_fusion(params)
    x = Tensor(np.random.default_rng(1).standard_normal((3, cfg.d)))
    y = Tensor(np.random.default_rng(2).standard_normal((3, cfg.d)))
    np.testing.assert_array_equal(fusion(x, y, params).data, 0.5 * x.data)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_fusion_lies_between_candidate_and_input(seed):
    cfg, params = small_model("caa")
    rng = np.random.default_rng(seed)
    x, y = Tensor(rng.standard_normal((2, cfg.d))), Tensor(rng.standard_normal((2, cfg.d)))
    out = fusion(x, y, params).data
    z = T.concat_lastdim([x, y, x * y, x - y])
    cand = (z @ params["fusion.r.w"] + params["fusion.r.b"]).relu().data
    lo, hi = np.minimum(cand, x.data), np.maximum(cand, x.data)
    assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)


def test_fusion_gradient_check():
    cfg, params = small_model("caa", d=3)
    rng = np.random.default_rng(3)
    names = ("fusion.r.w", "fusion.r.b", "fusion.g.w", "fusion.g.b")

    def fn(x, y, *weights):
        return fusion(x, y, dict(zip(names, weights)))

    arrays = [rng.standard_normal((2, 3)), rng.standard_normal((2, 3))] + [params[n].data + 0.1 for n in names]
    assert max(T.check_gradients(fn, arrays)) <= 1e-5


def test_flags_off_equals_single_turn_mac(dialogs):
    cfg, params = small_model("vanilla")
    batch = dialogs[:3]
    kb = embed_scene([r.scene for r in batch], params, cfg.grid)
    q = encode_turn(batch, [2] * 3, params, cfg)
    state = forward_dialogs(params, cfg, batch, upto=1).state
    got = run_turn(state, kb, q, cfg.flags, params, cfg.p).logits.data
    m = Tensor(np.zeros((3, cfg.d)))
    prev = params["ctrl.init"] + np.zeros((3, cfg.d))
    for k in range(cfg.p):
        c, _ = control_step(prev, q.q, q.words, q.mask, k, params)
        r, _ = read_step(m, c, kb.features, params)
        m = write_step(m, r, params)
        prev = c
    assert got.tobytes() == output_answer(m, q.q, params).data.tobytes()


def _replace_turns_after(rec: DialogRecord, t: int) -> DialogRecord:
    other = DialogTurn(tuple("are there any cubes ?".split()), "no", "exist-attr", "exist")
    return DialogRecord(rec.scene, rec.caption, rec.turns[:t] + (other,) * (len(rec.turns) - t), rec.seed)


@pytest.mark.parametrize("model", ["caa+mtm", "caa", "mtm"])
def test_future_turns_do_not_change_outputs(dialogs, model):
    cfg, params = small_model(model)
    batch = dialogs[:4]
    full = forward_dialogs(params, cfg, batch)
    for t in (1, 3):
        cut = forward_dialogs(params, cfg, [_replace_turns_after(r, t) for r in batch])
        for s in range(t + 1):
            assert full.logits[s].data.tobytes() == cut.logits[s].data.tobytes()


def test_attention_records_are_causal_and_normalized(dialogs):
    cfg, params = small_model("caa+mtm", p=3)
    out = forward_dialogs(params, cfg, dialogs[:4])
    assert len(out.attention) == 6 * cfg.p
    for rec in out.attention:
        assert rec.weights.shape == (4, rec.turn * cfg.p + rec.step + 1)
        np.testing.assert_allclose(rec.weights.sum(axis=-1), 1.0, atol=1e-6)


def test_full_matrix_rows_match_online_weights_and_mask_the_future(dialogs):
    cfg, params = small_model("caa", p=2)
    out = forward_dialogs(params, cfg, dialogs[:2])
    controls = T.stack([e.c for e in out.state.control_log], axis=1)
    full = causal_attention_matrix(controls, params).data
    n = full.shape[-1]
    assert np.all(full[:, np.triu_indices(n, 1)[0], np.triu_indices(n, 1)[1]] == 0.0)
    for i, rec in enumerate(out.attention):
        np.testing.assert_allclose(full[:, i, : i + 1], rec.weights, rtol=1e-10, atol=1e-14)


@pytest.mark.parametrize("model", ["vanilla", "mtm", "cq"])
def test_without_caa_the_log_is_never_read(dialogs, model):
    cfg, params = small_model(model)
    a = forward_dialogs(params, cfg, dialogs[:3], keep_log=True)
    b = forward_dialogs(params, cfg, dialogs[:3], keep_log=False)
    assert b.state.control_log is None
    for x, y in zip(a.logits, b.logits):
        assert x.data.tobytes() == y.data.tobytes()


def test_caa_requires_a_log(dialogs):
    cfg, params = small_model("caa")
    with pytest.raises(ValueError):
        forward_dialogs(params, cfg, dialogs[:1], keep_log=False)


@pytest.mark.parametrize("model", ["caa+mtm", "cq+caa+mtm"])
def test_incremental_processing_equals_replay(dialogs, model):
    cfg, params = small_model(model)
    batch = dialogs[:3]
    state = None
    for t in range(6):
        step = forward_dialogs(params, cfg, batch, upto=t, state=state)
        state = step.state
        scratch = forward_dialogs(params, cfg, batch, upto=t)
        assert step.logits[-1].data.tobytes() == scratch.logits[t].data.tobytes()


def test_without_memory_turn_order_only_permutes_outputs(dialogs):
    cfg, params = small_model("vanilla")
    rec = dialogs[0]
    order = [3, 1, 4, 0, 2]
    shuffled = DialogRecord(rec.scene, rec.caption, tuple(rec.turns[i] for i in order), rec.seed)
    a = forward_dialogs(params, cfg, [rec]).logits
    b = forward_dialogs(params, cfg, [shuffled]).logits
    for new, old in enumerate(order, start=1):
        assert b[new].data.tobytes() == a[old + 1].data.tobytes()


def test_parameter_counts_by_flag_row():
    counts = {name: parameter_count(small_model(name, d=16, p=4)[1]) for name in MODEL_FLAGS}
    assert counts["vanilla"] == counts["mtm"] == counts["cq"]
    assert counts["caa"] == counts["caa+mtm"] == counts["cq+caa"] == counts["cq+caa+mtm"]
    d = 16
    assert counts["caa"] - counts["vanilla"] == 2 * d * d + 2 * (4 * d * d + d)
    for name in MODEL_FLAGS:
        assert counts[name] == parameter_count(small_model(name, d=16, p=4, seed=9)[1])
