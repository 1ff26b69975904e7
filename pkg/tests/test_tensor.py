import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from cammac import tensor as T
from cammac.gradcheck import CASES, OP_TOLERANCE, check_all_ops, check_op, missing_cases
from cammac.tensor import Tensor


def finite_arrays(shape, lo=-3.0, hi=3.0):
    return hnp.arrays(np.float64, shape, elements=st.floats(lo, hi, allow_nan=False, width=64))


def test_identity_matmul():
    eye = T.tensor(np.eye(2))
    np.testing.assert_array_equal((eye @ eye).data, np.eye(2))


def test_matmul_by_hand():
    out = T.tensor([[1.0, 2.0], [3.0, 4.0]]) @ T.tensor([[1.0], [1.0]])
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_gradient_3x4_by_4x2():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    ta = Tensor(a.copy(), requires_grad=True)
    with T.GradTape():
        loss = (ta @ Tensor(b)).sum()
    T.backward(loss)

    def f():
        return float((a @ b).sum())

    numeric = T.numerical_gradient(f, a, eps=1e-6)
    assert T.relative_error(ta.grad, numeric) <= 1e-5


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.tensor(np.ones((2, 3))) @ T.tensor(np.ones((2, 3)))


def test_elementwise_examples():
    np.testing.assert_array_equal(T.tensor([-1.0, 0.0, 2.0]).relu().data, [0.0, 0.0, 2.0])
    assert T.tensor([0.0]).sigmoid().data[0] == 0.5


def test_mul_gradient_matches_finite_differences():
    assert check_op("mul").max_rel_error <= OP_TOLERANCE


def test_elementwise_shape_mismatch():
    with pytest.raises(T.ShapeError):
        T.tensor(np.ones((2, 3))) * T.tensor(np.ones((3, 2)))


def test_softmax_examples():
    np.testing.assert_array_equal(T.softmax_lastdim(T.tensor([3.7])).data, [1.0])
    np.testing.assert_array_equal(T.softmax_lastdim(T.tensor([0.0, 0.0])).data, [0.5, 0.5])
    e = math.e
    expected = [1 / (1 + e), e / (1 + e), 0.0]
    direct = T.softmax_lastdim(T.tensor([1.0, 2.0, -np.inf])).data
    masked = T.softmax_lastdim(T.masked_fill(T.tensor([1.0, 2.0, 5.0]), [True, True, False])).data
    for out in (direct, masked):
        np.testing.assert_allclose(out, expected, rtol=1e-12)
        assert out[2] == 0.0


def test_fully_masked_slice_is_an_error():
    with pytest.raises(T.DegenerateMaskError):
        T.softmax_lastdim(T.masked_fill(T.tensor([[1.0, 2.0], [3.0, 4.0]]), [[True, True], [False, False]]))


@settings(max_examples=50, deadline=None)
@given(x=finite_arrays((3, 5), -30, 30), keep=hnp.arrays(bool, (3, 5)))
def test_softmax_rows_sum_to_one_and_masked_entries_vanish(x, keep):
    keep[:, 0] = True
    out = T.softmax_lastdim(T.masked_fill(T.tensor(x), keep)).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(out[~keep] == 0.0)


def test_concat_examples():
    a, b = T.tensor(np.ones((2, 3))), T.tensor(np.zeros((2, 1)))
    assert T.concat_lastdim([a, b]).shape == (2, 4)
    np.testing.assert_array_equal(T.concat_lastdim([a]).data, a.data)


def test_concat_gradient_reaches_only_the_sliced_part():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.ones((2, 2)), requires_grad=True)
    with T.GradTape():
        loss = T.concat_lastdim([a, b])[:, 3:].sum()
    T.backward(loss)
    np.testing.assert_array_equal(a.grad, np.zeros((2, 3)))
    np.testing.assert_array_equal(b.grad, np.ones((2, 2)))
    assert check_op("concat").max_rel_error <= OP_TOLERANCE


def test_backward_simple_losses():
    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with T.GradTape():
        loss = w.sum()
    T.backward(loss)
    np.testing.assert_array_equal(w.grad, [1.0, 1.0])
    with T.GradTape():
        loss = (w * w).sum()
    T.backward(loss)
    np.testing.assert_array_equal(w.grad, [2.0, 4.0])


def test_unreached_parameter_gets_zero_gradient_of_same_shape():
    used = Tensor(np.ones(3), requires_grad=True)
    unused = Tensor(np.ones((2, 2)), requires_grad=True)
    with T.GradTape():
        _ = unused * 1.0
        loss = used.sum()
    T.backward(loss)
    assert unused.grad.shape == (2, 2) and not unused.grad.any()


def test_backward_requires_scalar_loss():
    w = Tensor(np.ones(3), requires_grad=True)
    with T.GradTape():
        out = w * 2.0
    with pytest.raises(T.ShapeError):
        T.backward(out)


def test_tape_records_inputs_before_outputs():
    w = Tensor(np.ones(3), requires_grad=True)
    with T.GradTape() as tape:
        h = (w * 2.0).tanh()
        loss = (h + w).sum()
    seen = {leaf.grad_id for leaf in tape.leaves}
    for node in tape.nodes:
        assert all(slot in seen for slot in node.inputs if slot is not None)
        seen.add(node.out)
    T.backward(loss)


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_output_names_the_op():
    big = T.tensor([1e308])
    with pytest.raises(T.NonFiniteError) as info:
        big * 10.0
    assert info.value.op == "mul"


def test_every_registered_op_has_a_gradient_case():
    assert missing_cases() == []
    assert set(CASES) == set(T.OPS)


def test_all_ops_pass_finite_difference_check():
    for res in check_all_ops(seed=1):
        assert res.passed, f"{res.name}: {res.max_rel_error:.3e}"


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**16), name=st.sampled_from(sorted(CASES)))
def test_gradient_check_property_over_random_inputs(seed, name):
    assert check_op(name, seed).max_rel_error <= OP_TOLERANCE


@settings(max_examples=25, deadline=None)
@given(a=finite_arrays((4, 3)), b=finite_arrays((3, 2)))
def test_forward_is_deterministic(a, b):
    one = (T.tensor(a) @ T.tensor(b)).tanh().data
    two = (T.tensor(a) @ T.tensor(b)).tanh().data
    assert one.tobytes() == two.tobytes()


@settings(max_examples=25, deadline=None)
@given(a=finite_arrays((2, 3, 4)), b=finite_arrays((4,)))
def test_broadcast_add_gradient_sums_over_batch(a, b):
    tb = Tensor(b, requires_grad=True)
    with T.GradTape():
        loss = (T.tensor(a) + tb).sum()
    T.backward(loss)
    np.testing.assert_array_equal(tb.grad, np.full(4, 6.0))


def test_single_precision_stays_single():
    x = T.tensor(np.ones((2, 2), dtype=np.float32))
    y = (x @ x + 1.0).sigmoid()
    assert y.dtype == np.float32


def test_embedding_gradient_touches_only_used_rows():
    table = Tensor(np.random.default_rng(0).standard_normal((6, 3)), requires_grad=True)
    with T.GradTape():
        loss = T.embedding(table, np.array([[1, 4], [1, 1]])).sum()
    T.backward(loss)
    np.testing.assert_array_equal(table.grad[[0, 2, 3, 5]], 0.0)
    np.testing.assert_array_equal(table.grad[1], [3.0, 3.0, 3.0])
    np.testing.assert_array_equal(table.grad[4], [1.0, 1.0, 1.0])


def test_gru_padding_keeps_last_valid_state():
    rng = np.random.default_rng(0)
    H = 3
    gx = rng.standard_normal((2, 4, 3 * H))
    wh, bh = rng.standard_normal((H, 3 * H)), rng.standard_normal(3 * H)
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], dtype=bool)
    fwd = T.gru_scan(T.tensor(gx), T.tensor(wh), T.tensor(bh), mask).data
    short = T.gru_scan(T.tensor(gx[1:, :2]), T.tensor(wh), T.tensor(bh), mask[1:, :2]).data
    np.testing.assert_allclose(fwd[1, -1], short[0, -1], rtol=1e-12)
    back = T.gru_scan(T.tensor(gx), T.tensor(wh), T.tensor(bh), mask, reverse=True).data
    np.testing.assert_array_equal(back[1, 2:], 0.0)
