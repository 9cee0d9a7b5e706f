import numpy as np
import pytest

import autodiff as ad
from autodiff import DiffArray, GradTape, count_macs, no_grad, set_numeric_checks
from errors import NumericError, ShapeError


def test_polynomial_gradient():
    x = DiffArray(np.array([3.0, -1.0]), requires_grad=True)
    y = (x * x + x).sum()
    y.backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_reused_node_is_visited_once_and_accumulates():
    x = DiffArray(np.array([2.0]), requires_grad=True)
    a = x + 1.0
    z = (a * a).sum()
    tape = GradTape(z)
    tape.backward()
    assert tape.visit_count == len(tape)
    np.testing.assert_allclose(x.grad, [6.0])


def test_broadcast_gradients_are_summed_back():
    a = DiffArray(np.ones((2, 3)), requires_grad=True)
    b = DiffArray(np.ones(3), requires_grad=True)
    ad.add(a, b).sum().backward()
    np.testing.assert_array_equal(a.grad, np.ones((2, 3)))
    np.testing.assert_array_equal(b.grad, np.full(3, 2.0))


def test_non_scalar_backward_needs_gradient():
    x = DiffArray(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_log_softmax_examples():
    equal = ad.log_softmax(DiffArray(np.zeros((1, 2))), axis=1)
    np.testing.assert_allclose(equal.data, np.log(0.5), atol=1e-6)
    large = ad.log_softmax(DiffArray(np.array([[1000.0, 0.0]]), dtype=np.float64), axis=1)
    np.testing.assert_allclose(large.data, [[0.0, -1000.0]], atol=1e-9)


def test_softmax_rows_sum_to_one(rng):
    probs = ad.softmax(DiffArray(rng.standard_normal((4, 5))), axis=-1)
    np.testing.assert_allclose(probs.data.sum(axis=-1), 1.0, atol=1e-6)


def test_no_grad_skips_the_tape():
    x = DiffArray(np.ones(2), requires_grad=True)
    with no_grad():
        y = x * 3.0
    assert not y.requires_grad
    assert y.is_leaf


def test_non_finite_output_raises_numeric_error():
    with pytest.raises(NumericError) as info:
        ad.log(DiffArray(np.array([0.0, 1.0])))
    assert info.value.op_name == "log"


def test_numeric_checks_can_be_disabled():
    previous = set_numeric_checks(False)
    try:
        out = ad.log(DiffArray(np.array([0.0])))
        assert np.isneginf(out.data[0])
    finally:
        set_numeric_checks(previous)


def test_max_tie_sends_gradient_to_first_element():
    x = DiffArray(np.array([4.0, 4.0, 0.0, 0.0]), requires_grad=True)
    x.max().backward()
    np.testing.assert_array_equal(x.grad, [1.0, 0.0, 0.0, 0.0])


def test_fancy_index_gradient_accumulates_repeats():
    x = DiffArray(np.arange(4.0), requires_grad=True)
    ad.getitem(x, np.array([1, 1, 3])).sum().backward()
    np.testing.assert_array_equal(x.grad, [0.0, 2.0, 0.0, 1.0])


def test_matmul_counts_macs():
    a, b = DiffArray(np.ones((2, 3))), DiffArray(np.ones((3, 4)))
    with count_macs() as counter:
        ad.matmul(a, b)
    assert counter.total == 2 * 4 * 3
    assert counter.by_op == {"matmul": 24}


def test_matmul_rejects_mismatched_inner_dimension():
    with pytest.raises(ShapeError):
        ad.matmul(DiffArray(np.ones((2, 3))), DiffArray(np.ones((4, 2))))


def test_cast_gradient_returns_to_source_dtype():
    x = DiffArray(np.ones(3, dtype=np.float32), requires_grad=True)
    ad.cast(x, np.float64).sum().backward()
    assert x.grad.dtype == np.float32


def test_unsupported_dtype_is_rejected():
    with pytest.raises(TypeError):
        DiffArray(np.ones(2), dtype=np.int32)


def test_permute_and_reshape_round_trip(rng):
    x = DiffArray(rng.standard_normal((2, 3, 4)), requires_grad=True)
    y = x.permute(2, 0, 1).reshape(4, 6)
    y.backward(np.ones((4, 6)))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))
