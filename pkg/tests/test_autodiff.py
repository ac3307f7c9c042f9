import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hagnn import autodiff as F
from hagnn.autodiff import (DimensionError, GradStateError, NumericError, OracleError, Tape,
                            finite_diff_check, forward_op, tensor)
from hagnn.training import FocalLossConfig, focal_loss_tensor


def test_matmul_identity():
    out = F.matmul(tensor([[1, 2], [3, 4]]), tensor([[1, 0], [0, 1]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_sigmoid_zero():
    assert F.sigmoid(tensor([0.0])).data[0] == 0.5


def test_softmax_uniform_row():
    np.testing.assert_allclose(F.softmax_rows(tensor([[1.0, 1.0, 1.0]])).data, [[1 / 3] * 3], rtol=0, atol=1e-15)


def test_forward_op_dispatch():
    out = forward_op("matmul", [tensor([[2.0]]), tensor([[3.0]])])
    assert out.data[0, 0] == 6.0
    with pytest.raises(ValueError):
        forward_op("conv3d", [tensor([1.0])])


def test_backward_square():
    x = tensor([3.0], requires_grad=True)
    with Tape() as tape:
        loss = F.sum(F.mul(x, x))
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [6.0])


def test_backward_sigmoid_at_zero():
    x = tensor([0.0], requires_grad=True)
    with Tape() as tape:
        loss = F.sum(F.sigmoid(x))
    tape.backward(loss)
    # sigma'(0) = sigma(0) (1 - sigma(0)) = 1/4
    assert x.grad[0] == pytest.approx(0.25, abs=1e-15)


def test_backward_matmul_vs_central_differences():
    rng = np.random.default_rng(0)
    a = tensor(rng.normal(size=(3, 4)), name="A")
    b = tensor(rng.normal(size=(4, 2)), name="B")
    report = finite_diff_check(lambda: F.sum(F.matmul(a, b)), [a, b], h=1e-5, tol=1e-6)
    assert report.passed, report


def test_oracle_sum_of_squares_scalar():
    x = tensor(2.0)
    report = finite_diff_check(lambda: F.sum(F.mul(x, x)), [x], h=1e-5)
    assert report.max_rel_err < 1e-7
    assert report.passed


def test_oracle_constant_function():
    x = tensor([1.0, 2.0])
    c = tensor(5.0)
    report = finite_diff_check(lambda: F.sum(c), [x])
    assert report.passed and report.max_rel_err == 0.0


def test_oracle_focal_loss_two_class_head():
    rng = np.random.default_rng(1)
    feats = F.constant(rng.normal(size=(6, 4)))
    w = tensor(rng.normal(size=(4, 1)), name="w")
    b = tensor([[0.1]], name="b")
    y = np.array([1, 0, 0, 1, 0, 0])

    def f():
        return focal_loss_tensor(F.sigmoid(F.add(F.matmul(feats, w), b)), y, FocalLossConfig(0.9, 3.0))

    assert finite_diff_check(f, [w, b], tol=1e-4).passed


def test_oracle_rejects_nondeterministic_function():
    rng = np.random.default_rng(0)
    x = tensor([1.0])
    with pytest.raises(OracleError):
        finite_diff_check(lambda: F.sum(F.mul(x, F.constant(rng.normal(size=1)))), [x])


# every primitive, randomized shapes, against central differences
def _op_cases(rng):
    n, m, k = rng.integers(2, 6, size=3)
    A = rng.normal(size=(n, m))
    B = rng.normal(size=(m, k))
    idx = rng.integers(0, 3, size=n)
    idx[:3] = [0, 1, 2]
    weights = F.constant(rng.normal(size=(50, 50)))

    def weighted(t):
        r, c = t.shape if t.data.ndim == 2 else (1, max(t.size, 1))
        return F.sum(F.mul(t, F.constant(weights.data[:r, :c].reshape(t.shape))))

    spmat = np.where(rng.random((n, n)) < 0.5, rng.random((n, n)), 0.0)
    return {
        "matmul": ([A, B], lambda a, b: weighted(F.matmul(a, b))),
        "add": ([A, rng.normal(size=(1, m))], lambda a, b: weighted(F.add(a, b))),
        "mul": ([A, rng.normal(size=(n, 1))], lambda a, b: weighted(F.mul(a, b))),
        "scalar_mul": ([A], lambda a: weighted(F.scalar_mul(a, -1.7))),
        "concat_rows": ([A, rng.normal(size=(2, m))], lambda a, b: weighted(F.concat_rows([a, b]))),
        "concat_cols": ([A, rng.normal(size=(n, 2))], lambda a, b: weighted(F.concat_cols([a, b]))),
        "slice": ([A], lambda a: weighted(F.slice2d(a, slice(1, None), slice(0, 2)))),
        "sum": ([A], lambda a: F.scalar_mul(F.sum(a), 0.3)),
        "mean_rows": ([A], lambda a: weighted(F.mean_rows(a))),
        "sigmoid": ([A], lambda a: weighted(F.sigmoid(a))),
        "tanh": ([A], lambda a: weighted(F.tanh(a))),
        "relu": ([A], lambda a: weighted(F.relu(a))),
        "log": ([np.abs(A) + 0.5], lambda a: weighted(F.log(a))),
        "power": ([np.abs(A) + 0.5], lambda a: weighted(F.power(a, -0.5))),
        "clip": ([A], lambda a: weighted(F.clip(a, -0.5, 0.5))),
        "softmax_rows": ([A], lambda a: weighted(F.softmax_rows(a))),
        "gather_rows": ([A], lambda a: weighted(F.gather_rows(a, [0, 2, 0, 1]))),
        "scatter_mean": ([A], lambda a: weighted(F.scatter_mean(a, idx, 4))),
        "segment_max": ([A], lambda a: weighted(F.segment_max(a, idx, 3))),
        "spmm": ([A], lambda a: weighted(F.spmm(spmat, a))),
    }


@pytest.mark.parametrize("kind", sorted(_op_cases(np.random.default_rng(0))))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_every_primitive_matches_finite_differences(kind, seed):
    rng = np.random.default_rng(seed)
    arrays, fn = _op_cases(rng)[kind]
    ts = [tensor(a, name=f"in{i}") for i, a in enumerate(arrays)]
    report = finite_diff_check(lambda: fn(*ts), ts, tol=1e-4)
    assert report.passed, report


@pytest.mark.parametrize("seed", range(3))
def test_deep_composition_gradient(seed):
    rng = np.random.default_rng(seed)
    x = tensor(rng.normal(size=(5, 4)), name="x")
    w1 = tensor(rng.normal(size=(4, 6)) * 0.5, name="w1")
    w2 = tensor(rng.normal(size=(6, 3)) * 0.5, name="w2")
    idx = np.array([0, 0, 1, 1, 1])

    def f():
        h = F.tanh(F.matmul(x, w1))
        h = F.sigmoid(F.matmul(h, w2))
        h = F.concat_cols([F.scatter_mean(h, idx, 2), F.segment_max(h, idx, 2)])
        h = F.softmax_rows(h)
        h = F.log(F.clip(h, 1e-7, 1.0))
        return F.sum(F.mul(h, F.constant(np.arange(12.0).reshape(2, 6))))

    assert finite_diff_check(f, [x, w1, w2], tol=1e-4).passed


def test_forward_is_pure():
    rng = np.random.default_rng(3)
    a = tensor(rng.normal(size=(4, 4)))
    outs = [F.softmax_rows(F.tanh(F.matmul(a, a))).data for _ in range(2)]
    assert outs[0].tobytes() == outs[1].tobytes()


def test_single_group_scatter_then_gather_is_mean_rows():
    rng = np.random.default_rng(4)
    a = tensor(rng.normal(size=(7, 3)))
    via_scatter = F.gather_rows(F.scatter_mean(a, np.zeros(7, dtype=int), 1), [0])
    np.testing.assert_array_equal(via_scatter.data, F.mean_rows(a).data)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1), st.floats(0.1, 5))
def test_softmax_rows_normalised(n, m, seed, scale):
    x = np.random.default_rng(seed).normal(size=(n, m)) * scale
    out = F.softmax_rows(tensor(x)).data
    np.testing.assert_allclose(out.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    assert np.all(out > 0)
    assert m == 1 or np.all(out < 1)


def test_shape_error_names_op_and_shapes():
    with pytest.raises(DimensionError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        F.matmul(tensor(np.ones((2, 3))), tensor(np.ones((2, 3))))


def test_non_finite_input_rejected_in_debug_profile():
    with pytest.raises(NumericError):
        F.tanh(tensor([np.nan]))


def test_release_profile_skips_finite_checks():
    F.set_profile("release")
    try:
        out = F.tanh(tensor([np.nan]))
        assert np.isnan(out.data[0])
    finally:
        F.set_profile("debug")


def test_non_scalar_loss_rejected():
    x = tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = F.mul(x, x)
    with pytest.raises(DimensionError):
        tape.backward(y)


def test_second_backward_is_state_error():
    x = tensor([1.0], requires_grad=True)
    with Tape() as tape:
        loss = F.sum(F.mul(x, x))
    tape.backward(loss)
    with pytest.raises(GradStateError):
        tape.backward(loss)


def test_non_participating_leaf_gets_zero_grad():
    x = tensor([1.0, 2.0], requires_grad=True)
    unused = tensor([[5.0]], requires_grad=True)
    with Tape() as tape:
        loss = F.sum(F.mul(x, x))
    tape.backward(loss, leaves=[x, unused])
    np.testing.assert_array_equal(unused.grad, [[0.0]])


def test_tape_dump_has_one_line_per_record():
    x = tensor([[1.0, 2.0]], requires_grad=True, name="x")
    with Tape() as tape:
        F.sum(F.tanh(F.scalar_mul(x, 2.0)))
    lines = tape.dump().splitlines()
    assert len(lines) == len(tape.records) == 3
    assert "scalar_mul" in lines[0] and "x[1, 2]" in lines[0]


def test_no_recording_outside_tape():
    x = tensor([1.0], requires_grad=True)
    y = F.mul(x, x)
    assert y._record is None
