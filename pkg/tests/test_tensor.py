"""Primitive-level checks: frozen examples plus finite-difference oracles."""

import math

import numpy as np
import pytest

from dmnc import tensor as T
from dmnc.errors import ContractError, DimensionError, NonFiniteError


def _rand(rng, *shape):
    return T.parameter(rng.standard_normal(shape))


def check_op(build, params, tol=1e-6, eps=1e-5):
    report = T.grad_check(build, params, eps=eps)
    assert report.max_rel_err <= tol, report
    return report


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def test_matmul_identity():
    a = T.constant(np.eye(2))
    b = T.constant([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(a, b).data, [[1.0, 2.0], [3.0, 4.0]])


def test_matmul_selector_row():
    out = T.matmul(T.constant([[1.0, 0.0]]), T.constant([[5.0], [7.0]]))
    np.testing.assert_array_equal(out.data, [[5.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
        T.matmul(T.constant(np.zeros((2, 3))), T.constant(np.zeros((2, 2))))


def test_matmul_grads_match_finite_differences():
    rng = np.random.default_rng(0)
    a, b = _rand(rng, 3, 4), _rand(rng, 4, 2)
    check_op(lambda: T.matmul(a, b).sum(), {"a": a, "b": b})


def test_matvec_grads():
    rng = np.random.default_rng(1)
    w, x = _rand(rng, 3, 4), _rand(rng, 4)
    check_op(lambda: T.mul(T.matmul(w, x), T.matmul(w, x)).sum(), {"w": w, "x": x})


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def test_mul_by_ones_is_identity():
    rng = np.random.default_rng(2)
    x = rng.standard_normal(5)
    np.testing.assert_array_equal(T.mul(T.constant(x), T.constant(np.ones(5))).data, x)


def test_add_negation_is_zero():
    x = T.constant([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(T.add(x, -x).data, np.zeros(3))


def test_mul_grads():
    rng = np.random.default_rng(3)
    a, b = _rand(rng, 6), _rand(rng, 6)
    check_op(lambda: T.mul(a, b).sum(), {"a": a, "b": b})


def test_scalar_and_row_broadcast_grads():
    rng = np.random.default_rng(4)
    m, row, s = _rand(rng, 3, 4), _rand(rng, 4), T.parameter(0.7)
    check_op(lambda: T.mul(T.add(m, row), s).sum(), {"m": m, "row": row, "s": s})


def test_bad_broadcast_rejected():
    with pytest.raises(DimensionError):
        T.add(T.constant(np.zeros((2, 3))), T.constant(np.zeros(2)))


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def test_sigmoid_at_zero():
    assert T.sigmoid(T.constant(0.0)).item() == 0.5


def test_sigmoid_stable_for_large_negative():
    out = T.sigmoid(T.constant([-800.0, 800.0]))
    assert out.data[0] == 0.0 and out.data[1] == 1.0


def test_oneplus_at_zero():
    assert T.oneplus(T.constant(0.0)).item() == pytest.approx(1.0 + math.log(2.0), abs=1e-12)


@pytest.mark.parametrize("op", [T.sigmoid, T.tanh, T.relu, T.oneplus])
def test_activation_grads(op):
    rng = np.random.default_rng(5)
    # keep relu inputs away from its kink
    x = T.parameter(rng.standard_normal(8) + np.where(rng.standard_normal(8) > 0, 0.5, -0.5))
    check_op(lambda: T.mul(op(x), op(x)).sum(), {"x": x})


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax(T.constant([3.3, 3.3, 3.3])).data, np.ones(3) / 3, atol=1e-15)


def test_softmax_saturation():
    out = T.softmax(T.constant([60.0, 1.0])).data
    assert out[0] == pytest.approx(1.0, abs=1e-15) and out[1] < 1e-20


def test_softmax_sums_to_one():
    rng = np.random.default_rng(6)
    for _ in range(100):
        x = rng.standard_normal(rng.integers(1, 12)) * rng.uniform(0.1, 40)
        assert abs(T.softmax(T.constant(x)).data.sum() - 1.0) <= 1e-12


def test_softmax_grads():
    rng = np.random.default_rng(7)
    x, w = _rand(rng, 6), _rand(rng, 6)
    check_op(lambda: T.mul(T.softmax(x), w).sum(), {"x": x, "w": w})


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

def test_concat_values():
    out = T.concat([T.constant([1.0, 2.0]), T.constant([3.0])])
    np.testing.assert_array_equal(out.data, [1.0, 2.0, 3.0])


def test_cumprod_exclusive_definition():
    out = T.cumprod_exclusive(T.constant([2.0, 3.0, 4.0]))
    np.testing.assert_array_equal(out.data, [1.0, 2.0, 6.0])


def test_slice_out_of_range():
    with pytest.raises(IndexError):
        T.narrow(T.constant([1.0, 2.0]), 5)


@pytest.mark.parametrize("seed", range(3))
def test_structural_grads(seed):
    rng = np.random.default_rng(10 + seed)
    u, v, m = _rand(rng, 4), _rand(rng, 5), _rand(rng, 4, 5)

    def build():
        o = T.outer(u, v)
        s = T.mul(o, m).sum(axis=0)
        c = T.concat([s, T.cumprod_exclusive(v)])
        picked = T.take(c, np.array([1, 3, 3, 0]))
        return T.mul(T.matmul(T.transpose(m), u), s).sum() + picked.sum()

    check_op(build, {"u": u, "v": v, "m": m})


def test_cumprod_grad_with_exact_zero():
    x = T.parameter([0.5, 0.0, 0.8, 0.3])
    check_op(lambda: T.mul(T.cumprod_exclusive(x), T.constant([1.0, 2.0, 3.0, 4.0])).sum(),
             {"x": x}, tol=1e-7)


# ---------------------------------------------------------------------------
# cosine_rows
# ---------------------------------------------------------------------------

def test_cosine_self_similarity():
    m = np.array([[1.0, 2.0, 3.0], [0.0, -1.0, 1.0]])
    out = T.cosine_rows(T.constant(m), T.constant(m[0]))
    assert out.data[0] == pytest.approx(1.0, abs=1e-5)


def test_cosine_orthogonal_row():
    m = T.constant([[1.0, 0.0], [0.0, 1.0]])
    out = T.cosine_rows(m, T.constant([1.0, 0.0]))
    assert out.data[1] == pytest.approx(0.0, abs=1e-5)


def test_cosine_zero_rows_guarded():
    out = T.cosine_rows(T.constant(np.zeros((3, 4))), T.constant(np.ones(4)))
    np.testing.assert_array_equal(out.data, np.zeros(3))


def test_cosine_grads():
    rng = np.random.default_rng(11)
    m, k, w = _rand(rng, 5, 4), _rand(rng, 4), _rand(rng, 5)
    check_op(lambda: T.mul(T.cosine_rows(m, k), w).sum(), {"m": m, "k": k, "w": w}, tol=1e-5)


# ---------------------------------------------------------------------------
# backward contract
# ---------------------------------------------------------------------------

def test_backward_square():
    x = T.parameter(3.0)
    with T.Tape() as tape:
        y = T.mul(x, x)
        T.backward(y, tape)
    assert x.grad == pytest.approx(6.0)


def test_backward_product_sum():
    rng = np.random.default_rng(12)
    a, b = _rand(rng, 5), T.constant(rng.standard_normal(5))
    with T.Tape() as tape:
        T.backward(T.mul(a, b).sum(), tape)
    np.testing.assert_allclose(a.grad, b.data, atol=1e-15)


def test_backward_three_layer_composite():
    rng = np.random.default_rng(13)
    w1, w2, w3 = _rand(rng, 6, 5), _rand(rng, 6, 6), _rand(rng, 6)
    x = T.constant(rng.standard_normal(5))

    def build():
        h1 = T.tanh(T.matmul(w1, x))
        h2 = T.sigmoid(T.matmul(w2, h1))
        return T.mul(w3, h2).sum()

    report = T.grad_check(build, {"w1": w1, "w2": w2, "w3": w3})
    assert report.max_rel_err <= 1e-4


def test_backward_rejects_non_scalar_root():
    x = T.parameter([1.0, 2.0])
    with T.Tape() as tape:
        y = T.mul(x, x)
        with pytest.raises(ContractError):
            T.backward(y, tape)


def test_shared_subexpression_equals_unshared():
    rng = np.random.default_rng(14)
    xv = rng.standard_normal(4)

    x = T.parameter(xv.copy())
    with T.Tape() as tape:
        s = T.tanh(x)
        T.backward(T.mul(s, s).sum(), tape)
    shared = x.grad.copy()

    x2 = T.parameter(xv.copy())
    with T.Tape() as tape:
        T.backward(T.mul(T.tanh(x2), T.tanh(x2)).sum(), tape)
    np.testing.assert_array_equal(shared, x2.grad)


def test_tape_replay_is_bit_identical():
    rng = np.random.default_rng(15)
    w = rng.standard_normal((4, 4))
    x = rng.standard_normal(4)

    def run():
        p = T.parameter(w.copy())
        with T.Tape() as tape:
            y = T.softmax(T.matmul(p, T.constant(x.copy())))
            loss = T.mul(y, y).sum()
            T.backward(loss, tape)
        return loss.item(), p.grad.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert l1 == l2
    np.testing.assert_array_equal(g1, g2)


# ---------------------------------------------------------------------------
# grad_check itself
# ---------------------------------------------------------------------------

def test_grad_check_linear_function_is_exact():
    x = T.parameter([1.0, -2.0, 0.5])
    c = T.constant([3.0, 1.0, -4.0])
    report = T.grad_check(lambda: T.mul(x, c).sum(), {"x": x})
    assert report.max_rel_err <= 1e-9


def test_grad_check_constant_function():
    x = T.parameter([1.0, 2.0])
    report = T.grad_check(lambda: T.constant(5.0) + T.mul(x, T.constant(np.zeros(2))).sum(),
                          {"x": x})
    assert report.max_rel_err <= 1e-9


def test_property_random_composites_match_finite_differences():
    """Analytic gradients track central differences across random programs."""
    rng = np.random.default_rng(16)
    for trial in range(100):
        n = int(rng.integers(2, 6))
        a = T.parameter(rng.standard_normal(n) * rng.uniform(0.3, 2.0))
        b = T.parameter(rng.standard_normal(n) * rng.uniform(0.3, 2.0))
        kind = trial % 5

        def build():
            if kind == 0:
                return T.mul(T.sigmoid(a), T.tanh(b)).sum()
            if kind == 1:
                return T.mul(T.softmax(a), b).sum()
            if kind == 2:
                return T.mul(T.oneplus(a), T.cumprod_exclusive(T.sigmoid(b))).sum()
            if kind == 3:
                return T.outer(a, b).sum()
            return T.safe_log(T.sigmoid(T.mul(a, b))).sum()

        report = T.grad_check(build, {"a": a, "b": b})
        assert report.max_rel_err <= 1e-5, (trial, report)


def test_non_finite_surfaces_as_error():
    with pytest.raises(NonFiniteError):
        T.Tensor([1.0, np.nan])
    big = T.constant(np.full(4, 1e200))
    with np.errstate(over="ignore"):
        with pytest.raises(NonFiniteError):
            T.mul(big, big)


def test_fault_injection_hook_breaks_tanh_gradient():
    x = T.parameter([0.3, -0.7])
    T._fault_injections.add("tanh")
    try:
        report = T.grad_check(lambda: T.mul(T.tanh(x), T.tanh(x)).sum(), {"x": x})
    finally:
        T._fault_injections.discard("tanh")
    assert report.max_rel_err > 1e-3
