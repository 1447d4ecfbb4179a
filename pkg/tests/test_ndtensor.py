import numpy as np
import pytest
import scipy.sparse as sp

from pown import ndtensor as nd
from pown.errors import ContractViolation, NumericError, ShapeMismatchError


def finite_difference(build, param, step=1e-6):
    """Independent central-difference gradient of a scalar expression."""
    grad = np.zeros_like(param.value)
    for idx in np.ndindex(param.value.shape):
        orig = param.value[idx]
        param.value[idx] = orig + step
        f_plus = nd.forward(build())[0, 0]
        param.value[idx] = orig - step
        f_minus = nd.forward(build())[0, 0]
        param.value[idx] = orig
        grad[idx] = (f_plus - f_minus) / (2.0 * step)
    return grad


class TestForward:
    def test_relu(self):
        out = nd.forward(nd.relu(nd.constant([[-1.0, 2.0]])))
        np.testing.assert_array_equal(out, [[0.0, 2.0]])

    def test_row_softmax_symmetry(self):
        out = nd.forward(nd.row_softmax(nd.constant([[0.0, 0.0]])))
        np.testing.assert_allclose(out, [[0.5, 0.5]])

    def test_spmm_identity(self):
        eye = nd.sparse_constant(sp.eye(2, format="csr"))
        out = nd.forward(nd.spmm(eye, nd.constant([[3.0], [4.0]])))
        np.testing.assert_allclose(out, [[3.0], [4.0]], atol=1e-15)

    def test_shape_mismatch_names_op(self):
        bad = nd.matmul(nd.constant(np.ones((2, 3))), nd.constant(np.ones((2, 3))))
        with pytest.raises(ShapeMismatchError, match="matmul"):
            nd.forward(bad)

    def test_non_finite_raises(self):
        with pytest.raises(NumericError, match="log"):
            nd.forward(nd.log(nd.constant([[-1.0]])))

    def test_leaf_without_value(self):
        empty = nd.Expr("leaf")
        with pytest.raises(ContractViolation):
            nd.forward(nd.relu(empty))

    def test_row_l2_normalize_unit_rows(self):
        rng = np.random.default_rng(0)
        x = nd.constant(rng.normal(size=(5, 4)))
        out = nd.forward(nd.row_l2_normalize(x))
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-12)

    def test_row_l2_normalize_zero_row_flagged(self):
        node = nd.row_l2_normalize(nd.constant([[0.0, 0.0], [3.0, 4.0]]))
        out = nd.forward(node)
        np.testing.assert_array_equal(out[0], [0.0, 0.0])
        np.testing.assert_array_equal(node.meta["zero_rows"], [0])

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        out = nd.forward(nd.row_softmax(nd.constant(rng.normal(size=(7, 5)) * 10)))
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


class TestBackward:
    def test_square(self):
        x = nd.parameter([[3.0]], name="x")
        grads = nd.backward(nd.mul(x, x))
        np.testing.assert_allclose(grads[x], [[6.0]])

    def test_relu_dead_region(self):
        x = nd.parameter([[-1.0, -2.0, -0.5]], name="x")
        grads = nd.backward(nd.reduce_mean(nd.relu(x)))
        np.testing.assert_array_equal(grads[x], np.zeros((1, 3)))

    def test_log_sigmoid_at_zero(self):
        w = nd.parameter([[0.0]], name="w")
        build = lambda: nd.log(nd.sigmoid(w))
        grads = nd.backward(build())
        oracle = finite_difference(build, w)
        np.testing.assert_allclose(grads[w], [[0.5]], atol=1e-12)
        np.testing.assert_allclose(grads[w], oracle, atol=1e-6)

    def test_root_must_be_scalar(self):
        x = nd.parameter([[1.0, 2.0]])
        with pytest.raises(ContractViolation):
            nd.backward(nd.relu(x))

    def test_shared_subexpression_accumulates(self):
        # The same (x*x) node used twice must match a tree with two copies.
        rng = np.random.default_rng(2)
        value = rng.normal(size=(3, 3))

        x_shared = nd.parameter(value.copy(), name="x")
        square = nd.mul(x_shared, x_shared)
        shared_root = nd.reduce_sum(nd.add(square, square))
        shared = nd.backward(shared_root)[x_shared]

        x_tree = nd.parameter(value.copy(), name="x")
        tree_root = nd.reduce_sum(
            nd.add(nd.mul(x_tree, x_tree), nd.mul(x_tree, x_tree)))
        tree = nd.backward(tree_root)[x_tree]
        np.testing.assert_allclose(shared, tree, atol=1e-14)

    def test_unused_parameter_gets_zero_gradient(self):
        x = nd.parameter([[1.0]])
        y = nd.parameter([[2.0]])
        root = nd.mul(x, x)
        nd.forward(root)
        grads = nd.backward(root)
        assert x in grads and y not in grads

    def test_slice_rows_scatters(self):
        x = nd.parameter(np.arange(6.0).reshape(3, 2))
        root = nd.reduce_sum(nd.slice_rows(x, [0, 0, 2]))
        grads = nd.backward(root)
        np.testing.assert_array_equal(grads[x], [[2, 2], [0, 0], [1, 1]])


class TestAdam:
    def test_first_step_hand_computed(self):
        # With g=1: m_hat=1, v_hat=1, update = lr * 1/(1+eps) ~ lr.
        p = nd.parameter([[1.0]], name="p")
        state = nd.AdamState(learning_rate=0.01)
        nd.adam_step([p], {p: np.array([[1.0]])}, state)
        np.testing.assert_allclose(p.value, [[0.99]], atol=1e-9)
        assert state.step_count == 1

    def test_zero_gradient_keeps_params(self):
        p = nd.parameter([[1.5]])
        state = nd.AdamState(learning_rate=0.1)
        nd.adam_step([p], {p: np.zeros((1, 1))}, state)
        np.testing.assert_array_equal(p.value, [[1.5]])
        assert state.step_count == 1

    def test_two_steps_monotone_against_reference(self):
        # Reference scalar Adam computed independently.
        lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
        m = v = 0.0
        ref = 1.0
        positions = []
        for t in (1, 2):
            g = 1.0
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            ref -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
            positions.append(ref)

        p = nd.parameter([[1.0]])
        state = nd.AdamState(learning_rate=lr)
        for expected in positions:
            nd.adam_step([p], {p: np.array([[1.0]])}, state)
            np.testing.assert_allclose(p.value, [[expected]], atol=1e-12)
        assert positions[1] < positions[0] < 1.0

    def test_non_finite_gradient_aborts(self):
        p = nd.parameter([[1.0]])
        state = nd.AdamState(learning_rate=0.1)
        with pytest.raises(NumericError):
            nd.adam_step([p], {p: np.array([[np.nan]])}, state)
        np.testing.assert_array_equal(p.value, [[1.0]])
        assert state.step_count == 0


class TestGradCheck:
    def test_quadratic_form(self):
        rng = np.random.default_rng(3)
        x = nd.parameter(rng.normal(size=(1, 4)), name="x")
        a = nd.constant(rng.normal(size=(4, 4)))
        build = lambda: nd.matmul(nd.matmul(x, a), nd.transpose(x))
        report = nd.grad_check(build, [x], tolerance=1e-5, step=1e-5)
        assert report.passed, report

    def test_softmax_nll_composite(self):
        rng = np.random.default_rng(4)
        logits = nd.parameter(rng.normal(size=(3, 4)), name="logits")
        onehot = np.zeros((3, 4))
        onehot[np.arange(3), [1, 0, 3]] = 1.0
        mask = nd.constant(onehot)

        def build():
            probs = nd.row_softmax(logits)
            return nd.scalar_scale(
                nd.reduce_sum(nd.mul(nd.log(probs), mask)), -1.0 / 3.0)

        report = nd.grad_check(build, [logits], tolerance=1e-4, step=1e-5)
        assert report.passed, report


def _random_expression(rng):
    """A random scalar expression over two bounded parameters."""
    rows, inner, cols = rng.integers(2, 5, size=3)
    a = nd.parameter(rng.uniform(-2, 2, (rows, inner)), name="a")
    b = nd.parameter(rng.uniform(-2, 2, (inner, cols)), name="b")
    choice = rng.integers(6)

    def build():
        base = nd.matmul(a, b)
        if choice == 0:
            out = nd.relu(base)
        elif choice == 1:
            out = nd.sigmoid(base)
        elif choice == 2:
            out = nd.row_softmax(base)
        elif choice == 3:
            out = nd.log(nd.sigmoid(base))
        elif choice == 4:
            out = nd.row_l2_normalize(nd.add(base, nd.constant([[3.0]])))
        else:
            out = nd.exp(nd.scalar_scale(base, 0.1))
        out = nd.mul(out, out)
        return nd.reduce_mean(out)

    return build, [a, b]


def test_gradient_property_suite():
    """Analytic gradients match central differences on >= 100 random cases."""
    rng = np.random.default_rng(12345)
    worst = 0.0
    for _ in range(100):
        build, params = _random_expression(rng)
        report = nd.grad_check(build, params, tolerance=1e-4, step=1e-5)
        worst = max(worst, report.max_rel_error)
        assert report.passed, report
    assert worst < 1e-4


def test_dropout_mask_statistics():
    rng = np.random.default_rng(5)
    mask = nd.dropout_mask((200, 50), 0.4, rng)
    kept = mask > 0
    assert abs(kept.mean() - 0.6) < 0.02
    np.testing.assert_allclose(mask[kept], 1.0 / 0.6)


def test_forward_backward_broadcast_add():
    col = nd.parameter(np.array([[1.0], [2.0]]), name="col")
    full = nd.constant(np.ones((2, 3)))
    build = lambda: nd.reduce_sum(nd.mul(nd.add(full, col), nd.add(full, col)))
    report = nd.grad_check(build, [col], tolerance=1e-6, step=1e-6)
    assert report.passed, report


def test_clamp_min_matches_maximum():
    x = nd.constant([[0.5, 2.0, -1.0]])
    out = nd.forward(nd.clamp_min(x, 1.0))
    np.testing.assert_allclose(out, [[1.0, 2.0, 1.0]])
