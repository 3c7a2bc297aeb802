import numpy as np
import pytest

from icode_rca.errors import ShapeError, ValidationError
from icode_rca.tensor import (
    Tape, Tensor, absolute, backward, finite_diff_check, mean, reshape, square, tanh, total,
)


class TestForwardOps:

    def test_matmul_identity(self):
        tape = Tape()
        a = np.random.default_rng(0).normal(size=(3, 3))
        result = tape.constant(np.eye(3)) @ tape.constant(a)
        np.testing.assert_array_equal(result.data, a)

    def test_tanh_of_zero_vector(self):
        np.testing.assert_array_equal(tanh(Tensor(np.zeros(4))).data, np.zeros(4))

    def test_matvec_matches_double_loop(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(4, 4))
        v = rng.normal(size=4)
        expected = np.zeros(4)
        for i in range(4):
            for j in range(4):
                expected[i] += a[i, j] * v[j]
        result = Tensor(a) @ Tensor(v)
        np.testing.assert_allclose(result.data, expected, rtol=0, atol=1e-12)

    def test_row_broadcast_add(self):
        x = Tensor(np.ones((3, 2)))
        result = x + Tensor(np.array([1.0, 2.0]))
        np.testing.assert_array_equal(result.data, [[2.0, 3.0]] * 3)

    def test_shape_mismatch_is_rejected(self):
        with pytest.raises(ShapeError, match="not aligned"):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
        with pytest.raises(ShapeError):
            Tensor(np.ones(3)) * Tensor(np.ones(4))

    def test_reshape_rejects_wrong_size(self):
        with pytest.raises(ShapeError, match="reshape"):
            reshape(Tensor(np.ones(6)), (4, 2))

    def test_mean_of_empty_tensor(self):
        with pytest.raises(ShapeError):
            mean(Tensor(np.zeros(0)))

    def test_rank_three_is_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 2, 2)))

    def test_data_is_read_only(self):
        tensor = Tensor(np.ones(3))
        with pytest.raises(ValueError):
            tensor.data[0] = 5.0

    def test_operands_from_two_tapes(self):
        first, second = Tape(), Tape()
        with pytest.raises(ValidationError, match="different tapes"):
            first.variable("x", np.ones(2)) + second.variable("y", np.ones(2))

    def test_unknown_operation(self):
        with pytest.raises(ValidationError, match="unknown operation"):
            Tape().forward_op("softmax", Tensor(np.ones(2)))

    def test_duplicate_variable(self):
        tape = Tape()
        tape.variable("w", np.ones(2))
        with pytest.raises(ValidationError, match="already registered"):
            tape.variable("w", np.ones(2))

    def test_nodes_are_topologically_ordered(self):
        tape = Tape()
        x = tape.variable("x", np.ones((2, 2)))
        total(tanh(x @ x) * 2.0)
        for index, node in enumerate(tape.nodes):
            assert all(parent < index for parent in node.parents)


class TestBackward:

    def test_sum_of_squares(self):
        x = np.array([0.5, -1.5, 2.0])
        tape = Tape()
        grads = tape.backward(total(square(tape.variable("x", x))))
        np.testing.assert_allclose(grads["x"].data, 2.0 * x)

    def test_sum_of_abs_is_sign(self):
        x = np.array([0.3, -2.0, 1.0, -0.1])
        tape = Tape()
        grads = tape.backward(total(absolute(tape.variable("x", x))))
        np.testing.assert_array_equal(grads["x"].data, np.sign(x))

    def test_abs_subgradient_at_zero(self):
        tape = Tape()
        grads = tape.backward(total(absolute(tape.variable("x", np.array([0.0, 2.0])))))
        np.testing.assert_array_equal(grads["x"].data, [0.0, 1.0])

    def test_broadcast_gradient_sums_rows(self):
        tape = Tape()
        x = tape.variable("x", np.ones((3, 2)))
        b = tape.variable("b", np.zeros(2))
        grads = tape.backward(total(x + b))
        np.testing.assert_array_equal(grads["b"].data, [3.0, 3.0])
        np.testing.assert_array_equal(grads["x"].data, np.ones((3, 2)))

    def test_reshape_gradient_keeps_parameter_shape(self):
        tape = Tape()
        w = tape.variable("w", np.arange(6.0).reshape(2, 3))
        grads = tape.backward(total(square(reshape(w, (3, 2)))))
        assert grads["w"].shape == (2, 3)
        np.testing.assert_allclose(grads["w"].data, 2.0 * np.arange(6.0).reshape(2, 3))

    def test_unreachable_parameter_has_zero_gradient(self):
        tape = Tape()
        x = tape.variable("x", np.ones(3))
        tape.variable("unused", np.ones((2, 2)))
        grads = tape.backward(total(x))
        np.testing.assert_array_equal(grads["unused"].data, np.zeros((2, 2)))

    def test_non_scalar_loss_is_rejected(self):
        tape = Tape()
        x = tape.variable("x", np.ones(3))
        with pytest.raises(ShapeError, match="scalar"):
            tape.backward(x * 2.0)

    def test_loss_without_tape(self):
        with pytest.raises(ValidationError):
            backward(Tensor(1.0))

    def test_independent_subgraphs_concatenate(self):
        rng = np.random.default_rng(2)
        x, y = rng.normal(size=3), rng.normal(size=(2, 2))

        tape = Tape()
        xs, ys = tape.variable("x", x), tape.variable("y", y)
        joint = tape.backward(total(square(xs)) + total(tanh(ys))).flat()

        first = Tape()
        gx = first.backward(total(square(first.variable("x", x)))).flat()
        second = Tape()
        gy = second.backward(total(tanh(second.variable("y", y)))).flat()
        np.testing.assert_allclose(joint, np.concatenate([gx, gy]), rtol=0, atol=1e-15)

    def test_deterministic_replay(self):
        rng = np.random.default_rng(3)
        w, x = rng.normal(size=(4, 3)), rng.normal(size=(5, 4))

        def run():
            tape = Tape()
            loss = mean(square(tanh(Tensor(x) @ tape.variable("w", w))))
            return loss.item(), tape.backward(loss)["w"].data

        first, second = run(), run()
        assert first[0] == second[0]
        np.testing.assert_array_equal(first[1], second[1])


class TestFiniteDiffCheck:

    def test_linear_function(self):
        rng = np.random.default_rng(4)
        a = rng.uniform(1.0, 2.0, size=5)
        error = finite_diff_check(lambda p: total(p["x"] * Tensor(a)), {"x": rng.uniform(-1, 1, size=5)})
        assert error < 1e-9

    def test_quadratic_function(self):
        rng = np.random.default_rng(5)
        error = finite_diff_check(lambda p: total(square(p["x"])), {"x": rng.uniform(0.5, 1.5, size=6)})
        assert error < 1e-7

    @pytest.mark.parametrize("seed", range(5))
    def test_two_layer_tanh_network(self, seed):
        rng = np.random.default_rng(seed)
        inputs = Tensor(rng.normal(size=(6, 3)))
        params = {
            "w1": rng.normal(size=(3, 4)),
            "c1": rng.normal(size=4),
            "w2": rng.normal(size=(4, 2)),
            "c2": rng.normal(size=2),
        }

        def network(p):
            hidden = tanh(inputs @ p["w1"] + p["c1"])
            return mean(square(hidden @ p["w2"] + p["c2"]))

        assert finite_diff_check(network, params) < 1e-4

    @pytest.mark.parametrize("kind", ["add", "sub", "mul", "matmul", "tanh", "square", "mean"])
    def test_each_op_kind(self, kind):
        rng = np.random.default_rng(6)
        a, b = rng.uniform(0.5, 1.5, size=(3, 3)), rng.uniform(0.5, 1.5, size=(3, 3))

        def fn(p):
            if kind in ("add", "sub", "mul", "matmul"):
                return total(square(p["a"].tape.forward_op(kind, p["a"], p["b"])))
            if kind == "mean":
                return mean(p["a"] * p["b"])
            return total(p["a"].tape.forward_op(kind, p["a"]) * p["b"])

        assert finite_diff_check(fn, {"a": a, "b": b}) < 1e-4
