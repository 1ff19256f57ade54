import numpy as np
import pytest

from bgr import graph, reasoning
from bgr.autodiff import Tape, finite_diff_check
from bgr.tensor import ShapeError


def _loss_and_grads(build):
    """Run ``build(tape, params_as_nodes)`` and return (loss, grads) closure."""

    def f(params):
        tape = Tape()
        nodes = {k: tape.input(v, trainable=True) for k, v in params.items()}
        loss = build(tape, nodes)
        tape.backward(loss)
        return float(loss.value[0, 0]), {k: n.grad for k, n in nodes.items()}

    return f


class TestBackwardBasics:
    def test_matmul_adjoint_against_hand_formula(self):
        tape = Tape()
        a = tape.input(np.array([[1.0, 2.0], [3.0, 4.0]]), trainable=True)
        b = tape.input(np.array([[5.0, 6.0], [7.0, 8.0]]), trainable=True)
        loss = tape.sum_all(tape.matmul(a, b))
        tape.backward(loss)
        ones = np.ones((2, 2))
        np.testing.assert_allclose(a.grad, ones @ b.value.T, atol=1e-12)
        np.testing.assert_allclose(b.grad, a.value.T @ ones, atol=1e-12)

    def test_relu_subgradient(self):
        tape = Tape()
        x = tape.input(np.array([[-1.0], [2.0]]), trainable=True)
        tape.backward(tape.sum_all(tape.relu(x)))
        np.testing.assert_array_equal(x.grad, [[0.0], [1.0]])

    def test_stop_grad_blocks_exactly(self):
        tape = Tape()
        x = tape.input(np.array([[3.0, -1.0]]), trainable=True)
        kept = tape.stop_grad(x)
        passed = tape.mul(x, kept)  # only the direct factor contributes
        tape.backward(tape.sum_all(passed))
        np.testing.assert_array_equal(x.grad, kept.value)

    def test_unreachable_input_has_zero_grad(self):
        tape = Tape()
        x = tape.input(np.ones((2, 2)), trainable=True)
        y = tape.input(np.ones((2, 2)), trainable=True)
        tape.backward(tape.sum_all(tape.relu(x)))
        assert np.array_equal(y.grad, np.zeros((2, 2)))

    def test_non_scalar_loss_rejected(self):
        tape = Tape()
        x = tape.input(np.ones((2, 2)), trainable=True)
        with pytest.raises(ValueError):
            tape.backward(tape.relu(x))

    def test_rsqrt_clamp_gradient_regions(self):
        tape = Tape()
        x = tape.input(np.array([[4.0], [1e-9], [-2.0]]), trainable=True)
        tape.backward(tape.sum_all(tape.rsqrt_clamp(x, 1e-6)))
        np.testing.assert_allclose(x.grad[0, 0], -0.5 * 4.0 ** (-1.5), atol=1e-12)
        assert x.grad[1, 0] == 0.0  # clamped region
        assert x.grad[2, 0] == 0.0

    def test_gradient_accumulation_order_independent(self):
        a_val = np.random.default_rng(0).standard_normal((3, 3))

        def build(order):
            tape = Tape()
            a = tape.input(a_val, trainable=True)
            if order == 0:
                left = tape.relu(a)
                right = tape.sigmoid(a)
            else:
                right = tape.sigmoid(a)
                left = tape.relu(a)
            loss = tape.sum_all(tape.add(left, right))
            tape.backward(loss)
            return a.grad

        np.testing.assert_allclose(build(0), build(1), atol=1e-12)

    def test_shape_validation(self):
        tape = Tape()
        a = tape.input(np.ones((2, 3)))
        b = tape.input(np.ones((2, 3)))
        with pytest.raises(ShapeError):
            tape.matmul(a, b)
        with pytest.raises(ShapeError):
            tape.add(a, tape.input(np.ones((3, 2))))


class TestPrimitiveGradients:
    """Every primitive's adjoint against central differences."""

    def _check(self, build, shapes, seed=0, tol=1e-6):
        rng = np.random.default_rng(seed)
        params = {k: rng.uniform(0.2, 1.0, size=s) for k, s in shapes.items()}
        err = finite_diff_check(_loss_and_grads(build), params, h=1e-5)
        assert err < tol, err

    def test_matmul(self):
        self._check(
            lambda t, p: t.sum_all(t.matmul(p["a"], p["b"])),
            {"a": (3, 4), "b": (4, 2)},
        )

    def test_matmul_transpose_flags(self):
        self._check(
            lambda t, p: t.sum_all(t.matmul(p["a"], p["b"], transpose_a=True)),
            {"a": (4, 3), "b": (4, 2)},
        )
        self._check(
            lambda t, p: t.sum_all(t.matmul(p["a"], p["b"], transpose_b=True)),
            {"a": (3, 4), "b": (2, 4)},
        )

    def test_add_mul_scale(self):
        self._check(
            lambda t, p: t.sum_all(t.scale(t.mul(t.add(p["a"], p["b"]), p["a"]), 1.7)),
            {"a": (3, 3), "b": (3, 3)},
        )

    def test_row_scale_both_sides(self):
        self._check(
            lambda t, p: t.sum_all(t.row_scale(p["a"], p["s"])),
            {"a": (4, 3), "s": (4, 1)},
        )

    def test_relu_away_from_kink(self):
        self._check(lambda t, p: t.sum_all(t.relu(p["a"])), {"a": (4, 4)})

    def test_sigmoid(self):
        self._check(lambda t, p: t.sum_all(t.sigmoid(p["a"])), {"a": (3, 3)})

    def test_rsqrt_clamp_live_region(self):
        self._check(lambda t, p: t.sum_all(t.rsqrt_clamp(p["a"], 1e-6)), {"a": (4, 2)})

    def test_reduce_row_sum_and_reshape(self):
        self._check(
            lambda t, p: t.sum_all(t.reshape(t.reduce_row_sum(p["a"]), (1, 4))),
            {"a": (4, 5)},
        )

    def test_slice_and_concat_rows(self):
        def build(t, p):
            a = p["a"]
            top = t.slice_rows(a, 0, 2)
            bottom = t.slice_rows(a, 2, 5)
            return t.sum_all(t.mul(t.concat_rows([bottom, top]), p["b"]))

        self._check(build, {"a": (5, 3), "b": (5, 3)})

    def test_concat_cols(self):
        def build(t, p):
            stacked = t.concat_cols([p["a"], p["b"]])
            return t.sum_all(t.matmul(stacked, p["w"]))

        self._check(build, {"a": (3, 2), "b": (3, 2), "w": (4, 3)})

    def test_softmax_ce(self):
        labels = np.array([0, 2, 1])
        self._check(
            lambda t, p: t.softmax_ce(p["logits"], labels), {"logits": (3, 3)}
        )

    def test_bce(self):
        target = np.array([[1.0], [0.0], [1.0]])
        self._check(
            lambda t, p: t.bce(t.sigmoid(p["z"]), target), {"z": (3, 1)}
        )


class TestFiniteDiffCheck:
    def test_quadratic_is_exact_to_roundoff(self):
        def f(params):
            x = params["x"]
            return float((x * x).sum()), {"x": 2.0 * x}

        rng = np.random.default_rng(1)
        err = finite_diff_check(f, {"x": rng.standard_normal((4, 4))})
        assert err < 1e-9

    def test_detects_wrong_gradient(self):
        def f(params):
            x = params["x"]
            return float((x * x).sum()), {"x": 3.0 * x}  # deliberately wrong

        err = finite_diff_check(f, {"x": np.ones((2, 2))})
        assert err > 1e-2

    def test_bad_step_rejected(self):
        with pytest.raises(ValueError):
            finite_diff_check(lambda p: (0.0, {}), {}, h=0.0)


class TestReasoningLayerGradients:
    def test_layer_loss_wrt_weight(self):
        # one graph layer on a 12-node, 4-channel instance
        rng = np.random.default_rng(11)
        feats_v = rng.uniform(0.1, 1.0, size=(12, 4))
        scores_v = rng.uniform(0.0, 1.0, size=(12, 1))

        def build(tape, p):
            feats = tape.input(feats_v)
            scores = tape.input(scores_v)
            ones_col = tape.input(np.ones((12, 1)))
            ones_row = tape.input(np.ones((1, 12)))
            boosted = tape.row_scale(feats, tape.add(scores, ones_col))
            colp = tape.reshape(tape.matmul(ones_row, feats), (4, 1))
            colb = tape.reshape(tape.matmul(ones_row, boosted), (4, 1))
            deg = tape.add(tape.matmul(boosted, colp), tape.matmul(feats, colb))
            d_inv = tape.rsqrt_clamp(deg, 1e-6)
            q11 = tape.row_scale(boosted, d_inv)
            q21 = tape.row_scale(feats, d_inv)
            left = tape.matmul(q11, tape.matmul(q21, feats, transpose_a=True))
            right = tape.matmul(q21, tape.matmul(q11, feats, transpose_a=True))
            out = tape.relu(tape.matmul(tape.add(left, right), p["theta"]))
            return tape.sum_all(out)

        rngp = np.random.default_rng(12)
        params = {"theta": rngp.standard_normal((4, 4))}
        err = finite_diff_check(_loss_and_grads(build), params, h=1e-5)
        assert err < 1e-6

    def test_tape_layer_matches_numpy_path(self):
        rng = np.random.default_rng(13)
        feats_v = rng.uniform(0.1, 1.0, size=(9, 3))
        scores_v = rng.uniform(0.0, 1.0, size=9)
        theta = rng.standard_normal((3, 3))
        g = graph.build_graph(feats_v, scores_v)
        d_inv = reasoning.normalize_degrees(g.degrees, 1e-6)
        q = reasoning.build_q_factors(g.feats, g.boosted, d_inv)
        expected = reasoning.layer_efficient(feats_v, q, reasoning.LayerParams(theta))

        tape = Tape()
        feats = tape.input(feats_v)
        scores = tape.input(scores_v[:, None])
        ones_col = tape.input(np.ones((9, 1)))
        ones_row = tape.input(np.ones((1, 9)))
        boosted = tape.row_scale(feats, tape.add(scores, ones_col))
        colp = tape.reshape(tape.matmul(ones_row, feats), (3, 1))
        colb = tape.reshape(tape.matmul(ones_row, boosted), (3, 1))
        deg = tape.add(tape.matmul(boosted, colp), tape.matmul(feats, colb))
        d_inv_n = tape.rsqrt_clamp(deg, 1e-6)
        q11 = tape.row_scale(boosted, d_inv_n)
        q21 = tape.row_scale(feats, d_inv_n)
        left = tape.matmul(q11, tape.matmul(q21, feats, transpose_a=True))
        right = tape.matmul(q21, tape.matmul(q11, feats, transpose_a=True))
        out = tape.relu(tape.matmul(tape.add(left, right), tape.input(theta)))
        np.testing.assert_allclose(out.value, expected, atol=1e-12)
