#!/usr/bin/env python3
"""
Tensor primitives, the backward pass and finite-difference gradient checks
"""

import unittest
import sys
import os

import numpy as np

# Add parent directory to path to import app modules
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numeric_core as nc
from numeric_core import Graph, ShapeError
from parameter_store import ParameterStore


def random_store(shapes, seed=0):
    rng = np.random.default_rng(seed)
    return ParameterStore({name: rng.standard_normal(shape) for name, shape in shapes.items()})


def check_gradients(fn, shapes, inputs=None, seed=0):
    return nc.grad_check(Graph(fn, random_store(shapes, seed)), inputs)


def conv2d_loop(x, w, b, stride, padding, groups):
    """Direct summation reference for nc.conv2d"""
    (pt, pb), (pl, pr) = padding
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    batch, channels, height, width = xp.shape
    out_channels, group_channels, kh, kw = w.shape
    ho = (height - kh) // stride[0] + 1
    wo = (width - kw) // stride[1] + 1
    per_group = out_channels // groups
    out = np.zeros((batch, out_channels, ho, wo))
    for n in range(batch):
        for o in range(out_channels):
            g = o // per_group
            for i in range(ho):
                for j in range(wo):
                    total = b[o]
                    for c in range(group_channels):
                        for a in range(kh):
                            for d in range(kw):
                                total += xp[n, g * group_channels + c, i * stride[0] + a, j * stride[1] + d] * w[o, c, a, d]
                    out[n, o, i, j] = total
    return out


class ForwardTest(unittest.TestCase):
    """Values produced by single primitives"""

    def test_identity_graph(self):
        x = np.arange(6.0).reshape(2, 3)
        graph = Graph(lambda params, x: nc.identity(x), ParameterStore())
        np.testing.assert_array_equal(nc.forward(graph, {"x": x})["output"].data, x)

    def test_tanh_of_zero(self):
        graph = Graph(lambda params, x: nc.tanh(x), ParameterStore())
        out = nc.forward(graph, {"x": np.zeros((3, 4))})["output"].data
        np.testing.assert_array_equal(out, np.zeros((3, 4)))

    def test_conv2d_box_sum(self):
        out = nc.conv2d(nc.constant(np.ones((1, 1, 4, 4))), nc.constant(np.ones((1, 1, 3, 3))))
        self.assertEqual(out.shape, (1, 1, 2, 2))
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 9.0))

    def test_conv2d_matches_direct_summation(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 4, 5, 9))
        w = rng.standard_normal((6, 2, 2, 3))
        b = rng.standard_normal(6)
        padding = ((1, 0), (1, 1))
        out = nc.conv2d(nc.constant(x), nc.constant(w), nc.constant(b), stride=(1, 2), padding=padding, groups=2)
        np.testing.assert_allclose(out.data, conv2d_loop(x, w, b, (1, 2), padding, 2), atol=1e-12)

    def test_conv_transpose_output_size(self):
        x = nc.constant(np.ones((1, 2, 3, 4)))
        w = nc.constant(np.ones((2, 5, 2, 3)))
        out = nc.conv_transpose2d(x, w, stride=(1, 2), output_padding=(0, 1))
        self.assertEqual(out.shape, (1, 5, 4, 10))

    def test_causal_attention_ignores_future_frames(self):
        rng = np.random.default_rng(2)
        q, k, v = (rng.standard_normal((1, 2, 8, 4)) for _ in range(3))
        base = nc.scaled_dot_product_attention(nc.constant(q), nc.constant(k), nc.constant(v), causal=True).data
        v2 = v.copy()
        v2[:, :, -1] += 10.0
        changed = nc.scaled_dot_product_attention(nc.constant(q), nc.constant(k), nc.constant(v2), causal=True).data
        np.testing.assert_allclose(base[:, :, :-1], changed[:, :, :-1], atol=1e-12)
        self.assertFalse(np.allclose(base[:, :, -1], changed[:, :, -1]))

    def test_single_frame_attention_returns_values(self):
        rng = np.random.default_rng(3)
        q, k, v = (rng.standard_normal((2, 1, 4)) for _ in range(3))
        out = nc.scaled_dot_product_attention(nc.constant(q), nc.constant(k), nc.constant(v))
        np.testing.assert_allclose(out.data, v, atol=1e-12)

    def test_shape_errors_name_the_primitive(self):
        with self.assertRaises(ShapeError) as ctx:
            nc.conv2d(nc.constant(np.ones((1, 3, 4, 4))), nc.constant(np.ones((1, 2, 3, 3))))
        self.assertIn("conv2d", str(ctx.exception))
        with self.assertRaises(ShapeError) as ctx:
            nc.add(nc.constant(np.ones((2, 3))), nc.constant(np.ones((4, 3))))
        self.assertIn("(2, 3)", str(ctx.exception))
        self.assertIn("(4, 3)", str(ctx.exception))

    def test_item_needs_a_single_value(self):
        self.assertEqual(nc.constant(np.array([[2.5]])).item(), 2.5)
        with self.assertRaises(ShapeError) as ctx:
            nc.constant(np.ones((2, 3))).item()
        self.assertIn("(2, 3)", str(ctx.exception))

    def test_forward_is_repeatable(self):
        store = random_store({"w": (3, 5)})
        graph = Graph(lambda params, x: nc.tanh(nc.linear(x, params["w"])), store)
        x = np.random.default_rng(4).standard_normal((2, 5))
        first = nc.forward(graph, {"x": x})["output"].data
        second = nc.forward(graph, {"x": x})["output"].data
        np.testing.assert_array_equal(first, second)


class BackwardTest(unittest.TestCase):
    """Gradients from the reverse pass"""

    def test_sum_gives_ones(self):
        store = random_store({"x": (3, 4)})
        graph = Graph(lambda params: nc.sum_(params["x"]), store)
        grads = nc.backward(graph, nc.forward(graph)["output"])
        np.testing.assert_array_equal(grads["x"], np.ones((3, 4)))

    def test_square_gives_twice_x(self):
        store = random_store({"x": (5,)})
        graph = Graph(lambda params: nc.sum_(nc.mul(params["x"], params["x"])), store)
        grads = nc.backward(graph, nc.forward(graph)["output"])
        np.testing.assert_allclose(grads["x"], 2.0 * store["x"])

    def test_fan_out_accumulates(self):
        store = random_store({"x": (4,)})
        graph = Graph(lambda params: nc.sum_(nc.add(nc.mul(params["x"], 3.0), nc.exp(params["x"]))), store)
        grads = nc.backward(graph, nc.forward(graph)["output"])
        np.testing.assert_allclose(grads["x"], 3.0 + np.exp(store["x"]))

    def test_unused_parameter_gets_zero_gradient(self):
        store = random_store({"x": (2,), "unused": (3, 3)})
        graph = Graph(lambda params: nc.sum_(params["x"]), store)
        grads = nc.backward(graph, nc.forward(graph)["output"])
        np.testing.assert_array_equal(grads["unused"], np.zeros((3, 3)))

    def test_non_scalar_loss_is_rejected(self):
        store = random_store({"x": (3,)})
        graph = Graph(lambda params: nc.tanh(params["x"]), store)
        with self.assertRaises(ShapeError):
            nc.backward(graph, nc.forward(graph)["output"])

    def test_grad_check_requires_float64(self):
        store = ParameterStore({"x": np.ones(3, dtype=np.float32)})
        with self.assertRaises(ValueError):
            nc.grad_check(Graph(lambda params: nc.sum_(params["x"]), store))


class GradCheckTest(unittest.TestCase):
    """Analytic gradients against central finite differences"""

    def assertPasses(self, report):
        self.assertTrue(report.passed, f"failing parameters: {report.failing()}")

    def test_elementwise_composite(self):
        def fn(params):
            a, b = params["a"], params["b"]
            y = nc.div(nc.mul(nc.tanh(a), nc.sigmoid(b)), nc.add(nc.exp(nc.mul(b, 0.1)), 1.0))
            y = nc.add(y, nc.elu(a))
            y = nc.sub(y, nc.silu(b))
            return nc.mul(nc.log(nc.add(nc.mul(a, a), 1.0)), nc.sqrt(nc.add(nc.mul(y, y), 1.0)))

        self.assertPasses(check_gradients(fn, {"a": (3, 4), "b": (3, 4)}))

    def test_softmax_and_log_softmax(self):
        def fn(params):
            x = params["x"]
            return nc.add(nc.log_softmax(x, axis=-1), nc.mul(nc.softmax(x, axis=0), 2.0))

        self.assertPasses(check_gradients(fn, {"x": (4, 6)}))

    def test_shape_operations(self):
        def fn(params):
            x, y = params["x"], params["y"]
            z = nc.concat([x, nc.transpose(y, (1, 0, 2))], axis=1)
            z = nc.reshape(z, (2, -1))
            z = nc.add(z[:, [0, 2, 2, 5]].sum(), nc.pad(x, ((1, 0), (0, 2), (0, 0))).mean())
            return nc.add(z, nc.sum_(nc.broadcast_to(nc.stack([x[0], x[1]], axis=0), (3, 2, 3, 2))))

        self.assertPasses(check_gradients(fn, {"x": (2, 3, 2), "y": (4, 2, 2)}))

    def test_linear_and_layer_norm(self):
        def fn(params, x):
            h = nc.linear(x, params["w"], params["b"])
            return nc.layer_norm(h, params["gamma"], params["beta"])

        x = np.random.default_rng(5).standard_normal((2, 3, 4))
        self.assertPasses(check_gradients(fn, {"w": (6, 4), "b": (6,), "gamma": (6,), "beta": (6,)}, {"x": x}))

    def test_conv2d_with_stride_padding_and_groups(self):
        def fn(params):
            return nc.conv2d(params["x"], params["w"], params["b"], stride=(1, 2), padding=((1, 0), (1, 1)), groups=2)

        self.assertPasses(check_gradients(fn, {"x": (2, 4, 5, 7), "w": (6, 2, 2, 3), "b": (6,)}))

    def test_conv_transpose2d(self):
        def fn(params):
            return nc.conv_transpose2d(params["x"], params["w"], params["b"], stride=(1, 2), output_padding=(0, 1))

        self.assertPasses(check_gradients(fn, {"x": (1, 2, 3, 4), "w": (2, 3, 2, 3), "b": (3,)}))

    def test_grouped_conv1d(self):
        def fn(params):
            return nc.conv1d(params["x"], params["w"], params["b"], padding=(1, 1), groups=2)

        self.assertPasses(check_gradients(fn, {"x": (2, 4, 7), "w": (4, 2, 3), "b": (4,)}))

    def test_recurrent_cell_unrolled_five_steps(self):
        hidden = 3

        def fn(params, x):
            gates = nc.linear(x, params["w_ih"], params["bias"])
            state = nc.constant(np.zeros((2, 2 * hidden)))
            outputs = []
            for t in range(5):
                state = nc.lstm_cell(gates[:, t, :], state, params["w_hh"])
                outputs.append(state[:, :hidden])
            return nc.stack(outputs, axis=1)

        x = np.random.default_rng(6).standard_normal((2, 5, 4))
        shapes = {"w_ih": (4 * hidden, 4), "w_hh": (4 * hidden, hidden), "bias": (4 * hidden,)}
        self.assertPasses(check_gradients(fn, shapes, {"x": x}))

    def test_attention_two_heads_eight_frames(self):
        for causal in (False, True):
            with self.subTest(causal=causal):
                def fn(params):
                    return nc.scaled_dot_product_attention(params["q"], params["k"], params["v"], causal=causal)

                self.assertPasses(check_gradients(fn, {"q": (1, 2, 8, 4), "k": (1, 2, 8, 4), "v": (1, 2, 8, 4)}))

    def test_report_flags_wrong_gradient(self):
        def broken_square(x):
            return nc._make(x.data * x.data, (x,), lambda g: (g * x.data,), "broken")

        report = check_gradients(lambda params: nc.sum_(broken_square(params["x"])), {"x": (4,)})
        self.assertFalse(report.passed)
        self.assertIn("x", report.failing())


if __name__ == '__main__':
    unittest.main()
