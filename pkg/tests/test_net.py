import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from reskd.errors import DivergenceError, DomainError, ShapeError, TraceError
from reskd.net import (LayerGrads, Mlp, activation_deriv_diag, backward, forward,
                       init_mlp, pi_matrix, sgd_step, softmax_t)

from oracles import central_diff, max_rel_err, mlp_forward_loops


def random_net(rng, widths, activation="tanh"):
    return init_mlp(widths, activation, rng)


class TestForward:
    def test_identity_net(self):
        net = Mlp([2, 2], "tanh", [np.eye(2)])
        logits, _ = forward(net, np.array([[3.0, -1.0]]))
        np.testing.assert_array_equal(logits, [[3.0, -1.0]])

    @pytest.mark.parametrize("activation", ["tanh", "relu"])
    def test_zero_input_gives_zero_logits(self, activation):
        net = random_net(0, [3, 5, 4, 2], activation)
        logits, _ = forward(net, np.zeros((1, 3)))
        np.testing.assert_array_equal(logits, 0.0)

    @pytest.mark.parametrize("activation", ["tanh", "relu"])
    def test_matches_loop_oracle(self, activation):
        rng = np.random.default_rng(1)
        net = random_net(rng, [4, 5, 3], activation)
        x = rng.standard_normal(4)
        logits, _ = forward(net, x[None, :])
        expected = mlp_forward_loops(net.weights, activation, x)
        np.testing.assert_allclose(logits[0], expected, rtol=1e-13, atol=1e-14)

    def test_trace_records_every_layer(self):
        net = random_net(2, [3, 4, 4, 2])
        x = np.random.default_rng(3).standard_normal((5, 3))
        _, trace = forward(net, x)
        assert trace.num_layers == 3
        for l in (1, 2):
            np.testing.assert_array_equal(trace.post[l], np.tanh(trace.pre[l - 1]))
        np.testing.assert_array_equal(trace.post[3], trace.pre[2])

    def test_shape_error_names_layer(self):
        net = random_net(0, [3, 4, 2])
        with pytest.raises(ShapeError, match="layer 1"):
            forward(net, np.zeros((2, 5)))

    def test_pure(self):
        net = random_net(0, [3, 8, 8, 2])
        x = np.random.default_rng(0).standard_normal((16, 3))
        a, _ = forward(net, x)
        b, _ = forward(net, x)
        assert a.tobytes() == b.tobytes()

    def test_weight_shape_validation(self):
        with pytest.raises(ShapeError):
            Mlp([2, 3], "tanh", [np.zeros((2, 3))])


class TestBackward:
    def test_zero_upstream(self):
        net = random_net(0, [3, 4, 2])
        x = np.ones((2, 3))
        _, trace = forward(net, x)
        grads = backward(net, trace, np.zeros((2, 2)))
        assert all(not np.any(g) for g in grads.weights)

    def test_linear_least_squares_closed_form(self):
        rng = np.random.default_rng(4)
        net = random_net(rng, [3, 2])
        x = rng.standard_normal((6, 3))
        y = rng.standard_normal((6, 2))
        yhat, trace = forward(net, x)
        grads = backward(net, trace, 2 * (yhat - y))
        expected = 2 * (yhat - y).T @ x / 6
        np.testing.assert_allclose(grads.weights[0], expected, rtol=1e-13)

    @pytest.mark.parametrize("activation", ["tanh", "relu"])
    @pytest.mark.parametrize("widths", [[4, 5, 3], [3, 6, 6, 2], [2, 8, 3, 4, 2]])
    def test_finite_differences(self, activation, widths):
        rng = np.random.default_rng(len(widths) * 7 + (activation == "relu"))
        net = random_net(rng, widths, activation)
        # redraw until every pre-activation sits clear of the relu kink
        while True:
            x = rng.standard_normal((3, widths[0]))
            _, tr = forward(net, x)
            if activation == "tanh" or min(np.min(np.abs(h)) for h in tr.pre[:-1]) >= 1e-3:
                break
        target = rng.standard_normal((3, widths[-1]))

        def loss():
            out, _ = forward(net, x)
            return float(np.mean(np.sum((out - target) ** 2, axis=1)))

        out, trace = forward(net, x)
        grads = backward(net, trace, 2 * (out - target))
        fd = central_diff(loss, net.weights)
        for g, f in zip(grads.weights, fd):
            assert max_rel_err(g, f, floor=1e-6) < 1e-6

    def test_keeps_per_sample_output_grad(self):
        net = random_net(0, [2, 3, 2])
        _, trace = forward(net, np.ones((4, 2)))
        g = np.arange(8.0).reshape(4, 2)
        np.testing.assert_array_equal(backward(net, trace, g).out_grad, g)

    def test_stale_trace(self):
        net = random_net(0, [2, 3, 2])
        _, trace = forward(net, np.ones((1, 2)))
        grads = backward(net, trace, np.ones((1, 2)))
        sgd_step(net, grads, lr=0.1)
        with pytest.raises(TraceError):
            backward(net, trace, np.ones((1, 2)))

    def test_foreign_trace(self):
        a, b = random_net(0, [2, 3, 2]), random_net(1, [2, 3, 2])
        _, trace = forward(a, np.ones((1, 2)))
        with pytest.raises(TraceError):
            backward(b, trace, np.ones((1, 2)))


class TestSgd:
    def _net(self):
        return Mlp([2, 2], "tanh", [np.array([[1.0, 2.0], [3.0, 4.0]])])

    def test_vanilla(self):
        net = self._net()
        g = np.array([[0.5, -1.0], [2.0, 0.0]])
        sgd_step(net, LayerGrads([g], None), lr=0.1)
        np.testing.assert_allclose(net.weights[0], [[0.95, 2.1], [2.8, 4.0]])

    def test_zero_gradient_fixed_point(self):
        net = self._net()
        before = net.weights[0].copy()
        sgd_step(net, LayerGrads([np.zeros((2, 2))], None), lr=0.5, momentum=0.9)
        np.testing.assert_array_equal(net.weights[0], before)

    def test_momentum_unrolled(self):
        net = self._net()
        before = net.weights[0].copy()
        g = np.array([[1.0, -2.0], [0.5, 3.0]])
        _, state = sgd_step(net, LayerGrads([g], None), lr=0.01, momentum=0.9)
        after_one = net.weights[0].copy()
        sgd_step(net, LayerGrads([g], None), lr=0.01, momentum=0.9, state=state)
        np.testing.assert_allclose(after_one - net.weights[0], 0.01 * 1.9 * g, rtol=1e-12)
        np.testing.assert_allclose(before - net.weights[0], 0.01 * 2.9 * g, rtol=1e-12)

    def test_weight_decay(self):
        net = self._net()
        before = net.weights[0].copy()
        sgd_step(net, LayerGrads([np.zeros((2, 2))], None), lr=0.1, weight_decay=0.5)
        np.testing.assert_allclose(net.weights[0], before * (1 - 0.05))

    def test_non_finite_gradient(self):
        with pytest.raises(DivergenceError):
            sgd_step(self._net(), LayerGrads([np.array([[np.nan, 0], [0, 0]])], None), lr=0.1)

    @pytest.mark.parametrize("kw", [dict(lr=0), dict(lr=0.1, momentum=1.0),
                                    dict(lr=0.1, weight_decay=-1)])
    def test_bad_hyperparameters(self, kw):
        with pytest.raises(DomainError):
            sgd_step(self._net(), LayerGrads([np.zeros((2, 2))], None), **kw)

    def test_deterministic(self):
        nets = [self._net(), self._net()]
        g = LayerGrads([np.array([[0.1, 0.2], [0.3, 0.4]])], None)
        for net in nets:
            state = None
            for _ in range(3):
                _, state = sgd_step(net, g, 0.05, 0.9, 1e-4, state)
        assert nets[0].weights[0].tobytes() == nets[1].weights[0].tobytes()


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(softmax_t([0.0, 0.0], 5), [0.5, 0.5])

    def test_closed_form(self):
        np.testing.assert_allclose(softmax_t([math.log(2), 0.0], 1), [2 / 3, 1 / 3], rtol=1e-15)

    def test_infinite_temperature(self):
        np.testing.assert_allclose(softmax_t([10.0, 0.0], 1e9), [0.5, 0.5], atol=1e-8)

    def test_bad_temperature(self):
        with pytest.raises(DomainError):
            softmax_t([1.0, 2.0], 0)

    def test_no_overflow(self):
        p = softmax_t([1000.0, 0.0, -1000.0], 1.0)
        assert np.all(np.isfinite(p)) and p[0] == pytest.approx(1.0)

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.integers(2, 10), elements=st.floats(-50, 50)),
           st.floats(0.05, 100), st.floats(-100, 100))
    def test_distribution_and_shift_invariance(self, z, t, c):
        p = softmax_t(z, t)
        assert np.all(p >= 0)  # tiny entries may underflow to 0
        assert abs(p.sum() - 1) < 1e-12
        np.testing.assert_allclose(softmax_t(z + c, t), p, rtol=0, atol=1e-12)


class TestActivationDerivative:
    def _trace(self, activation, h):
        net = Mlp([len(h), len(h), 1], activation, [np.eye(len(h)), np.ones((1, len(h)))])
        _, trace = forward(net, np.array([h]))
        return net, trace

    def test_tanh_at_zero(self):
        net, trace = self._trace("tanh", [0.0])
        assert activation_deriv_diag(net, trace, 1)[0, 0] == 1.0

    def test_relu_tie_rule(self):
        net, trace = self._trace("relu", [-2.0, 0.0, 3.0])
        np.testing.assert_array_equal(activation_deriv_diag(net, trace, 1)[0], [0, 0, 1])

    def test_tanh_at_one(self):
        net, trace = self._trace("tanh", [1.0])
        assert activation_deriv_diag(net, trace, 1)[0, 0] == pytest.approx(0.41997434161402614, abs=1e-15)

    def test_output_layer_is_linear(self):
        net, trace = self._trace("tanh", [0.3, 0.7])
        np.testing.assert_array_equal(activation_deriv_diag(net, trace, 2), [[1.0]])

    def test_out_of_range(self):
        net, trace = self._trace("tanh", [0.3])
        with pytest.raises(IndexError):
            activation_deriv_diag(net, trace, 3)


class TestPiMatrix:
    def test_last_layer_identity(self):
        net = random_net(0, [3, 4, 5])
        _, trace = forward(net, np.ones((1, 3)))
        np.testing.assert_array_equal(pi_matrix(net, trace, 0, 2), np.eye(5))

    def test_two_layer_single_factor(self):
        rng = np.random.default_rng(5)
        net = random_net(rng, [3, 4, 2])
        _, trace = forward(net, rng.standard_normal((1, 3)))
        d = 1 - np.tanh(trace.pre[0][0]) ** 2
        np.testing.assert_allclose(pi_matrix(net, trace, 0, 1), np.diag(d) @ net.weights[1].T,
                                   rtol=1e-14)

    @pytest.mark.parametrize("activation", ["tanh", "relu"])
    def test_reproduces_per_sample_gradients(self, activation):
        rng = np.random.default_rng(6)
        net = random_net(rng, [4, 6, 5, 3], activation)
        x = rng.standard_normal((4, 4))
        g = rng.standard_normal((4, 3))
        _, trace = forward(net, x)
        for j in range(4):
            # single-sample backward is the per-sample gradient
            _, tr1 = forward(net, x[j:j + 1])
            per_sample = backward(net, tr1, g[j:j + 1]).weights
            for l in range(1, 4):
                pi = pi_matrix(net, trace, j, l)
                rebuilt = np.outer(pi @ g[j], trace.post[l - 1][j])
                assert max_rel_err(rebuilt, per_sample[l - 1], floor=1e-12) < 1e-10

    def test_stale_trace(self):
        net = random_net(0, [2, 3, 2])
        _, trace = forward(net, np.ones((1, 2)))
        net.version += 1
        with pytest.raises(TraceError):
            pi_matrix(net, trace, 0, 1)


def test_init_bounds_and_seed():
    a = init_mlp([5, 7, 3], "tanh", 11)
    b = init_mlp([5, 7, 3], "tanh", 11)
    for wa, wb, (fi, fo) in zip(a.weights, b.weights, [(5, 7), (7, 3)]):
        assert wa.tobytes() == wb.tobytes()
        assert np.max(np.abs(wa)) <= math.sqrt(6 / (fi + fo))
