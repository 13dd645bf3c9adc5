"""MLP module: initialization, forward/backward, parameter accounting."""

import numpy as np
import pytest

from neam import neural
from neam.errors import DimensionMismatch


class TestWeightCount:
    def test_documented_dims(self):
        # 45*16+16 + 16*32+32 + 32*16+16 + 16*3+3
        assert neural.weight_count((45, 16, 32, 16, 3)) == 1859
        assert neural.weight_count((45, 16, 32, 16, 1)) == 1825
        assert neural.weight_count((39, 16, 32, 16, 3)) == 1763
        assert neural.weight_count((2, 16, 32, 16, 1)) == 1137

    def test_matches_actual_arrays(self):
        m = neural.init_xavier((7, 16, 32, 16, 2), seed=0)
        total = sum(w.size for w in m.weights) + sum(b.size for b in m.biases)
        assert total == neural.weight_count(m.dims) == m.n_weights()


class TestXavierInit:
    def test_bounds(self):
        m = neural.init_xavier((45, 16, 32, 16, 3), seed=1)
        bound0 = np.sqrt(6.0 / (45 + 16))
        assert bound0 == pytest.approx(0.3136, abs=2e-4)
        for w, (fi, fo) in zip(m.weights, zip(m.dims[:-1], m.dims[1:])):
            b = np.sqrt(6.0 / (fi + fo))
            assert np.all(np.abs(w) <= b)
            # a draw this wide should come close to its bound
            assert np.max(np.abs(w)) > 0.8 * b

    def test_biases_zero(self):
        m = neural.init_xavier((45, 16, 32, 16, 1), seed=2)
        for b in m.biases:
            assert np.all(b == 0.0)

    def test_deterministic(self):
        a = neural.init_xavier((10, 16, 32, 16, 1), seed=33)
        b = neural.init_xavier((10, 16, 32, 16, 1), seed=33)
        for wa, wb in zip(a.weights, b.weights):
            assert np.array_equal(wa, wb)
        c = neural.init_xavier((10, 16, 32, 16, 1), seed=34)
        assert not np.array_equal(a.weights[0], c.weights[0])


def _reference_forward(m, x):
    # independent dense-algebra evaluation with explicit loops
    act = x.copy()
    for li in range(4):
        z = np.empty((act.shape[0], m.dims[li + 1]))
        for i in range(act.shape[0]):
            for j in range(m.dims[li + 1]):
                z[i, j] = m.biases[li][j] + float(np.sum(act[i] * m.weights[li][:, j]))
        if li != 3:
            z = np.where(z > 0, z, m.leaky_slope * z)
        act = z
    return act


class TestForward:
    def test_zero_module_returns_zero(self):
        m = neural.zero_module((5, 16, 32, 16, 3))
        x = np.random.default_rng(0).normal(size=(7, 5))
        assert np.all(neural.mlp_forward(m, x) == 0.0)

    def test_positive_path_identity(self):
        # single positive path through all layers behaves linearly
        m = neural.zero_module((1, 16, 32, 16, 1))
        for w in m.weights:
            w[0, 0] = 1.0
        y = neural.mlp_forward(m, np.array([[2.0], [3.0]]))
        assert np.allclose(y, [[2.0], [3.0]])

    def test_matches_reference_evaluation(self):
        m = neural.init_xavier((9, 16, 32, 16, 3), seed=5)
        x = np.random.default_rng(6).normal(size=(11, 9))
        assert np.allclose(neural.mlp_forward(m, x), _reference_forward(m, x), atol=1e-12)

    def test_dimension_mismatch(self):
        m = neural.init_xavier((9, 16, 32, 16, 3), seed=5)
        with pytest.raises(DimensionMismatch):
            neural.mlp_forward(m, np.zeros((4, 8)))

    def test_single_vector_input(self):
        m = neural.init_xavier((4, 16, 32, 16, 2), seed=8)
        x = np.array([0.1, -0.2, 0.3, 0.4])
        assert neural.mlp_forward(m, x).shape == (2,)

    def test_finite_for_large_inputs(self):
        m = neural.init_xavier((6, 16, 32, 16, 1), seed=9)
        x = np.random.default_rng(1).normal(0, 1e6, (100, 6))
        assert np.isfinite(neural.mlp_forward(m, x)).all()


class TestBackward:
    def test_zero_grad_out(self):
        m = neural.init_xavier((5, 16, 32, 16, 2), seed=10)
        x = np.random.default_rng(2).normal(size=(6, 5))
        _, acts = neural.mlp_forward_cached(m, x)
        dw, db, dx = neural.mlp_backward(m, acts, np.zeros((6, 2)))
        assert all(np.all(g == 0) for g in dw + db) and np.all(dx == 0)

    def test_zero_weights_give_zero_input_grad(self):
        m = neural.zero_module((5, 16, 32, 16, 2))
        x = np.random.default_rng(3).normal(size=(6, 5))
        _, acts = neural.mlp_forward_cached(m, x)
        _, _, dx = neural.mlp_backward(m, acts, np.ones((6, 2)))
        assert np.all(dx == 0.0)

    def test_finite_difference_match(self):
        rng = np.random.default_rng(12)
        m = neural.init_xavier((7, 16, 32, 16, 3), seed=13)
        x = rng.normal(size=(50, 7))
        grad_out = rng.normal(size=(50, 3))
        _, acts = neural.mlp_forward_cached(m, x)
        dw, db, dx = neural.mlp_backward(m, acts, grad_out)
        h = 1e-6

        def total():
            return float(np.sum(neural.mlp_forward(m, x) * grad_out))

        worst = 0.0
        for li in range(4):
            w = m.weights[li]
            idx = [(0, 0), (w.shape[0] // 2, w.shape[1] // 2), (w.shape[0] - 1, w.shape[1] - 1)]
            for i, j in idx:
                orig = w[i, j]
                w[i, j] = orig + h
                hi = total()
                w[i, j] = orig - h
                lo = total()
                w[i, j] = orig
                fd = (hi - lo) / (2 * h)
                if abs(fd) > 1e-8:
                    worst = max(worst, abs(dw[li][i, j] - fd) / abs(fd))
            b = m.biases[li]
            orig = b[0]
            b[0] = orig + h
            hi = total()
            b[0] = orig - h
            lo = total()
            b[0] = orig
            fd = (hi - lo) / (2 * h)
            if abs(fd) > 1e-8:
                worst = max(worst, abs(db[li][0] - fd) / abs(fd))
        for k in (0, 3, 6):
            xp, xm = x.copy(), x.copy()
            xp[:, k] += h
            xm[:, k] -= h
            fd = (
                np.sum(neural.mlp_forward(m, xp) * grad_out, axis=1)
                - np.sum(neural.mlp_forward(m, xm) * grad_out, axis=1)
            ) / (2 * h)
            mask = np.abs(fd) > 1e-8
            worst = max(worst, np.max(np.abs(dx[mask, k] - fd[mask]) / np.abs(fd[mask])))
        assert worst < 1e-6

    def test_directional_derivative(self):
        rng = np.random.default_rng(14)
        m = neural.init_xavier((8, 16, 32, 16, 1), seed=15)
        x = rng.normal(size=(20, 8))
        delta = rng.normal(size=(20, 8))
        _, acts = neural.mlp_forward_cached(m, x)
        _, _, dx = neural.mlp_backward(m, acts, np.ones((20, 1)))
        h = 1e-6
        fd = (neural.mlp_forward(m, x + h * delta) - neural.mlp_forward(m, x - h * delta)) / (2 * h)
        assert np.allclose(np.sum(dx * delta, axis=1), fd[:, 0], rtol=1e-6, atol=1e-9)

    def test_leaky_slope_at_exact_zero(self):
        # a pre-activation of exactly zero must use the slope branch
        m = neural.zero_module((1, 16, 32, 16, 1))
        m.weights[0][0, 0] = 1.0
        m.weights[1][0, 0] = 1.0
        m.weights[2][0, 0] = 1.0
        m.weights[3][0, 0] = 1.0
        x = np.array([[0.0]])
        _, acts = neural.mlp_forward_cached(m, x)
        _, _, dx = neural.mlp_backward(m, acts, np.ones((1, 1)))
        assert dx[0, 0] == pytest.approx(m.leaky_slope**3, rel=1e-12)
