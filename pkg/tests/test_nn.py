import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepkiss.errors import ContractError, NumericalError
from deepkiss.nn import AdamState, MlpArch, MlpParams, adam_step, mlp_backward, mlp_forward, mlp_init

SEEDS = [0, 1, 2]


def direct_forward(p, X):
    """Row-by-row loop evaluation, independent of the batched code path."""
    out = []
    for x in X:
        h = list(x)
        for l, (W, b) in enumerate(zip(p.weights, p.biases)):
            a = [sum(W[i, j] * h[j] for j in range(len(h))) + b[i] for i in range(W.shape[0])]
            h = a if l == len(p.weights) - 1 else [max(v, 0.0) for v in a]
        out.append(h)
    return np.array(out)


def random_params(rng, sizes):
    p = mlp_init(MlpArch(sizes), int(rng.integers(1 << 30)))
    return MlpParams(p.weights, [rng.normal(0, 0.3, size=b.shape) for b in p.biases])


class TestArch:
    def test_needs_hidden_layer(self):
        with pytest.raises(ContractError):
            MlpArch([3, 2])

    def test_output_cap(self):
        MlpArch([3, 4, 5])
        with pytest.raises(ContractError):
            MlpArch([3, 4, 6])


class TestInit:
    def test_deterministic(self):
        a, b = mlp_init(MlpArch([4, 7, 2]), 11), mlp_init(MlpArch([4, 7, 2]), 11)
        assert a.flatten().tobytes() == b.flatten().tobytes()

    def test_shapes(self):
        p = mlp_init(MlpArch([3, 5, 2]), 0)
        assert [W.shape for W in p.weights] == [(5, 3), (2, 5)]
        assert [b.shape for b in p.biases] == [(5,), (2,)]
        assert all(np.all(b == 0) for b in p.biases)

    def test_he_std(self):
        p = mlp_init(MlpArch([3, 33334, 1]), 5)  # ~1e5 first-layer draws
        W = p.weights[0]
        assert W.size >= 100_000
        assert abs(W.std() / np.sqrt(2 / 3) - 1) < 0.05

    def test_flatten_roundtrip(self):
        p = mlp_init(MlpArch([3, 4, 4, 2]), 1)
        q = p.unflatten(p.flatten())
        np.testing.assert_array_equal(q.flatten(), p.flatten())
        r = MlpParams.from_dict(p.to_dict())
        np.testing.assert_array_equal(r.flatten(), p.flatten())


class TestForward:
    def test_zero_params(self):
        p = mlp_init(MlpArch([3, 4, 2]), 0)
        p = p.unflatten(np.zeros(p.size))
        Z, _ = mlp_forward(p, np.ones((5, 3)))
        np.testing.assert_array_equal(Z, 0.0)

    def test_affine_when_relu_inactive(self):
        # hidden layer is identity on positive pre-activations
        W1, b1 = np.eye(2), np.array([10.0, 10.0])
        W2, b2 = np.array([[1.0, 2.0], [0.5, -1.0]]), np.array([0.1, 0.2])
        p = MlpParams([W1, W2], [b1, b2])
        X = np.random.default_rng(0).uniform(-1, 1, size=(6, 2))
        Z, _ = mlp_forward(p, X)
        np.testing.assert_allclose(Z, (X + b1) @ W2.T + b2, rtol=1e-14)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_matches_direct(self, seed):
        rng = np.random.default_rng(seed)
        p = random_params(rng, [3, 6, 4, 2])
        X = rng.normal(size=(8, 3))
        Z, _ = mlp_forward(p, X)
        ref = direct_forward(p, X)
        np.testing.assert_allclose(Z, ref, rtol=1e-12, atol=1e-14)

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        p = random_params(rng, [4, 8, 2])
        X = rng.normal(size=(20, 4))
        assert mlp_forward(p, X)[0].tobytes() == mlp_forward(p, X)[0].tobytes()

    def test_non_finite_raises(self):
        p = mlp_init(MlpArch([1, 2, 1]), 0)
        with pytest.raises(NumericalError):
            mlp_forward(p, np.array([[np.inf]]))

    def test_wrong_width(self):
        with pytest.raises(ContractError):
            mlp_forward(mlp_init(MlpArch([3, 2, 1]), 0), np.ones((2, 4)))


class TestBackward:
    def test_zero_upstream(self):
        rng = np.random.default_rng(0)
        p = random_params(rng, [3, 5, 2])
        _, cache = mlp_forward(p, rng.normal(size=(4, 3)))
        gw, gx = mlp_backward(p, cache, np.zeros((4, 2)))
        np.testing.assert_array_equal(gw.flatten(), 0.0)
        np.testing.assert_array_equal(gx, 0.0)

    def test_affine_chain_rule(self):
        W1, b1 = np.eye(2), np.array([5.0, 5.0])
        W2 = np.array([[2.0, -1.0], [0.5, 3.0]])
        p = MlpParams([W1, W2], [b1, np.zeros(2)])
        _, cache = mlp_forward(p, np.zeros((2, 2)))
        G = np.eye(2)
        _, gx = mlp_backward(p, cache, G)
        np.testing.assert_allclose(gx, G @ W2 @ W1)

    def test_shape_mismatch(self):
        p = mlp_init(MlpArch([3, 5, 2]), 0)
        _, cache = mlp_forward(p, np.ones((4, 3)))
        with pytest.raises(ContractError):
            mlp_backward(p, cache, np.ones((4, 3)))

    @pytest.mark.parametrize("seed", SEEDS)
    @pytest.mark.parametrize("sizes", [[2, 3, 1], [3, 6, 2], [5, 16, 8, 2]])
    def test_finite_differences(self, seed, sizes):
        rng = np.random.default_rng(seed)
        p = random_params(rng, sizes)
        X = rng.normal(size=(7, sizes[0]))
        G = rng.normal(size=(7, sizes[-1]))
        loss = lambda q, x: float(np.sum(G * mlp_forward(q, x)[0]))
        _, cache = mlp_forward(p, X)
        gw, gx = mlp_backward(p, cache, G)
        h = 1e-5
        vec = p.flatten()
        fd_w = np.empty_like(vec)
        for i in range(vec.size):
            e = np.zeros_like(vec)
            e[i] = h
            fd_w[i] = (loss(p.unflatten(vec + e), X) - loss(p.unflatten(vec - e), X)) / (2 * h)
        fd_x = np.empty_like(X)
        for idx in np.ndindex(*X.shape):
            E = np.zeros_like(X)
            E[idx] = h
            fd_x[idx] = (loss(p, X + E) - loss(p, X - E)) / (2 * h)
        for an, fd in ((gw.flatten(), fd_w), (gx.ravel(), fd_x.ravel())):
            mask = np.abs(fd) > 1e-8
            rel = np.abs(an - fd)[mask] / np.abs(fd[mask])
            assert np.all(rel < 1e-4), rel.max()


class TestProperties:
    @pytest.mark.parametrize("seed", SEEDS)
    @given(c=st.floats(0.01, 100.0), data=st.data())
    @settings(max_examples=25, deadline=None)
    def test_positive_homogeneity(self, seed, c, data):
        rng = np.random.default_rng(seed * 97 + data.draw(st.integers(0, 10**6)))
        p = mlp_init(MlpArch([3, data.draw(st.integers(1, 12)), 2]), int(rng.integers(1 << 30)))
        X = rng.normal(size=(10, 3))
        np.testing.assert_allclose(mlp_forward(p, c * X)[0], c * mlp_forward(p, X)[0], rtol=1e-12, atol=1e-12)


class TestAdam:
    def test_zero_gradient(self):
        s = AdamState.zeros(3, lr=0.1)
        s.m[:] = 1.0
        x, s2 = adam_step(np.zeros(3), np.zeros(3), s)
        # moments decay, the step uses the decayed first moment
        np.testing.assert_allclose(s2.m, 0.9)
        s0 = AdamState.zeros(3, lr=0.1)
        x, _ = adam_step(np.ones(3), np.zeros(3), s0)
        np.testing.assert_array_equal(x, 1.0)

    @pytest.mark.parametrize("g", [1e-3, 0.5, 40.0, -7.0])
    def test_unit_first_step(self, g):
        x, s = adam_step(np.zeros(1), np.array([g]), AdamState.zeros(1, lr=0.01))
        assert abs(x[0]) == pytest.approx(0.01, rel=1e-4)
        assert np.sign(x[0]) == -np.sign(g)
        assert s.step == 1

    def test_quadratic(self):
        theta, s = np.array([1.0]), AdamState.zeros(1, lr=0.1)
        for _ in range(100):
            theta, s = adam_step(theta, 2 * theta, s)
        assert abs(theta[0]) < 0.05

    def test_maximize_and_mlp_params(self):
        p = mlp_init(MlpArch([2, 3, 1]), 0)
        g = p.unflatten(np.ones(p.size))
        q, _ = adam_step(p, g, AdamState.zeros(p.size, lr=0.01), maximize=True)
        assert isinstance(q, MlpParams)
        np.testing.assert_allclose(q.flatten() - p.flatten(), 0.01, rtol=1e-4)
