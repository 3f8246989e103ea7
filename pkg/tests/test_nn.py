import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from driftweight import nn
from driftweight.errors import ConfigError, DataError, TrainingError


def random_problem(rng, task, sizes=(3, 5, 4)):
    sizes = list(sizes)
    if task == "regression":
        sizes[-1] = 1
    params = nn.mlp_init(sizes, int(rng.integers(1 << 30)), activation="tanh")
    X = rng.normal(size=(7, sizes[0]))
    y = rng.integers(0, sizes[-1], size=7) if task == "classification" else rng.normal(size=7)
    return params, nn.Batch(X, y)


def fd_grad(params, batch, task, h=1e-5):
    g = np.zeros(params.size)
    for j in range(params.size):
        e = np.zeros(params.size)
        e[j] = h
        g[j] = (nn.loss_eval(params.with_flat(params.flat + e), batch, task)
                - nn.loss_eval(params.with_flat(params.flat - e), batch, task)) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


class TestInit:
    def test_single_layer_counts_and_zero_bias(self):
        p = nn.mlp_init([2, 1], seed=0, scale=1.0)
        assert p.size == 3
        assert p.flat[-1] == 0.0

    def test_param_count(self):
        assert nn.n_params([2, 4, 3]) == 27
        assert nn.mlp_init([2, 4, 3], 1).size == 27

    def test_deterministic(self):
        a = nn.mlp_init([3, 8, 2], 5, 0.7)
        b = nn.mlp_init([3, 8, 2], 5, 0.7)
        assert np.array_equal(a.flat, b.flat)

    def test_bounds(self):
        p = nn.mlp_init([16, 4], 3, scale=2.0)
        W, b = next(p.layers())
        assert np.all(np.abs(W) <= 2.0 / 4.0)
        assert np.all(b == 0)

    @pytest.mark.parametrize("sizes", [[], [3], [3, 0], [2, -1]])
    def test_bad_sizes(self, sizes):
        with pytest.raises(ConfigError):
            nn.mlp_init(sizes, 0)

    def test_bad_scale(self):
        with pytest.raises(ConfigError):
            nn.mlp_init([2, 2], 0, scale=0.0)

    def test_params_are_read_only(self):
        p = nn.mlp_init([2, 3], 0)
        with pytest.raises(ValueError):
            p.flat[0] = 1.0

    def test_non_finite_params_rejected(self):
        with pytest.raises(TrainingError):
            nn.ModelParams((1, 1), np.array([np.nan, 0.0]))


class TestForward:
    def test_zero_params_give_zero_logits(self):
        p = nn.ModelParams((3, 4, 2), np.zeros(nn.n_params([3, 4, 2])))
        assert np.all(nn.forward(p, np.random.default_rng(0).normal(size=(5, 3))) == 0)

    def test_identity_layer(self):
        flat = np.concatenate([np.eye(3).ravel(), np.zeros(3)])
        p = nn.ModelParams((3, 3), flat)
        x = np.array([[1.0, -2.0, 0.5]])
        assert np.array_equal(nn.forward(p, x), x)

    def test_duplicated_rows(self):
        p = nn.mlp_init([2, 6, 3], 4)
        x = np.array([[0.3, -1.2]])
        out = nn.forward(p, np.vstack([x, x]))
        assert np.array_equal(out[0], out[1])

    def test_dimension_mismatch(self):
        with pytest.raises(DataError):
            nn.forward(nn.mlp_init([2, 3], 0), np.zeros((4, 3)))

    def test_non_finite_input(self):
        with pytest.raises(DataError):
            nn.forward(nn.mlp_init([2, 3], 0), np.array([[np.inf, 0.0]]))

    def test_pure(self):
        p = nn.mlp_init([2, 5, 2], 9)
        X = np.random.default_rng(1).normal(size=(4, 2))
        assert np.array_equal(nn.forward(p, X), nn.forward(p, X))


class TestLoss:
    def test_uniform_logits_two_classes(self):
        p = nn.ModelParams((2, 2), np.zeros(6))
        b = nn.Batch(np.ones((3, 2)), np.array([0, 1, 1]))
        assert nn.loss_eval(p, b, "classification") == pytest.approx(np.log(2), abs=1e-15)

    def test_exact_regression_fit(self):
        p = nn.ModelParams((1, 1), np.array([2.0, 1.0]))
        X = np.array([[0.0], [1.0], [3.0]])
        assert nn.loss_eval(p, nn.Batch(X, 2 * X[:, 0] + 1), "regression") == 0.0

    def test_confident_three_class(self):
        # -ln softmax([10, 0, 0])_0 = ln(1 + 2 e^-10)
        p = nn.ModelParams((1, 3), np.array([0.0, 0.0, 0.0, 10.0, 0.0, 0.0]))
        loss = nn.loss_eval(p, nn.Batch(np.zeros((1, 1)), np.array([0])), "classification")
        assert loss == pytest.approx(9.08e-5, rel=1e-3)
        assert loss == pytest.approx(np.log1p(2 * np.exp(-10.0)), rel=1e-12)

    def test_label_out_of_range(self):
        p = nn.mlp_init([2, 3], 0)
        with pytest.raises(DataError):
            nn.loss_eval(p, nn.Batch(np.zeros((1, 2)), np.array([3])), "classification")

    def test_unknown_task(self):
        p = nn.mlp_init([2, 1], 0)
        with pytest.raises(ConfigError):
            nn.loss_eval(p, nn.Batch(np.zeros((1, 2)), np.array([0.0])), "ranking")

    def test_non_negative(self):
        rng = np.random.default_rng(3)
        for task in ("classification", "regression"):
            p, b = random_problem(rng, task)
            assert np.all(nn.per_example_losses(p, b, task) >= 0)


class TestGradients:
    @pytest.mark.parametrize("task", ["classification", "regression"])
    def test_matches_finite_differences(self, task):
        rng = np.random.default_rng(11)
        for _ in range(5):
            p, b = random_problem(rng, task)
            assert rel_err(nn.grad_mean(p, b, task), fd_grad(p, b, task)) < 1e-4

    def test_relu_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        p = nn.mlp_init([3, 6, 2], 8)
        b = nn.Batch(rng.normal(size=(6, 3)), rng.integers(0, 2, 6))
        assert rel_err(nn.grad_mean(p, b, "classification"), fd_grad(p, b, "classification")) < 1e-4

    @pytest.mark.parametrize("task", ["classification", "regression"])
    def test_per_example_mean(self, task):
        p, b = random_problem(np.random.default_rng(5), task)
        G = nn.grads_per_example(p, b, task)
        assert G.shape == (len(b), p.size)
        g = nn.grad_mean(p, b, task)
        assert np.linalg.norm(G.mean(axis=0) - g) <= 1e-12 * np.linalg.norm(g)

    def test_stationary_point(self):
        # exact-fit linear regression
        p = nn.ModelParams((2, 1), np.array([1.5, -0.5, 0.25]))
        X = np.random.default_rng(0).normal(size=(9, 2))
        y = X @ np.array([1.5, -0.5]) + 0.25
        assert np.all(nn.grad_mean(p, nn.Batch(X, y), "regression") == 0)

    def test_weighted_gradient_is_weighted_mean(self):
        rng = np.random.default_rng(6)
        p, b = random_problem(rng, "classification")
        w = rng.uniform(0.1, 2.0, len(b))
        _, g = nn.weighted_loss_and_grad(p, b, "classification", w)
        G = nn.grads_per_example(p, b, "classification")
        assert rel_err(g, (w[:, None] * G).mean(axis=0)) < 1e-12

    def test_per_example_dot(self):
        rng = np.random.default_rng(7)
        p, b = random_problem(rng, "classification")
        v = rng.normal(size=p.size)
        s = nn.per_example_dot(p, b, "classification", v)
        assert np.allclose(s, nn.grads_per_example(p, b, "classification") @ v, rtol=1e-12, atol=1e-14)


class TestHvp:
    def quadratic(self, rng, d=6):
        # squared-error linear regression without hidden layers: H = 2 X^T X / n over (W, b)
        X = rng.normal(size=(20, d))
        y = rng.normal(size=20)
        p = nn.ModelParams((d, 1), rng.normal(size=d + 1))
        Xt = np.hstack([X, np.ones((20, 1))])
        return p, nn.Batch(X, y), 2.0 * Xt.T @ Xt / 20

    def test_quadratic_oracle(self):
        rng = np.random.default_rng(0)
        p, b, H = self.quadratic(rng)
        v = rng.normal(size=p.size)
        hv = nn.hvp_fd(p, b, v, task="regression")
        assert rel_err(hv, H @ v) < 1e-6

    def test_half_quadratic_form(self):
        rng = np.random.default_rng(1)
        M = rng.normal(size=(5, 5))
        A = M @ M.T + np.eye(5)
        v = rng.normal(size=5)
        hv = nn.hvp_fd_fn(lambda th: A @ th, rng.normal(size=5), v)
        assert rel_err(hv, A @ v) < 1e-6

    def test_zero_vector(self):
        p, b, _ = self.quadratic(np.random.default_rng(2))
        assert np.all(nn.hvp_fd(p, b, np.zeros(p.size), task="regression") == 0)

    def test_linearity(self):
        rng = np.random.default_rng(3)
        p, b = random_problem(rng, "classification")
        v = rng.normal(size=p.size)
        h1 = nn.hvp_fd(p, b, v, task="classification")
        h2 = nn.hvp_fd(p, b, 2 * v, task="classification")
        assert rel_err(h2, 2 * h1) < 1e-5

    def test_errors(self):
        p, b, _ = self.quadratic(np.random.default_rng(4))
        with pytest.raises(ConfigError):
            nn.hvp_fd(p, b, np.zeros(3), task="regression")
        with pytest.raises(ConfigError):
            nn.hvp_fd_fn(lambda t: t, np.zeros(0), np.zeros(0))
        with pytest.raises(ConfigError):
            nn.hvp_fd(p, b, np.ones(p.size), step=0.0, task="regression")


class TestSgd:
    def test_zero_gradient(self):
        p = nn.mlp_init([2, 2], 0)
        assert nn.sgd_step(p, np.zeros(p.size), 0.1) == p

    def test_simple_update(self):
        p = nn.ModelParams((1, 1), np.array([1.0, 1.0]))
        assert np.array_equal(nn.sgd_step(p, np.array([1.0, -1.0]), 1.0).flat, [0.0, 2.0])

    def test_non_finite_gradient(self):
        p = nn.mlp_init([2, 2], 0)
        g = np.zeros(p.size)
        g[3] = np.nan
        with pytest.raises(TrainingError, match="first index 3"):
            nn.sgd_step(p, g, 0.1)

    def test_input_not_mutated(self):
        p = nn.mlp_init([2, 3], 0)
        before = p.flat.copy()
        nn.sgd_step(p, np.ones(p.size), 0.5)
        assert np.array_equal(p.flat, before)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(1e-3, 1.0), st.integers(0, 1000))
    def test_two_half_steps(self, lr, seed):
        rng = np.random.default_rng(seed)
        p = nn.ModelParams((2, 1), rng.normal(size=3))
        g = rng.normal(size=3)
        two = nn.sgd_step(nn.sgd_step(p, g, lr / 2), g, lr / 2)
        assert np.allclose(two.flat, nn.sgd_step(p, g, lr).flat, rtol=0, atol=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["classification", "regression"]))
def test_per_example_gradients_average_property(seed, task):
    p, b = random_problem(np.random.default_rng(seed), task, sizes=(2, 4, 3))
    g = nn.grad_mean(p, b, task)
    G = nn.grads_per_example(p, b, task)
    assert np.linalg.norm(G.mean(axis=0) - g) <= 1e-12 * max(np.linalg.norm(g), 1e-300) + 1e-300
