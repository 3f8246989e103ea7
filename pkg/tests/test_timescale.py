import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from driftweight import nn
from driftweight.errors import ConfigError, DataError
from driftweight.scorer import ScorerParams, scorer_init, softplus_inv
from driftweight.timescale import (AgeNormalizer, ImportanceModel, TimescaleBasis, Variant,
                                   WEIGHT_FLOOR, basis_eval, batch_weights, importance_weight,
                                   make_basis, weighted_risk, weighted_risk_grad)


def constant_scorer(dim, values):
    """Scorer whose softplus output is ``values`` for every input."""
    values = np.atleast_1d(np.asarray(values, dtype=float))
    s = scorer_init(dim, values.size, (4,), seed=0)
    flat = s.flat.copy()
    flat[s.output_bias_mask()] = softplus_inv(values)
    return s.with_flat(flat)


class TestBasis:
    def test_small(self):
        assert np.array_equal(make_basis(2, 3).rates, [2.0, 4.0, 8.0])

    def test_default_max_rate(self):
        b = make_basis(2, 16)
        assert b.rates[-1] == 65536.0
        assert TimescaleBasis().rates[-1] == 65536.0

    def test_alternative_spacing(self):
        r = make_basis(4, 8).rates
        assert np.array_equal(r, 2.0 ** (2 * np.arange(1, 9)))

    def test_geometric(self):
        r = make_basis(3.0, 6).rates
        assert np.all(np.diff(r) > 0)
        assert np.allclose(r[1:], 3.0 * r[:-1], rtol=0)

    @pytest.mark.parametrize("a0,K", [(1.0, 4), (0.5, 4), (2.0, 0), (2.0, 1.5)])
    def test_invalid(self, a0, K):
        with pytest.raises(ConfigError):
            make_basis(a0, K) if float(K).is_integer() else TimescaleBasis(a0, K)

    def test_eval_age_zero(self):
        assert np.array_equal(basis_eval(make_basis(2, 5), 0.0), np.ones(5))

    def test_eval_age_one(self):
        v = basis_eval(make_basis(2, 2), 1.0)
        assert np.allclose(v, [np.exp(-2), np.exp(-4)], rtol=1e-15)
        assert np.allclose(v, [0.1353, 0.0183], atol=5e-5)

    def test_eval_infinite_age(self):
        assert np.array_equal(basis_eval(make_basis(2, 4), np.inf), np.zeros(4))

    def test_underflow_clamps_to_zero(self):
        v = basis_eval(make_basis(2, 16), 1.0)
        assert v[-1] == 0.0 and np.all(np.isfinite(v))

    def test_vectorised_shape(self):
        assert basis_eval(make_basis(2, 3), np.array([0.0, 0.5, 1.0])).shape == (3, 3)

    def test_negative_age(self):
        with pytest.raises(DataError):
            basis_eval(make_basis(2, 3), -0.1)


class TestAgeNormalizer:
    def test_unit_interval(self):
        ts = np.array([10.0, 12.0, 15.0, 20.0])
        norm = AgeNormalizer.fit(ts)
        assert np.allclose(norm.ages(ts), [1.0, 0.8, 0.5, 0.0])

    def test_unnormalized(self):
        ts = np.array([1.0, 4.0])
        assert np.array_equal(AgeNormalizer.fit(ts, normalize=False).ages(ts), [3.0, 0.0])

    def test_constant_timestamps(self):
        norm = AgeNormalizer.fit(np.full(5, 3.0))
        assert np.array_equal(norm.ages(np.full(5, 3.0)), np.zeros(5))

    def test_invalid_window(self):
        with pytest.raises(ConfigError):
            AgeNormalizer(1.0, 0.0)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=30))
    def test_training_ages_in_unit_interval(self, ts):
        ts = np.array(ts)
        ages = AgeNormalizer.fit(ts).ages(ts)
        assert np.all(ages >= 0) and np.all(ages <= 1 + 1e-12)


class TestImportanceWeight:
    def test_uniform(self):
        m = ImportanceModel.uniform()
        assert np.array_equal(importance_weight(m, np.zeros((3, 2)), np.array([0, 0.5, 1])), np.ones(3))

    def test_linear_and_floor(self):
        m = ImportanceModel.linear(2.0)
        w = importance_weight(m, None, np.array([0.0, 0.25, 0.75]))
        assert np.allclose(w, [1.0, 0.5, WEIGHT_FLOOR])

    def test_single_exp(self):
        m = ImportanceModel.single_exp(1.5)
        assert importance_weight(m, None, 0.4) == pytest.approx(np.exp(-0.6), rel=1e-15)

    def test_one_hot_mixture_is_single_exp(self):
        basis = make_basis(2, 5)
        ages = np.linspace(0, 1, 41)
        for k in range(basis.K):
            z = np.zeros(basis.K)
            z[k] = 1.0
            mix = importance_weight(ImportanceModel.mix_exp(z, basis), None, ages)
            single = importance_weight(ImportanceModel.single_exp(basis.rates[k]), None, ages)
            assert np.array_equal(mix, single)

    def test_constant_scorer_is_mixture(self):
        basis = make_basis(2, 4)
        zbar = np.array([0.3, 0.1, 0.5, 0.2])
        inst = ImportanceModel.inst_mix_exp(constant_scorer(3, zbar), basis)
        mix = ImportanceModel.mix_exp(zbar, basis)
        rng = np.random.default_rng(0)
        X, ages = rng.normal(size=(25, 3)), rng.uniform(0, 1, 25)
        assert np.allclose(importance_weight(inst, X, ages), importance_weight(mix, X, ages), rtol=1e-14)

    def test_inst_time_uses_age(self):
        s = scorer_init(3, 1, (8,), seed=1)
        flat = s.flat.copy()
        flat[:] = np.random.default_rng(2).normal(size=flat.size)
        m = ImportanceModel.inst(s.with_flat(flat), time_input=True)
        X = np.ones((2, 2))
        w = importance_weight(m, X, np.array([0.0, 1.0]))
        assert w[0] != w[1]

    def test_scorer_dimension_mismatch(self):
        m = ImportanceModel.inst(scorer_init(3, 1, (4,), 0))
        with pytest.raises(DataError):
            importance_weight(m, np.zeros((2, 5)), np.zeros(2))

    def test_invalid_models(self):
        basis = make_basis(2, 3)
        with pytest.raises(ConfigError):
            ImportanceModel.mix_exp(np.zeros(3), basis)
        with pytest.raises(ConfigError):
            ImportanceModel.mix_exp(np.array([1.0, -1.0, 0.0]), basis)
        with pytest.raises(ConfigError):
            ImportanceModel.inst_mix_exp(scorer_init(2, 2, (4,), 0), basis)
        with pytest.raises(ConfigError):
            ImportanceModel(Variant.MIX_EXP, z=np.ones(3))
        with pytest.raises(ConfigError):
            ImportanceModel.single_exp(-1.0)

    def test_variant_aliases(self):
        assert Variant.parse("ERM") is Variant.UNIFORM
        assert Variant.parse("inst_mix_exp") is Variant.INST_MIX_EXP
        with pytest.raises(ConfigError):
            Variant.parse("nope")

    def test_mixexp_phi_round_trip(self):
        m = ImportanceModel.mix_exp(np.array([0.2, 1.0, 3.0]), make_basis(2, 3))
        back = m.with_phi(m.phi)
        assert np.allclose(back.z, m.z, rtol=1e-12)


def _models(basis, dim):
    rng = np.random.default_rng(9)
    s = scorer_init(dim, basis.K, (6,), seed=4)
    scorer = s.with_flat(rng.normal(size=s.flat.size))
    return [ImportanceModel.uniform(), ImportanceModel.linear(0.7), ImportanceModel.single_exp(3.0),
            ImportanceModel.mix_exp(rng.uniform(0, 1, basis.K), basis),
            ImportanceModel.inst_mix_exp(scorer, basis)]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=20), st.integers(0, 100))
def test_weights_non_increasing_in_age(ages, seed):
    basis = make_basis(2, 6)
    x = np.random.default_rng(seed).normal(size=3)
    ages = np.sort(np.array(ages))
    X = np.tile(x, (len(ages), 1))
    for m in _models(basis, 3):
        w = importance_weight(m, X, ages)
        assert np.all(np.diff(w) <= 1e-15 * np.maximum(w[:-1], 1))
        assert np.all(w >= WEIGHT_FLOOR)


class TestWeightedRisk:
    def setup_method(self):
        rng = np.random.default_rng(1)
        self.params = nn.mlp_init([3, 5, 2], 2)
        self.batch = nn.Batch(rng.normal(size=(12, 3)), rng.integers(0, 2, 12), rng.uniform(0, 1, 12))

    def test_uniform_is_erm(self):
        r = weighted_risk(self.params, ImportanceModel.uniform(), self.batch, "classification")
        assert r == nn.loss_eval(self.params, self.batch, "classification")

    def test_half_weights(self):
        m = ImportanceModel.inst(constant_scorer(3, 0.5))
        r = weighted_risk(self.params, m, self.batch, "classification")
        assert r == pytest.approx(0.5 * nn.loss_eval(self.params, self.batch, "classification"), rel=1e-12)

    def test_hand_example(self):
        # two instances, unit losses, ages 0 and 1, lambda = ln 2
        p = nn.ModelParams((1, 1), np.array([0.0, 1.0]))
        b = nn.Batch(np.zeros((2, 1)), np.zeros(2), np.array([0.0, 1.0]))
        r = weighted_risk(p, ImportanceModel.single_exp(np.log(2)), b, "regression")
        assert r == pytest.approx(0.75, rel=1e-12)

    def test_linear_in_weights(self):
        m1 = ImportanceModel.mix_exp(np.array([0.3, 0.7]), make_basis(2, 2))
        m2 = ImportanceModel.mix_exp(np.array([0.6, 1.4]), make_basis(2, 2))
        r1 = weighted_risk(self.params, m1, self.batch, "classification")
        r2 = weighted_risk(self.params, m2, self.batch, "classification")
        assert r2 == pytest.approx(2 * r1, rel=1e-12)

    def test_gradient_is_weighted_mean(self):
        m = ImportanceModel.single_exp(2.0)
        _, g = weighted_risk_grad(self.params, m, self.batch, "classification")
        G = nn.grads_per_example(self.params, self.batch, "classification")
        w = np.exp(-2.0 * self.batch.ages)
        want = (w[:, None] * G).mean(axis=0)
        assert np.linalg.norm(g - want) <= 1e-12 * np.linalg.norm(want)

    def test_renormalized_mean_one(self):
        w = batch_weights(ImportanceModel.single_exp(4.0), self.batch, renormalize=True)
        assert w.mean() == pytest.approx(1.0, rel=1e-12)

    def test_needs_ages(self):
        b = nn.Batch(np.zeros((2, 3)), np.zeros(2, dtype=int))
        with pytest.raises(DataError):
            weighted_risk(self.params, ImportanceModel.single_exp(1.0), b, "classification")


def test_scorer_params_type():
    assert isinstance(constant_scorer(2, [0.5]), ScorerParams)
