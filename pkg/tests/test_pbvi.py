import numpy as np
import pytest

from conftest import line_model, random_gm, random_spd
from oracles import gaussian_pdf, integrate_1d
from vbpomdp import scenarios
from vbpomdp.condense import CondenseConfig
from vbpomdp.gm import GaussianComponent, GaussianMixture, MixtureKind, inner_product
from vbpomdp.model import Action, CPOMDPModel
from vbpomdp.pbvi import (
    AlphaFunction,
    PolicySet,
    SolverConfig,
    alpha_values,
    backup,
    generate_beliefs,
    initial_policy,
    intermediate_alphas,
    lti_transform,
    policy_query,
    solve,
)
from vbpomdp.softmax import SoftmaxModel

NO_CONDENSE = SolverConfig(alpha_condense=CondenseConfig(10 ** 6, 1))


@pytest.fixture(scope="module")
def colinear():
    return scenarios.colinear()


def _belief(means, var=0.3):
    means = np.atleast_2d(np.asarray(means, float))
    n = means.shape[1]
    return GaussianMixture(np.full(len(means), 1.0 / len(means)), means, [var * np.eye(n)] * len(means),
                           MixtureKind.BELIEF)


class TestLTI:
    def test_identity(self, rng):
        c = GaussianComponent(0.7, rng.normal(size=2), random_spd(rng, 2))
        out = lti_transform(c, np.eye(2))
        assert out.weight == c.weight
        np.testing.assert_allclose(out.mean, c.mean, atol=1e-15)
        np.testing.assert_allclose(out.cov, c.cov, atol=1e-15)

    def test_unit_determinant_shear(self, rng):
        F = np.array([[1.0, 1.0], [0.0, 1.0]])
        c = GaussianComponent(0.7, [1.0, 2.0], random_spd(rng, 2))
        out = lti_transform(c, F)
        assert out.weight == pytest.approx(0.7, rel=1e-14)
        np.testing.assert_allclose(out.mean, [-1.0, 2.0], atol=1e-14)

    def test_pointwise(self, rng):
        for _ in range(5):
            F = rng.normal(size=(2, 2)) + 2 * np.eye(2)
            c = GaussianComponent(rng.uniform(-2, 2), rng.normal(size=2), random_spd(rng, 2))
            out = lti_transform(c, F)
            s = rng.normal(0, 2, (100, 2))
            expected = c.weight * gaussian_pdf(s @ F.T, c.mean, c.cov)
            got = out.weight * gaussian_pdf(s, out.mean, out.cov)
            np.testing.assert_allclose(got, expected, rtol=1e-9, atol=1e-15)

    def test_singular(self):
        with pytest.raises(np.linalg.LinAlgError):
            lti_transform(GaussianComponent(1.0, [0.0, 0.0], np.eye(2)), np.array([[1.0, 2.0], [0.5, 1.0]]))


class TestIntermediateAlphas:
    def test_uniform_softmax_halves(self, rng):
        sensor = SoftmaxModel(np.zeros((2, 2)), np.zeros(2))
        alpha = random_gm(rng, 2, 3)
        m = CPOMDPModel([Action("a", [0.0, 0.0], 1e-10 * np.eye(2))], {"a": alpha}, sensor)
        table = intermediate_alphas(PolicySet((AlphaFunction(alpha, "a"),), 1), m, NO_CONDENSE)
        for label in m.labels:
            g = table[(0, "a", label)]
            np.testing.assert_allclose(g.weights, 0.5 * alpha.weights, atol=1e-6)
            np.testing.assert_allclose(g.means, alpha.means, atol=1e-6)
            np.testing.assert_allclose(g.covs, alpha.covs, atol=1e-6)

    def test_matches_quadrature_1d(self):
        sensor = SoftmaxModel([[0.5], [-0.5]], [0.0, 0.0], {"hit": [0], "miss": [1]})
        alpha = GaussianMixture([2.0, 0.5], [[1.0], [-1.5]], [[[0.8]], [[1.5]]])
        shift, noise = 0.6, 0.4
        m = line_model(sensor, displacement=shift, noise=noise, reward=alpha)
        table = intermediate_alphas(PolicySet((AlphaFunction(alpha, "go"),), 1), m, NO_CONDENSE)
        probe = np.linspace(-3, 3, 20)
        for label in m.labels:
            c = m.observation.labels[label][0]

            def oracle(s):
                f = lambda x: (alpha.evaluate(x[:, None]) * sensor.class_probs(x[:, None])[:, c]
                               * gaussian_pdf(x[:, None], [s + shift], [[noise]]))
                return integrate_1d(f, -20, 20, panels=200)

            expected = np.array([oracle(s) for s in probe])
            got = table[(0, "go", label)].evaluate(probe[:, None])
            # a positive alpha times a lower bound stays below the exact integral
            assert np.all(got <= expected * (1 + 1e-9))
            # the relative bound gap grows in the tails; check 5% where the entry carries its mass
            core = expected >= 0.2 * expected.max()
            np.testing.assert_allclose(got[core], expected[core], rtol=0.05)

    def test_softmax_growth_per_label(self, colinear):
        alpha = colinear.model.rewards["stay"]
        table = intermediate_alphas(PolicySet((AlphaFunction(alpha, "stay"),), 1), colinear.model,
                                    condense_entries=False)
        sm = colinear.model.observation
        for label, classes in sm.labels.items():
            for a in colinear.model.action_names:
                assert table[(0, a, label)].size == alpha.size * len(classes)

    def test_gm_growth(self, colinear):
        m = colinear.gm_model
        alpha = m.rewards["stay"]
        table = intermediate_alphas(PolicySet((AlphaFunction(alpha, "stay"),), 1), m, condense_entries=False)
        for label, lik in m.observation.items():
            assert table[(0, "left", label)].size == alpha.size * lik.size

    def test_condensed_to_budget(self, colinear):
        cfg = SolverConfig(alpha_condense=CondenseConfig(15, 3))
        table = intermediate_alphas(initial_policy(colinear.model), colinear.model, cfg)
        assert all(g.size <= 15 for g in table.values())

    def test_skip_lti_requires_identity(self):
        F = np.array([[1.0, 1.0], [0.0, 1.0]])
        m = line_model(SoftmaxModel(np.zeros((2, 2)), np.zeros(2)), transition=F)
        with pytest.raises(ValueError):
            intermediate_alphas(initial_policy(m), m, SolverConfig(skip_lti=True))

    def test_empty_policy(self, colinear):
        with pytest.raises(ValueError):
            intermediate_alphas(PolicySet((), 0), colinear.model)


class TestBackup:
    def test_tiny_discount_returns_best_reward(self, colinear):
        m = colinear.model.replace(discount=1e-12)
        b = _belief([[1.0, 3.0]])
        table = intermediate_alphas(initial_policy(m), m)
        alpha = backup(b, table, m, condense_result=False)
        vals = {a: inner_product(m.rewards[a], b) for a in m.action_names}
        assert alpha.action == max(vals, key=vals.get)
        r = m.rewards[alpha.action]
        np.testing.assert_array_equal(alpha.gm.weights[:r.size], r.weights)

    def test_single_alpha_single_label(self):
        reward = GaussianMixture([1.0], [[0.0]], [[[1.0]]])
        m = line_model(SoftmaxModel(np.zeros((1, 1)), np.zeros(1)), displacement=0.5, noise=0.2, reward=reward)
        pol = initial_policy(m)
        table = intermediate_alphas(pol, m, NO_CONDENSE)
        alpha = backup(_belief([[0.0]]), table, m, condense_result=False)
        assert alpha.action == "go"
        assert alpha.gm.size == 2
        np.testing.assert_allclose(alpha.gm.weights[1], m.discount * table[(0, "go", "0")].weights[0])

    def test_colinear_stay_at_reward_mode(self, colinear):
        m = colinear.model
        b = _belief([[2.5, 2.5]], var=0.01)
        pol = solve(m, [b], 3)
        table = intermediate_alphas(pol, m)
        alpha = backup(b, table, m, condense_result=False)
        # brute force: every action with every choice of intermediate per label
        best = {}
        for a in m.action_names:
            total = inner_product(m.rewards[a], b)
            for label in m.labels:
                total += m.discount * max(inner_product(table[(i, a, label)], b) for i in range(len(pol)))
            best[a] = total
        assert max(best, key=best.get) == "stay"
        assert alpha.action == "stay"

    def test_empty_table(self, colinear):
        with pytest.raises(ValueError):
            backup(_belief([[1.0, 1.0]]), {}, colinear.model)


class TestSolve:
    def test_one_round_one_belief(self, colinear):
        pol = solve(colinear.model, [colinear.initial_belief], 1)
        assert len(pol) == 1
        assert pol.horizon == 1

    def test_values_nondecreasing(self, colinear):
        beliefs = generate_beliefs(colinear.model, colinear.initial_belief, 10, 10, seed=4)
        history = []
        solve(colinear.model, beliefs, 10, on_round=lambda r, p, v, ms: history.append(v))
        h = np.array(history)
        assert np.all(np.diff(h, axis=0) >= -1e-6)

    def test_outputs_valid(self, colinear):
        beliefs = generate_beliefs(colinear.model, colinear.initial_belief, 5, 5, seed=1)
        pol = solve(colinear.model, beliefs, 3)
        for a in pol.alphas:
            assert np.all(np.isfinite(a.gm.weights))
            assert np.all(np.linalg.eigvalsh(a.gm.covs) > 0)
            assert a.gm.size <= 60

    def test_identity_transform_matches_skip(self, colinear):
        beliefs = generate_beliefs(colinear.model, colinear.initial_belief, 4, 5, seed=2)
        m = colinear.model.replace(transition=np.eye(2))
        a = solve(m, beliefs, 2)
        b = solve(m, beliefs, 2, SolverConfig(skip_lti=True))
        assert len(a) == len(b)
        for x, y in zip(a.alphas, b.alphas):
            assert x.action == y.action
            np.testing.assert_allclose(x.gm.weights, y.gm.weights, rtol=0, atol=1e-12)
            np.testing.assert_allclose(x.gm.means, y.gm.means, rtol=0, atol=1e-12)
            np.testing.assert_allclose(x.gm.covs, y.gm.covs, rtol=0, atol=1e-12)

    def test_rejects_bad_arguments(self, colinear):
        with pytest.raises(ValueError):
            solve(colinear.model, [colinear.initial_belief], 0)
        with pytest.raises(ValueError):
            solve(colinear.model, [], 1)


class TestPolicyQuery:
    def _policy(self, rng):
        return PolicySet(tuple(AlphaFunction(random_gm(rng, 2, 3, signed=True), a) for a in "abcd"), 2)

    def test_singleton(self, rng):
        pol = PolicySet((AlphaFunction(random_gm(rng, 2, 2), "only"),), 1)
        for _ in range(5):
            assert policy_query(pol, random_gm(rng, 2, 3, MixtureKind.BELIEF))[0] == "only"

    def test_brute_force_and_scaling(self, rng):
        pol = self._policy(rng)
        for _ in range(20):
            b = random_gm(rng, 2, 3, MixtureKind.BELIEF)
            vals = [inner_product(a.gm, b) for a in pol.alphas]
            action, value = policy_query(pol, b)
            assert action == pol.alphas[int(np.argmax(vals))].action
            assert value == pytest.approx(max(vals), rel=1e-12)
            a2, v2 = policy_query(pol, b.with_weights(3.0 * b.weights))
            assert a2 == action
            assert v2 == pytest.approx(3.0 * value, rel=1e-12)

    def test_tie_lowest_index(self, rng):
        g = random_gm(rng, 2, 2)
        pol = PolicySet((AlphaFunction(g, "first"), AlphaFunction(g, "second")), 1)
        assert policy_query(pol, random_gm(rng, 2, 2, MixtureKind.BELIEF))[0] == "first"

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValueError):
            policy_query(self._policy(rng), random_gm(rng, 1, 2, MixtureKind.BELIEF))

    def test_alpha_values_matrix(self, rng):
        mixtures = [random_gm(rng, 2, k + 1, signed=True) for k in range(4)]
        beliefs = [random_gm(rng, 2, 3, MixtureKind.BELIEF) for _ in range(3)]
        expected = np.array([[inner_product(m, b) for b in beliefs] for m in mixtures])
        np.testing.assert_allclose(alpha_values(mixtures, beliefs), expected, rtol=1e-12)

    def test_save_load(self, rng, tmp_path):
        pol = self._policy(rng)
        pol.save(tmp_path / "p.json")
        back = PolicySet.load(tmp_path / "p.json")
        assert back.horizon == pol.horizon
        for _ in range(20):
            b = random_gm(rng, 2, 3, MixtureKind.BELIEF)
            assert policy_query(back, b) == policy_query(pol, b)


class TestGenerateBeliefs:
    def test_depth_zero(self, colinear):
        out = generate_beliefs(colinear.model, colinear.initial_belief, 1, 0)
        assert out == [colinear.initial_belief]

    def test_normalized_and_deterministic(self, colinear):
        a = generate_beliefs(colinear.model, colinear.initial_belief, 6, 6, seed=11)
        b = generate_beliefs(colinear.model, colinear.initial_belief, 6, 6, seed=11)
        for x, y in zip(a, b):
            assert x.kind is MixtureKind.BELIEF
            assert x.total_weight() == pytest.approx(1.0, abs=1e-9)
            np.testing.assert_array_equal(x.weights, y.weights)
            np.testing.assert_array_equal(x.means, y.means)

    def test_count_must_be_positive(self, colinear):
        with pytest.raises(ValueError):
            generate_beliefs(colinear.model, colinear.initial_belief, 0, 3)
