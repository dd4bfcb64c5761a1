from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from refuel import serialization as ser
from refuel.envgen import FamilySpec, ModelClass, generate_family, generate_model_classes
from refuel.errors import InputError, MLEError, NumericalError, SchemaError
from refuel.evaluation import (brute_force_mle_check, elliptical_check, pcv_monte_carlo, restrict_tasks,
                               upstream_elliptical)
from refuel.mdp import Policy, RewardTable, optimal_dp, tv_table, value_dp
from refuel.upstream import (ExplorationDatasets, HyperParams, ScheduleDims,
                             ScheduleValues, check_termination, collect_iteration, covariance_and_bonus,
                             iteration_rows, joint_log_likelihood, joint_mle, load_learned, pcv, pcv_terms,
                             plan_exploration, plan_with_reward, run_refuel, save_learned, schedule)

from conftest import random_mdp

ACCEPT_DIMS = ScheduleDims(d=2, K=3, T=4, H=4, n_phi=6, n_psi=12)

# high-precision evaluation of the schedule formulas at n = 1, delta = 0.05
GOLDEN_N1 = {
    "lambda_n": 15.120160930043654464,
    "zeta_n": 33.613119767227766327,
    "alpha_tilde_n": 14.892973065913754438,
    "B": 4.3588989435406735522,
}


def collect(family, n_iter, seed=0):
    H, S, K = family.shape
    ds = ExplorationDatasets(family.num_tasks, H, S, K)
    policies = [Policy.uniform(H, S, K)] * family.num_tasks
    for n in range(1, n_iter + 1):
        collect_iteration(family, policies, n, ds, seed)
    return ds


def sched(lam=1.0, alpha=1.0, B=10.0, zeta=0.1, n=1):
    return ScheduleValues(n, lam, zeta, alpha, B)


class TestSchedule:
    def test_golden_values(self):
        values = schedule(1, ACCEPT_DIMS, HyperParams())
        for key, expected in GOLDEN_N1.items():
            assert getattr(values, key) == pytest.approx(expected, rel=1e-13)

    @given(st.integers(1, 10**6))
    def test_monotone_in_n(self, n):
        a, b = schedule(n, ACCEPT_DIMS, HyperParams()), schedule(n + 1, ACCEPT_DIMS, HyperParams())
        assert b.zeta_n < a.zeta_n
        assert b.alpha_tilde_n >= a.alpha_tilde_n
        assert b.lambda_n >= a.lambda_n > 0
        assert b.B == a.B

    def test_zeta_halves_up_to_log(self):
        hp = HyperParams()
        assert schedule(2000, ACCEPT_DIMS, hp).zeta_n < schedule(1000, ACCEPT_DIMS, hp).zeta_n

    def test_large_task_count_does_not_overflow(self):
        dims = ACCEPT_DIMS._replace(T=500, n_psi=10**6)
        assert math.isfinite(schedule(1, dims, HyperParams()).zeta_n)

    def test_multipliers_scale(self):
        base = schedule(7, ACCEPT_DIMS, HyperParams())
        scaled = schedule(7, ACCEPT_DIMS, HyperParams(c_zeta=0.5, c_B=3.0))
        assert scaled.zeta_n == pytest.approx(0.5 * base.zeta_n)
        assert scaled.B == pytest.approx(3 * base.B)

    def test_bad_iteration(self):
        with pytest.raises(InputError):
            schedule(0, ACCEPT_DIMS, HyperParams())

    @pytest.mark.parametrize("field,value", [("delta", 1.0), ("eps_u", 0.0), ("c_alpha", -1.0),
                                             ("max_iterations", 0)])
    def test_hyper_validation(self, field, value):
        with pytest.raises(InputError):
            HyperParams(**{field: value})


class TestCollect:
    def test_cardinality(self, small_family):
        ds = collect(small_family, 7)
        for t, h in itertools.product(range(2), range(3)):
            assert len(ds.triples[t][h]) == 7
            assert ds.triple_counts[t, h].sum() == 7
        for t, h in itertools.product(range(2), range(2)):
            assert len(ds.pairs[t][h]) == 7

    def test_first_step_starts_at_initial_state(self, small_family):
        ds = collect(small_family, 20)
        assert all(s == 0 for t in range(2) for _, s, _, _ in ds.triples[t][0])

    def test_action_frequencies_uniform(self, small_family):
        n = 10_000
        ds = collect(small_family, n, seed=3)
        K = 2
        for t, h in itertools.product(range(2), range(3)):
            freq = np.bincount(ds.triple_array(t, h)[:, 1], minlength=K) / n
            assert np.all(np.abs(freq - 1 / K) <= 3 * math.sqrt((1 / K) * (1 - 1 / K) / n))

    def test_reproducible(self, small_family):
        assert collect(small_family, 5, 1).to_dict() == collect(small_family, 5, 1).to_dict()

    def test_dataset_roundtrip(self, small_family):
        ds = collect(small_family, 4)
        back = ExplorationDatasets.from_dict(ser.parse_document(
            ser.dumps(ser.document("d", ds.to_dict())), "d"))
        assert back.to_dict() == ds.to_dict()
        assert np.array_equal(back.pair_counts, ds.pair_counts)


class TestJointMle:
    def test_singleton_classes(self, small_family):
        classes = ModelClass(small_family.shared_phi[None], small_family.mus[:1], 0, (0, 0))
        ds = collect(small_family, 3)
        assert joint_mle(ds, classes, 1) == (0, (0, 0))

    def test_dominates_truth(self, small_family, small_classes):
        ds = collect(small_family, 30)
        i0, js0 = small_classes.truth_indices
        for h in range(3):
            i, js = joint_mle(ds, small_classes, h)
            assert joint_log_likelihood(ds, small_classes, h, i, js) >= \
                joint_log_likelihood(ds, small_classes, h, i0, js0)

    def test_matches_brute_force(self):
        spec = FamilySpec(4, 2, 3, 2, 2, seed=21, phi_class_size=3, psi_class_size=3)
        family = generate_family(spec)
        classes = generate_model_classes(family, spec, 21)
        ds = collect(family, 500, seed=21)
        assert all(brute_force_mle_check(ds, classes, h) for h in range(3))

    def test_eliminated_candidates_raise(self):
        mu = np.zeros((1, 2, 1))
        mu[0, 0, 0] = 1.0
        classes = ModelClass(np.ones((1, 1, 2, 1, 1)), mu[None], 0, (0,))
        ds = ExplorationDatasets(1, 1, 2, 1)
        ds.add_triple(0, 0, 1, 0, 0, 1)
        with pytest.raises(MLEError):
            joint_mle(ds, classes, 0)

    def test_empty_dataset_rejected(self, small_classes):
        with pytest.raises(InputError):
            joint_mle(ExplorationDatasets(2, 3, 4, 2), small_classes, 0)

    def test_brute_force_size_guard(self, accept_family, accept_classes):
        ds = collect(accept_family, 1)
        with pytest.raises(InputError):
            brute_force_mle_check(ds, accept_classes, 0, limit=10**5)


class TestCovarianceAndBonus:
    def test_no_pairs(self):
        phi = np.random.default_rng(0).dirichlet(np.ones(3), size=(4, 2))
        s = sched(lam=2.0, alpha=1.5, B=0.9)
        U, bonus = covariance_and_bonus(phi, [], s)
        assert np.array_equal(U, 2.0 * np.eye(3))
        expected = np.minimum(1.5 * np.linalg.norm(phi, axis=-1) / math.sqrt(2.0), 0.9)
        assert np.allclose(bonus, expected, atol=1e-14)

    def test_bonus_capped_and_bounded(self):
        rng = np.random.default_rng(1)
        phi = rng.dirichlet(np.ones(2), size=(3, 2))
        pairs = [(int(rng.integers(3)), int(rng.integers(2))) for _ in range(10)]
        U, bonus = covariance_and_bonus(phi, pairs, sched(lam=0.5, alpha=50.0, B=2.0))
        assert bonus.max() <= 2.0 and bonus.min() >= 0.0
        assert np.linalg.eigvalsh(U).min() >= 0.5 - 1e-12

    def test_quadratic_form_matches_independent_solve(self):
        rng = np.random.default_rng(2)
        phi = rng.dirichlet(np.ones(3), size=(5, 2))
        pairs = [(int(rng.integers(5)), int(rng.integers(2))) for _ in range(40)]
        U, bonus = covariance_and_bonus(phi, pairs, sched(lam=1.3, alpha=1.0, B=1e9))
        manual = 1.3 * np.eye(3) + sum(np.outer(phi[s, a], phi[s, a]) for s, a in pairs)
        assert np.allclose(U, manual, atol=1e-12)
        for s, a in itertools.product(range(5), range(2)):
            quad = phi[s, a] @ np.linalg.solve(manual, phi[s, a])
            assert bonus[s, a] ** 2 == pytest.approx(quad, abs=1e-10)
            assert quad <= phi[s, a] @ phi[s, a] / 1.3 + 1e-12

    def test_non_finite_rejected(self):
        phi = np.full((2, 2, 2), np.nan)
        with pytest.raises(NumericalError):
            covariance_and_bonus(phi, [(0, 0)], sched())


class TestPcv:
    def setup_method(self):
        rng = np.random.default_rng(3)
        self.models = [random_mdp(rng, H=3, S=4, K=2, d=2) for _ in range(3)]
        self.bonuses = rng.random((3, 2, 4, 2))
        self.policies = [Policy.random(3, 4, 2, 3, t) for t in range(3)]

    def test_single_task_is_sum(self):
        x = pcv_terms(self.models[:1], self.bonuses[:1], self.policies[:1])
        assert pcv(self.models[:1], self.bonuses[:1], self.policies[:1]) == pytest.approx(x.sum())

    def test_constant_bonus(self):
        b = np.full((3, 2, 4, 2), 0.3)
        assert pcv(self.models, b, self.policies) == pytest.approx(2 * math.sqrt(3) * 0.3)

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            pcv(self.models, self.bonuses[:2], self.policies)

    def test_monte_carlo_agreement(self):
        exact = pcv(self.models, self.bonuses, self.policies)
        est, se = pcv_monte_carlo(self.models, self.bonuses, self.policies, 100_000, 3)
        assert abs(est - exact) <= 3 * se


def _all_deterministic(H, S, K):
    for combo in itertools.product(range(K), repeat=H * S):
        yield Policy.deterministic(np.array(combo).reshape(H, S), K)


class TestPlanner:
    def _instance(self, seed, H=3, S=2, K=2, T=2):
        rng = np.random.default_rng(seed)
        models = [random_mdp(rng, H=H, S=S, K=K, d=2) for _ in range(T)]
        bonuses = rng.random((T, H - 1, S, K))
        return models, bonuses

    def test_history_nondecreasing(self):
        for seed in range(10):
            models, bonuses = self._instance(seed, H=4, S=5, K=3, T=4)
            plan = plan_exploration(models, bonuses, HyperParams())
            assert all(b >= a for a, b in zip(plan.history, plan.history[1:]))
            assert plan.pcv == pytest.approx(pcv(models, bonuses, plan.policies))

    def test_not_worse_than_greedy_start(self):
        models, bonuses = self._instance(4, H=4, S=5, K=3, T=4)
        plan = plan_exploration(models, bonuses, HyperParams())
        greedy = [plan_with_reward(m, RewardTable(np.concatenate([b, np.zeros((1, 5, 3))]) / 4))
                  for m, b in zip(models, bonuses)]
        assert plan.pcv >= pcv(models, bonuses, greedy) - 1e-12

    def test_exhaustive_enumeration(self):
        models, bonuses = self._instance(5)
        policies = list(_all_deterministic(3, 2, 2))
        x = [[pcv_terms([models[t]], bonuses[t:t + 1], [p])[:, 0] for p in policies] for t in range(2)]
        best = max(float(np.sqrt(a**2 + b**2).sum()) for a in x[0] for b in x[1])
        plan = plan_exploration(models, bonuses, HyperParams())
        assert plan.pcv >= best - 1e-9


class TestTermination:
    def test_zero_pcv_small_zeta(self):
        assert check_termination(0.0, sched(zeta=1e-6), 4, 3, 0.15)

    def test_large_pcv(self):
        assert not check_termination(4 * 0.15, sched(zeta=0.0), 4, 3, 0.15)

    def test_boundary(self):
        hp = HyperParams(c_zeta=0.02)
        s = schedule(500, ACCEPT_DIMS, hp)
        assert s.zeta_n == pytest.approx(0.0018416934385628859925, rel=1e-12)
        edge = 0.15133823200716792259
        assert check_termination(edge - 1e-9, s, 4, 3, 0.15)
        assert not check_termination(edge + 1e-9, s, 4, 3, 0.15)


class TestRunRefuel:
    def test_singleton_classes_exact_after_one_iteration(self, small_family, small_classes):
        family, _ = restrict_tasks(small_family, small_classes, [1])
        classes = ModelClass(small_family.shared_phi[None], small_family.mus[1:], 0, (0,))
        learned = run_refuel(family, classes, HyperParams(max_iterations=1), 0)
        assert tv_table(learned.model(0).kernel, family.tasks[0].kernel).max() == 0.0

    def test_deterministic(self, small_family, small_classes):
        hp = HyperParams(max_iterations=15)
        a = run_refuel(small_family, small_classes, hp, 4)
        b = run_refuel(small_family, small_classes, hp, 4)
        assert ser.dumps(a.to_dict()) == ser.dumps(b.to_dict())

    def test_budget_flag_and_cardinality(self, small_family, small_classes):
        learned = run_refuel(small_family, small_classes, HyperParams(max_iterations=12), 4)
        assert not learned.terminated and learned.n_u == 12
        assert len(learned.pcv_history) == 12 and min(learned.pcv_history) >= 0
        for t, h in itertools.product(range(2), range(3)):
            assert len(learned.datasets.triples[t][h]) == 12
        rows = iteration_rows(learned)
        assert [r["n"] for r in rows] == list(range(1, 13))
        assert sum(r["terminated"] for r in rows) == 0

    def test_terminates_with_tuned_constants(self, small_family, small_classes):
        learned = run_refuel(small_family, small_classes,
                             HyperParams(c_zeta=0.02, c_alpha=0.02, max_iterations=2000), 4)
        assert learned.terminated
        assert iteration_rows(learned)[-1]["terminated"] == 1
        assert all(ok for *_, ok in upstream_elliptical(learned))

    def test_persistence(self, tmp_path, small_family, small_classes):
        learned = run_refuel(small_family, small_classes, HyperParams(max_iterations=5), 2)
        save_learned(tmp_path / "l.json", learned)
        back = load_learned(tmp_path / "l.json")
        assert ser.dumps(back.to_dict()) == ser.dumps(learned.to_dict())

    def test_corrupt_learned(self, tmp_path, small_family, small_classes):
        learned = run_refuel(small_family, small_classes, HyperParams(max_iterations=2), 2)
        doc = learned.to_dict()
        doc["phi_hat"] = np.full_like(learned.phi_hat, 2.0)
        ser.save_document(tmp_path / "l.json", "learned", doc)
        with pytest.raises(SchemaError):
            load_learned(tmp_path / "l.json")


class TestPlanWithReward:
    def test_zero_reward(self, small_family):
        policy = plan_with_reward(small_family.tasks[0], RewardTable.zeros(3, 4, 2))
        assert np.all(policy.greedy_actions() == 0)
        assert value_dp(small_family.tasks[0], RewardTable.zeros(3, 4, 2), policy) == 0.0

    def test_true_model_is_optimal(self, small_family):
        mdp, reward = small_family.tasks[1], small_family.rewards[1]
        v_star, _ = optimal_dp(mdp, reward)
        assert value_dp(mdp, reward, plan_with_reward(mdp, reward)) == pytest.approx(v_star, abs=1e-12)


class TestEllipticalCheck:
    def test_empty(self):
        assert elliptical_check(np.zeros((0, 2)), 1.0, 2) == (0.0, 0.0, True)

    def test_harmonic(self):
        lhs, bound, ok = elliptical_check(np.tile([1.0, 0.0], (100, 1)), 1.0, 2)
        assert lhs == pytest.approx(5.1873775176396202608, rel=1e-12)
        assert bound == pytest.approx(15.727302530897303087, rel=1e-12)
        assert ok

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.floats(0.1, 10.0))
    def test_random_unit_traces(self, seed, d, lam):
        x = np.random.default_rng(seed).standard_normal((60, d))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        assert elliptical_check(x, max(lam, 1.0), d)[2]
