import math

import numpy as np
import pytest

from prefdesign.algorithms import (
    ReplayOracle,
    SelectionStrategy,
    SimulationOracle,
    baseline_step,
    greedy_step,
    remaining_uncertainty,
    round_size,
    run_batched,
    run_exp_design,
    run_greedy,
    run_sequential,
    stopping_check,
    top_k,
    warmup_size,
)
from prefdesign.complexity import canonical_instance
from prefdesign.core import ArmSet, InputDomainError, LabeledDataset, TrueModel, fisher_data
from prefdesign.estimator import ConfidenceSpec, gamma_d, width_factor
from prefdesign.harness import make_synthetic

from conftest import random_arms

# four arms given as (z^T theta_hat, width); their RU values are -0.35, 0.1, -0.1, 0.2
FOUR_ARMS = [(0.65, 0.3), (-0.1, 0.2), (0.3, 0.2), (0.1, 0.3)]


class TestOracles:
    def test_simulation_rates(self):
        arms = ArmSet(np.array([[0.0, 1.0], [1.0, 0.0]]))
        oracle = SimulationOracle(arms, TrueModel([1.0, 0.0]), seed=1)
        y = oracle.query(np.repeat([0, 1], 100_000))
        assert y[:100_000].mean() == pytest.approx(0.5, abs=0.005)
        assert y[100_000:].mean() == pytest.approx(1 / (1 + math.exp(-1)), abs=0.005)
        assert oracle.calls == 200_000

    def test_simulation_reproducible(self):
        arms = ArmSet(np.eye(2))
        a = SimulationOracle(arms, TrueModel([1.0, -1.0]), seed=5).query(np.arange(2).repeat(50))
        b = SimulationOracle(arms, TrueModel([1.0, -1.0]), seed=5).query(np.arange(2).repeat(50))
        assert np.array_equal(a, b)

    def test_query_counts(self):
        arms = ArmSet(np.eye(2))
        oracle = SimulationOracle(arms, TrueModel([0.0, 30.0]), seed=0)
        wins = oracle.query_counts([1000, 10])
        assert wins[1] == 10 and 400 < wins[0] < 600
        assert oracle.calls == 1010

    def test_replay_fixed(self):
        oracle = ReplayOracle([1, 0, 1])
        assert oracle.query([1, 1, 1]).tolist() == [0, 0, 0]
        assert oracle.query_counts([2, 2, 0]).tolist() == [2.0, 0.0, 0.0]


class TestRules:
    def test_remaining_uncertainty_four_arms(self):
        got = [float(remaining_uncertainty(1.0, c, w)) for c, w in FOUR_ARMS]
        assert got == pytest.approx([-0.35, 0.1, -0.1, 0.2])

    def test_ru_equals_width_minus_abs_margin(self, rng):
        c = rng.normal(size=1000) * 3
        w = rng.exponential(size=1000)
        np.testing.assert_allclose(remaining_uncertainty(1.0, c, w), w - np.abs(c), atol=1e-12)

    def test_stopping(self):
        assert stopping_check(1.0, 0.3, 0.2)
        assert not stopping_check(1.0, -0.1, 0.2)
        assert not stopping_check(1.0, 0.0, 0.0)

    def test_top_k(self, rng):
        ru = np.array([-0.35, 0.1, -0.1, 0.2])
        assert top_k(ru, 1).tolist() == [3]
        assert top_k(np.array([1.0, 1.0, 0.0]), 1).tolist() == [0]
        scores = rng.normal(size=200)
        np.testing.assert_array_equal(top_k(scores, 50), np.argsort(-scores, kind="stable")[:50])
        assert top_k(np.zeros(4), 2).tolist() == [0, 1]

    def test_greedy_step_matches_manual(self, rng):
        arms = ArmSet(random_arms(rng, 6, 2))
        ds = LabeledDataset(arms, rng.integers(6, size=30), rng.integers(2, size=30))
        theta = rng.normal(size=2)
        h = fisher_data(ds, theta)
        widths = width_factor(0.1, ds.t_eff) * np.sqrt(h.inv_sq_norms(arms.features))
        ru = widths - np.abs(arms.features @ theta)
        assert greedy_step(arms, ds, theta, 0.1) == int(np.argmax(ru))

    def test_greedy_ties_and_empty_history(self):
        arms = ArmSet(np.array([[0.5, 0.5], [0.5, 0.5], [0.1, 0.0]]))
        assert greedy_step(arms, LabeledDataset(arms), np.zeros(2), 0.1) == 0

    def test_baselines(self):
        arms = ArmSet(np.eye(2))
        empty = LabeledDataset(arms)
        assert baseline_step("uncertainty", arms, empty, np.zeros(2), 0.1, 0) == 0
        hist = LabeledDataset.from_records(arms, [(0, 1)] * 5)
        assert baseline_step("apo", arms, hist, np.zeros(2), 0.1, 0) == 1
        assert baseline_step("d-optimal", arms, hist, np.zeros(2), 0.1, 0) == 1
        # with every LCB above the threshold the pick is the seeded uniform fallback
        sel = SelectionStrategy("selective", threshold=-1e9)
        a = [baseline_step(sel, arms, hist, np.zeros(2), 0.1, s) for s in range(20)]
        b = [baseline_step(sel, arms, hist, np.zeros(2), 0.1, s) for s in range(20)]
        assert a == b and set(a) == {0, 1}

    def test_strategy_validation(self):
        with pytest.raises(InputDomainError):
            SelectionStrategy("thompson")
        with pytest.raises(InputDomainError):
            SelectionStrategy("selective", threshold=math.inf)


class TestWarmupAndElimination:
    def test_warmup_size_formula(self):
        gam = 64 * (2 * math.log(6) + math.log(4 / 0.1))
        assert gam == pytest.approx(gamma_d(ConfidenceSpec(0.1, 2, 2)))
        assert warmup_size(2, 2, 0.1, 1.0, 0.25) == math.ceil(3 * 2 / 0.25 * 2 * gam * math.log(160))
        small = warmup_size(2, 2, 0.1, 1.0, 0.125)
        assert abs(small - 2 * warmup_size(2, 2, 0.1, 1.0, 0.25)) <= 1

    def test_round_size_floor(self):
        assert round_size(1e-9, 1, 3, 5, 0.1, 1.0) == 32

    def test_easy_instance_accounting(self):
        arms = ArmSet(np.array([[1.0, 0.0], [0.0, 1.0]]))
        model = TrueModel([1.0, -1.0])
        oracle = SimulationOracle(arms, model, seed=3)
        theta, trace = run_exp_design(arms, 0.1, 1.0, oracle, model.kappa0(arms), label_cap=10**9)
        assert trace.stopped and not trace.budget_exceeded
        rounds = [r for r in trace.rows if r.round >= 1 and not math.isnan(r.eps)]
        assert len(rounds) <= 2
        assert [r.eps for r in rounds] == [2.0 ** (-l + 1) for l in range(1, len(rounds) + 1)]
        q = sum(r.n_round for r in rounds)
        assert trace.labels == trace.warmup_labels + 2 * q == oracle.calls
        assert trace.pulls.sum() == trace.labels
        assert np.all(np.sign(arms.features @ theta) == [1, -1])

    def test_active_set_shrinks(self):
        arms, model = make_synthetic(3, 10, 0.3, seed=2)
        _, trace = run_exp_design(arms, 0.1, 1.0, SimulationOracle(arms, model, 0), model.kappa0(arms), label_cap=10**9)
        sizes = [r.active_set_size for r in trace.rows]
        assert all(b <= a for a, b in zip(sizes, sizes[1:]))

    def test_budget_cap(self):
        arms, model = make_synthetic(3, 10, 0.3, seed=2)
        _, trace = run_exp_design(arms, 0.1, 1.0, SimulationOracle(arms, model, 0), model.kappa0(arms), label_cap=10)
        assert trace.budget_exceeded and not trace.stopped

    def test_reuse_q_labels(self):
        arms = ArmSet(np.eye(2))
        model = TrueModel([1.0, -1.0])
        _, a = run_exp_design(arms, 0.1, 1.0, SimulationOracle(arms, model, 3), 0.19, label_cap=10**9)
        _, b = run_exp_design(arms, 0.1, 1.0, SimulationOracle(arms, model, 3), 0.19, label_cap=10**9,
                              reuse_q_labels=True)
        assert b.labels < a.labels and b.refit_labels == 0


class TestSequentialAndBatched:
    def test_budget_one(self):
        arms = ArmSet(np.eye(2))
        oracle = SimulationOracle(arms, TrueModel([1.0, 1.0]), 0)
        _, trace = run_greedy(arms, 0.1, 1, oracle)
        assert trace.labels == 1 and oracle.calls == 1 and len(trace.rows) == 1

    def test_budget_column(self):
        arms = ArmSet(np.eye(3))
        _, trace = run_greedy(arms, 0.1, 40, SimulationOracle(arms, TrueModel([1.0, 1.0, 0.5]), 0))
        assert trace.column("labels_spent") == list(range(1, 41))

    def test_canonical_pull_profile(self):
        arms, model = canonical_instance(2, 0.24)
        _, trace = run_greedy(arms, 0.1, 200_000, SimulationOracle(arms, model, 0), stop_when_classified=True)
        assert trace.stopped
        assert trace.pulls[1] > trace.pulls[0]

    def test_batch_truncation(self):
        arms = ArmSet(random_arms(np.random.default_rng(0), 80, 3))
        oracle = SimulationOracle(arms, TrueModel([1.0, 0.0, 0.0]), 0)
        _, trace = run_batched("random", arms, 0.1, 50, 120, oracle, 0)
        assert trace.column("labels_spent") == [50, 100, 120]
        assert oracle.calls == 120

    def test_first_batch_is_top_k_of_frozen_scores(self, rng):
        arms = ArmSet(random_arms(rng, 120, 3))
        oracle = SimulationOracle(arms, TrueModel([2.0, -1.0, 0.5]), 0)
        _, trace = run_batched("ours-greedy", arms, 0.1, 50, 50, oracle, 0)
        # with no labels theta_hat = 0 and H is the jitter alone, so the
        # remaining uncertainty is proportional to the arm norm
        expected = np.sort(np.argsort(-np.linalg.norm(arms.features, axis=1), kind="stable")[:50])
        np.testing.assert_array_equal(np.flatnonzero(trace.pulls), expected)
        assert trace.pulls.max() == 1

    @pytest.mark.parametrize("strategy", ["ours-greedy", "random", "uncertainty", "selective", "apo", "d-optimal"])
    def test_batch_one_equals_sequential(self, strategy):
        arms, model = make_synthetic(3, 12, 0.2, seed=4)
        _, seq = run_sequential(strategy, arms, 0.1, 60, SimulationOracle(arms, model, 9), 11, refit_every=1)
        _, bat = run_batched(strategy, arms, 0.1, 1, 60, SimulationOracle(arms, model, 9), 11)
        assert len(seq.rows) == len(bat.rows) == 60
        for a, b in zip(seq.rows, bat.rows):
            assert a.labels_spent == b.labels_spent and a.active_set_size == b.active_set_size
            assert np.array_equal(a.theta, b.theta)

    def test_fresh_only(self):
        arms = ArmSet(random_arms(np.random.default_rng(1), 30, 3))
        for strategy in ("random", "ours-greedy", "selective"):
            _, trace = run_batched(strategy, arms, 0.1, 10, 30, ReplayOracle(np.ones(30)), 0, fresh_only=True)
            assert trace.pulls.tolist() == [1] * 30
        with pytest.raises(InputDomainError):
            run_batched("random", arms, 0.1, 10, 40, ReplayOracle(np.ones(30)), 0, fresh_only=True)

    def test_newton_tracking_matches_exact_refits(self):
        """Per-label Newton updates stay close to the exact fit on the same labels."""
        arms, model = canonical_instance(3, 0.2)
        oracle = SimulationOracle(arms, model, 2)
        _, cheap = run_sequential("random", arms, 0.1, 3000, oracle, 0, refit_every=50)
        _, exact = run_sequential("random", arms, 0.1, 3000, SimulationOracle(arms, model, 2), 0, refit_every=1)
        assert np.array_equal(cheap.pulls, exact.pulls)
        for a, b in zip(cheap.rows[100::97], exact.rows[100::97]):
            assert np.max(np.abs(a.theta - b.theta)) < 5e-2
        np.testing.assert_allclose(cheap.rows[-1].theta, exact.rows[-1].theta, atol=1e-6)

    def test_deterministic(self):
        arms, model = make_synthetic(3, 12, 0.2, seed=4)
        runs = [run_sequential("selective", arms, 0.1, 50, SimulationOracle(arms, model, 9), 7)[1] for _ in range(2)]
        assert all(np.array_equal(a.theta, b.theta) for a, b in zip(runs[0].rows, runs[1].rows))
