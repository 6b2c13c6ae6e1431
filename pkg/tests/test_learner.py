import filecmp
import os
from dataclasses import replace

import numpy as np
import pytest

from cli.reports import write_history
from errors import TrainingError
from learning import learner
from learning.learner import (IterationRecord, LearningHistory, Scenario, bench_trial, build_experiment,
                              initial_policy, optimize_policy, policy_lower_bounds, run_learning,
                              _should_stop_early)
from plant.bench import ErrorMetrics, error_metrics
from plant.reference import FeedforwardParams
from policy.controller import PolicyParams
from settings import GpConfig, LearningConfig, RunConfig, Settings, load_settings

TARGET = np.array([0.3, -0.2, 0.9, 1.1, 5.0, -3.0, 40.0, 2.0, -7.0, 1.5, 0.4, 90.0])


def quadratic(v):
    return 0.5 * float(np.sum((v - TARGET) ** 2))


def quadratic_grad(v):
    return v - TARGET


def small_settings(**learning):
    return Settings(gp=GpConfig(n_max=60, restarts=0, max_iter=10),
                    learning=LearningConfig(**{"outer_iters": 1, "policy_max_iter": 2, **learning}))


def record_with_e2(index, e2):
    return IterationRecord(index=index, policy=None, trial=None, metrics=ErrorMetrics(1.0, 1.0, e2))


class TestSetup:
    def test_default_experiment(self, settings, params, ref):
        experiment = build_experiment(settings)
        assert experiment.params.k == pytest.approx(params.k)
        np.testing.assert_allclose(experiment.ref.xbar, ref.xbar)
        np.testing.assert_array_equal(experiment.x0, ref.xbar[0])

    def test_scenarios(self, settings, params):
        short = build_experiment(settings, Scenario(duration=0.6))
        assert short.ref.horizon == 60
        light = build_experiment(settings, Scenario(load_scale=0.5))
        assert light.params.tv == pytest.approx(0.5 * params.tv)
        fast = build_experiment(settings, Scenario(speed_scale=1.2))
        assert fast.x0[0] == pytest.approx(24.0)

    def test_initial_policy(self, settings, lqr_gain):
        policy = initial_policy(build_experiment(settings))
        np.testing.assert_allclose(policy.kc, lqr_gain)
        assert (policy.ff.a3, policy.ff.a4) == (1.0, 1.0)
        assert policy.ff.a2 > 0.0

    def test_bench_trial_is_seeded(self, settings):
        experiment = build_experiment(settings)
        policy = initial_policy(experiment)
        first, second = bench_trial(experiment, policy, 4), bench_trial(experiment, policy, 4)
        np.testing.assert_array_equal(first.states, second.states)
        assert first.seed == 4


class TestOptimizePolicy:
    def test_quadratic_surrogate(self):
        psi0 = PolicyParams.from_vector(np.concatenate([[0.0, 0.0, 1.0, 1.0], np.ones(8)]))
        cfg = LearningConfig(policy_max_iter=500, grad_tol=1e-10, rel_tol=0.0)
        best, result = optimize_policy(psi0, None, cfg, quadratic, quadratic_grad)
        np.testing.assert_allclose(best.to_vector(), TARGET, atol=1e-6)
        assert np.all(np.diff(result.values) <= 0.0)

    def test_clutch_scales_stay_non_negative(self):
        target = TARGET.copy()
        target[2] = -0.5
        psi0 = PolicyParams.from_vector(np.concatenate([[0.0, 0.0, 1.0, 1.0], np.ones(8)]))
        cfg = LearningConfig(policy_max_iter=500, grad_tol=1e-10, rel_tol=0.0)
        best, _ = optimize_policy(psi0, None, cfg, lambda v: 0.5 * float(np.sum((v - target) ** 2)),
                                  lambda v: v - target)
        assert best.ff.a3 == 0.0
        assert best.ff.a4 == pytest.approx(1.1, abs=1e-6)

    def test_restart_from_optimum(self):
        psi0 = PolicyParams.from_vector(TARGET)
        _, result = optimize_policy(psi0, None, LearningConfig(), quadratic, quadratic_grad)
        assert result.iterations == 0
        assert result.reason == "gradient"

    def test_lower_bounds(self):
        lower = policy_lower_bounds()
        np.testing.assert_array_equal(lower[2:4], 0.0)
        assert np.all(np.isneginf(np.delete(lower, [2, 3])))

    def test_rollout_cost_descends(self, policy, disabled_context):
        cfg = LearningConfig(policy_max_iter=3)
        best, result = optimize_policy(policy, disabled_context, cfg)
        assert 1 <= len(result.values) <= 4
        assert np.all(np.diff(result.values) <= 0.0)
        assert best.ff.a3 >= 0.0 and best.ff.a4 >= 0.0


class TestEarlyStop:
    def test_plateau(self):
        history = LearningHistory([record_with_e2(i, e) for i, e in enumerate([10.0, 9.95, 9.9])])
        assert _should_stop_early(history, LearningConfig(early_stop=True, early_stop_tol=0.02))
        assert not _should_stop_early(history, LearningConfig(early_stop=False))

    def test_still_improving(self):
        history = LearningHistory([record_with_e2(i, e) for i, e in enumerate([10.0, 8.0, 7.9])])
        assert not _should_stop_early(history, LearningConfig(early_stop=True, early_stop_tol=0.02))

    def test_needs_three_trials(self):
        history = LearningHistory([record_with_e2(i, e) for i, e in enumerate([10.0, 10.0])])
        assert not _should_stop_early(history, LearningConfig(early_stop=True))

    def test_reduction(self):
        history = LearningHistory([record_with_e2(0, 10.0), record_with_e2(1, 4.0)])
        assert history.e2_reduction() == pytest.approx(0.6)
        assert LearningHistory([record_with_e2(0, 10.0)]).e2_reduction() == 0.0


class TestRunLearning:
    def test_zero_outer_iterations(self, settings):
        history = run_learning(settings, outer_iters=0)
        assert len(history.records) == 1
        assert history.error is None
        record = history.records[0]
        assert record.gp is None and record.optimized is None
        assert history.final_policy is record.policy

    def test_progress_callback(self):
        seen = []
        history = run_learning(small_settings(), seed=3, progress=seen.append)
        assert [r.index for r in seen] == [0, 1]
        assert history.records[0].trial.seed == 3
        assert history.records[1].trial.seed == 4
        assert history.records[0].gp.enabled
        assert history.final_policy is history.records[1].policy

    def test_dataset_grows_by_one_trial_per_iteration(self, ref):
        settings = replace(small_settings(outer_iters=2), gp=GpConfig(n_max=1000, restarts=0, max_iter=10))
        history = run_learning(settings, seed=2)
        assert history.error is None
        assert [r.index for r in history.records] == [0, 1, 2]
        first, second = history.records[0].gp.dataset, history.records[1].gp.dataset
        assert first.n == ref.horizon
        assert second.n == 2 * ref.horizon
        np.testing.assert_array_equal(second.z[:first.n], first.z)
        np.testing.assert_array_equal(second.y[:first.n], first.y)
        assert history.records[2].gp is None

    def test_initial_policy_override(self, policy):
        tuned = PolicyParams(ff=FeedforwardParams(0.1, 0.2, 0.9, 1.0), kc=policy.kc)
        history = run_learning(Settings(), init_policy=tuned, outer_iters=0)
        assert history.records[0].policy is tuned

    def test_training_failure_is_recorded(self, monkeypatch):
        def broken(*args, **kwargs):
            raise TrainingError("every hyperparameter start failed")

        monkeypatch.setattr(learner, "train_hyperparameters", broken)
        history = run_learning(small_settings())
        assert len(history.records) == 1
        assert history.error.startswith("iteration 0")

    def test_bad_setup_is_recorded(self):
        settings = replace(Settings(), reference=replace(Settings().reference, duration=-1.0))
        history = run_learning(settings)
        assert history.records == []
        assert history.error.startswith("setup")

    def test_identical_runs_write_identical_files(self, tmp_path):
        first, second = tmp_path / "first", tmp_path / "second"
        write_history(run_learning(small_settings(), seed=7), str(first))
        write_history(run_learning(small_settings(), seed=7), str(second))
        names = sorted(os.path.relpath(os.path.join(d, f), first) for d, _, files in os.walk(first) for f in files)
        assert "iter_01/trial.csv" in names and "iter_00/gp.ini" in names
        match, mismatch, errors = filecmp.cmpfiles(first, second, names, shallow=False)
        assert mismatch == [] and errors == []


# =====================================================
#   End-to-end (shipped configuration)
# =====================================================
@pytest.fixture(scope="module")
def shipped_history():
    settings = load_settings(RunConfig())
    return settings, run_learning(settings, seed=0)


@pytest.mark.slow
def test_tracking_error_drops_by_forty_percent(shipped_history):
    _, history = shipped_history
    assert history.error is None
    assert len(history.records) == 6
    assert history.e2_reduction() >= 0.4


@pytest.mark.slow
@pytest.mark.parametrize("scenario", [Scenario(duration=0.6), Scenario(load_scale=0.7)])
def test_trained_policy_generalizes(shipped_history, scenario):
    settings, history = shipped_history
    experiment = build_experiment(settings, scenario)
    before = error_metrics(bench_trial(experiment, history.records[0].policy, 100))
    after = error_metrics(bench_trial(experiment, history.final_policy, 100))
    assert after.e_2 < before.e_2
