"""
Learner
Outer calibration loop: bench trial, residual dataset, GP training and
gradient-based policy improvement, repeated for a fixed number of iterations
"""
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from errors import ShiftTuneError
from learning.gp_dynamics import make_dataset, train_hyperparameters
from learning.gradients import grad_J_fd
from learning.line_search import DescentOptions, descend
from learning.rollout import make_context, rollout_cost, simulate_rollout
from plant.bench import error_metrics, run_trial
from plant.driveline import build_state_space, calibrated_params, discretize
from plant.reference import gear1_initial_state, heuristic_feedforward, reference_with_command
from policy.controller import GearshiftController, PolicyParams, lqr_init

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Scenario:
    """Off-training operating condition (None / 1.0 keep the configured value)"""
    duration: float = None
    speed_scale: float = 1.0
    load_scale: float = 1.0


@dataclass
class Experiment:
    settings: object
    params: object
    dss: object
    ref: object
    x0: np.ndarray
    bench: object


@dataclass
class IterationRecord:
    index: int
    policy: PolicyParams
    trial: object
    metrics: object
    gp: object = None
    optimized: PolicyParams = None
    j_curve: list = field(default_factory=list)
    stalled: bool = False
    belief: object = None
    elapsed: float = 0.0


@dataclass
class LearningHistory:
    records: list = field(default_factory=list)
    error: str = None
    stopped_early: bool = False

    @property
    def final_policy(self):
        if not self.records:
            return None
        last = self.records[-1]
        return last.optimized or last.policy

    def e2_reduction(self):
        """Relative drop of ||e||_2 from the first to the last recorded trial"""
        if len(self.records) < 2:
            return 0.0
        first = self.records[0].metrics.e_2
        return (first - self.records[-1].metrics.e_2) / first if first > 0 else 0.0


# =====================================================
#   Setup
# =====================================================
def build_experiment(settings, scenario=None):
    """Calibrated plant, reference with nominal command and bench for one condition"""
    scenario = scenario or Scenario()
    params = calibrated_params(settings.driveline, settings.targets)
    if scenario.load_scale != 1.0:
        params = replace(params, tv=params.tv * scenario.load_scale)
    ref_cfg = settings.reference
    if scenario.duration is not None:
        ref_cfg = replace(ref_cfg, duration=scenario.duration)
    if scenario.speed_scale != 1.0:
        ref_cfg = replace(ref_cfg, motor_speed=ref_cfg.motor_speed * scenario.speed_scale)

    dss = discretize(build_state_space(params), ref_cfg.dt)
    x0 = gear1_initial_state(params, ref_cfg)
    ref = reference_with_command(params, ref_cfg, x0)
    return Experiment(settings=settings, params=params, dss=dss, ref=ref, x0=x0, bench=settings.bench)


def initial_policy(experiment):
    """LQR feedback gain and heuristic feedforward"""
    cfg = experiment.settings.controller
    kc = lqr_init(experiment.dss, np.diag(cfg.q_diag), np.diag(cfg.r_diag),
                  cfg.riccati_tol, cfg.riccati_max_iter)
    ff = heuristic_feedforward(experiment.params, experiment.ref, experiment.bench, experiment.dss)
    return PolicyParams(ff=ff, kc=kc)


def context_for(experiment, gp):
    s = experiment.settings
    return make_context(experiment.dss, experiment.ref, gp, s.cost, s.rollout)


def trial_seed(seed, index):
    """Bench seed of trial `index` in a run seeded with `seed`"""
    return seed + index


def bench_trial(experiment, policy, seed):
    controller = GearshiftController(policy, experiment.ref)
    return run_trial(controller, experiment.ref, experiment.bench.with_seed(seed),
                     experiment.dss, experiment.x0)


# =====================================================
#   Inner loop
# =====================================================
def descent_options(cfg):
    return DescentOptions(max_iter=cfg.policy_max_iter, grad_tol=cfg.grad_tol, rel_tol=cfg.rel_tol,
                          armijo=cfg.armijo, shrink=cfg.shrink, max_shrinks=cfg.max_shrinks)


def policy_lower_bounds():
    """a3, a4 are clutch scale factors and stay non-negative"""
    lower = np.full(12, -np.inf)
    lower[2:4] = 0.0
    return lower


def optimize_policy(psi0, context, cfg, objective=None, gradient=None):
    """
    Minimize the rollout cost over all 12 parameters

    Descent runs on ψ / max(|ψ0|, 1) so that every coordinate moves on a
    comparable scale.

    Args:
        psi0: Starting PolicyParams
        context: RolloutContext with the trained (or disabled) GP
        cfg: LearningConfig
        objective, gradient: Replacements for the rollout cost and its
            finite-difference gradient, both on 12-vectors

    Returns:
        (PolicyParams, DescentResult) with `values` the J curve
    """
    if objective is None:
        def objective(v):
            return rollout_cost(PolicyParams.from_vector(v), context)
    if gradient is None:
        def gradient(v):
            return grad_J_fd(PolicyParams.from_vector(v), context, cfg.fd_rel_step, cfg.workers)

    x0 = psi0.to_vector()
    scale = np.maximum(np.abs(x0), 1.0)
    result = descend(lambda x: objective(x * scale), lambda x: gradient(x * scale) * scale,
                     x0 / scale, descent_options(cfg), lower=policy_lower_bounds() / scale)
    logger.info("Policy optimization: J %.6g -> %.6g in %d iterations (%s)",
                result.values[0], result.value, result.iterations, result.reason)
    return PolicyParams.from_vector(result.x * scale), result


# =====================================================
#   Outer loop
# =====================================================
def _should_stop_early(history, cfg):
    """||e||_2 improved by less than the tolerance on the last two trials"""
    if not cfg.early_stop or len(history.records) < 3:
        return False
    e2 = [r.metrics.e_2 for r in history.records[-3:]]
    gains = [(e2[i] - e2[i + 1]) / e2[i] if e2[i] > 0 else 0.0 for i in range(2)]
    return all(g < cfg.early_stop_tol for g in gains)


def run_learning(settings, seed=0, init_policy=None, outer_iters=None, progress=None):
    """
    Run the outer loop

    Args:
        settings: Settings
        seed: Run seed; trial i uses seed + i
        init_policy: Optional PolicyParams replacing the LQR/heuristic start
        outer_iters: Override of settings.learning.outer_iters
        progress: Optional callback(record) after each recorded iteration

    Returns:
        LearningHistory; a failing stage truncates it and sets `error`
    """
    cfg = settings.learning
    n_outer = cfg.outer_iters if outer_iters is None else int(outer_iters)
    history = LearningHistory()
    try:
        experiment = build_experiment(settings)
        policy = init_policy or initial_policy(experiment)
    except (ShiftTuneError, np.linalg.LinAlgError, FloatingPointError) as exc:
        history.error = f"setup: {exc}"
        logger.error("Learning setup failed: %s", exc)
        return history

    trials = []
    warm_start = None
    for i in range(n_outer + 1):
        started = time.perf_counter()
        try:
            trial = bench_trial(experiment, policy, trial_seed(seed, i))
            record = IterationRecord(index=i, policy=policy, trial=trial, metrics=error_metrics(trial))
            history.records.append(record)
            if i == n_outer:
                _notify(progress, record, started)
                break
            if _should_stop_early(history, cfg):
                history.stopped_early = True
                logger.info("Stopping early: ||e||_2 no longer improving")
                _notify(progress, record, started)
                break

            trials.append(trial)
            dataset = make_dataset(trials, experiment.dss, settings.gp.n_max, seed=seed + i)
            gp = train_hyperparameters(dataset, settings.gp, seed=seed + i, warm_start=warm_start)
            warm_start = gp.hypers
            context = context_for(experiment, gp)
            optimized, result = optimize_policy(policy, context, cfg)

            record.gp = gp
            record.optimized = optimized
            record.j_curve = list(result.values)
            record.stalled = result.stalled
            record.belief = simulate_rollout(optimized, context)
            policy = optimized
            _notify(progress, record, started)
        except (ShiftTuneError, np.linalg.LinAlgError, FloatingPointError) as exc:
            history.error = f"iteration {i}: {exc}"
            logger.error("Learning stopped at iteration %d: %s", i, exc)
            break
    return history


def _notify(progress, record, started):
    record.elapsed = time.perf_counter() - started
    logger.info("Iteration %d finished in %.1f s", record.index, record.elapsed)
    if progress is not None:
        progress(record)
