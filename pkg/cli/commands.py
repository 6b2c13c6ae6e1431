"""
ShiftTune Command Line
Subcommands for calibration, reference generation, single trials, gradient
checks, learning runs, off-training evaluation and report rendering

Exit codes: 0 success, 1 runtime or numerical failure, 2 configuration error.
"""
import argparse
import logging
import os
import sys
import time

import numpy as np

from cli import reports
from errors import ConfigError, ParameterDomainError, ShiftTuneError
from learning.gp_dynamics import GpModel, make_dataset, train_hyperparameters
from learning.gradients import gradient_report
from learning.learner import (Scenario, bench_trial, build_experiment, context_for,
                              initial_policy, run_learning, trial_seed)
from plant.bench import ErrorMetrics, error_metrics
from plant.driveline import calibrated_params, measure_calibration
from policy.controller import load_policy
from settings import (DEFAULT_BENCH_FILE, DEFAULT_COST_FILE, DEFAULT_LEARNING_FILE,
                      DEFAULT_PARAMS_FILE, RunConfig, load_settings)

logger = logging.getLogger(__name__)

GRAD_CHECK_THRESHOLD = 1e-4


# =====================================================
#   Helpers
# =====================================================
def run_config(args):
    return RunConfig(params_path=args.params, bench_path=args.bench, cost_path=args.cost,
                     learning_path=args.learning, seed=args.seed, output_dir=args.out)


def configure_logging(verbose):
    level = logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(level=level, format="[%(name)s] %(message)s", force=True)


def _experiment(settings, scenario=None):
    try:
        return build_experiment(settings, scenario)
    except ParameterDomainError as exc:
        raise ConfigError(f"infeasible scenario: {exc}") from None


def _policy_or_initial(path, experiment):
    return load_policy(path) if path else initial_policy(experiment)


# =====================================================
#   Commands
# =====================================================
def cmd_calibrate(args):
    settings = load_settings(run_config(args))
    params = calibrated_params(settings.driveline, settings.targets)
    f_n, zeta, ratio = measure_calibration(params)
    print(f"Iv = {params.iv:.6g} kg.m^2")
    print(f"k  = {params.k:.6g} Nm/rad")
    print(f"d  = {params.d:.6g} Nm.s/rad")
    print(f"natural frequency = {f_n:.4f} Hz (target {settings.targets.natural_frequency:g})")
    print(f"damping ratio     = {zeta:.4f} (target {settings.targets.damping_ratio:g})")
    print(f"inertia ratio     = {ratio:.4f} (target {settings.targets.inertia_ratio:g})")
    return 0


def cmd_reference(args):
    settings = load_settings(run_config(args))
    experiment = _experiment(settings)
    path = os.path.join(args.out, "reference.csv")
    reports.write_reference_csv(path, experiment.ref)
    print(f"Reference ({experiment.ref.horizon} steps) written to {path}")
    return 0


def cmd_trial(args):
    settings = load_settings(run_config(args))
    experiment = _experiment(settings)
    policy = _policy_or_initial(args.policy, experiment)
    trial = bench_trial(experiment, policy, args.seed)
    metrics = error_metrics(trial)
    reports.write_trial_csv(os.path.join(args.out, "trial.csv"), trial)
    reports.write_metrics(os.path.join(args.out, "metrics.ini"), metrics)
    print(reports.render_metrics_table([("trial", metrics)], label="run"))
    return 0


def cmd_learn(args):
    run = run_config(args)
    settings = load_settings(run)
    init = load_policy(args.init_policy) if args.init_policy else None

    def progress(record):
        print(f"iteration {record.index}: |e|2 = {record.metrics.e_2:.4f}  ({record.elapsed:.1f} s)")

    started = time.perf_counter()
    history = run_learning(settings, seed=run.seed, init_policy=init,
                           outer_iters=args.outer_iters, progress=progress)
    summary = reports.write_history(history, run.output_dir)
    print(summary)
    print(f"total time {time.perf_counter() - started:.1f} s")
    return 1 if history.error else 0


def _spread(metrics):
    values = np.array([m.as_tuple() for m in metrics])
    return ErrorMetrics(*values.mean(axis=0)), ErrorMetrics(*values.std(axis=0))


def cmd_eval(args):
    if args.duration is not None and not args.duration > 0:
        raise ConfigError(f"scenario duration must be positive, got {args.duration}")
    if not (args.speed_scale > 0 and args.load_scale > 0):
        raise ConfigError("scenario scale factors must be positive")
    if args.repeats < 1:
        raise ConfigError("--repeats must be at least 1")
    if args.outer_iters is not None and args.outer_iters < 0:
        raise ConfigError("--outer-iters must be non-negative")

    settings = load_settings(run_config(args))
    scenario = Scenario(duration=args.duration, speed_scale=args.speed_scale, load_scale=args.load_scale)
    experiment = _experiment(settings, scenario)
    trained = load_policy(args.policy)
    baseline = initial_policy(experiment)

    # Repeat 0 uses the seed of the final trial of `learn` with the same --seed
    n_outer = settings.learning.outer_iters if args.outer_iters is None else args.outer_iters
    results = {"trained": [], "initial": []}
    for r in range(args.repeats):
        seed = trial_seed(args.seed, n_outer + r)
        for name, policy in (("trained", trained), ("initial", baseline)):
            trial = bench_trial(experiment, policy, seed)
            results[name].append(error_metrics(trial))
            if r == 0:
                reports.write_trial_csv(os.path.join(args.out, f"eval_{name}.csv"), trial)
                reports.write_metrics(os.path.join(args.out, f"eval_{name}_metrics.ini"), results[name][0])

    if args.repeats == 1:
        print(reports.render_metrics_table([(k, v[0]) for k, v in results.items()], label="policy"))
    else:
        print(reports.render_spread_table([(k, *_spread(v)) for k, v in results.items()]))
    return 0


def cmd_grad_check(args):
    settings = load_settings(run_config(args))
    experiment = _experiment(settings)
    policy = _policy_or_initial(args.policy, experiment)
    if args.no_gp:
        gp = GpModel.disabled()
    else:
        trial = bench_trial(experiment, policy, args.seed)
        dataset = make_dataset([trial], experiment.dss, settings.gp.n_max, seed=args.seed)
        gp = train_hyperparameters(dataset, settings.gp, seed=args.seed)
    report = gradient_report(policy, context_for(experiment, gp),
                             settings.learning.fd_rel_step, settings.learning.workers)
    print(reports.render_grad_report(report, GRAD_CHECK_THRESHOLD))
    return 0 if report.passed(GRAD_CHECK_THRESHOLD) else 1


def cmd_report(args):
    rows = reports.read_history_rows(args.out)
    print(reports.render_summary(rows))
    return 0


# =====================================================
#   Parser
# =====================================================
def build_parser():
    parser = argparse.ArgumentParser(prog="shifttune",
                                     description="Gearshift controller calibration on a virtual bench")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--params", default=DEFAULT_PARAMS_FILE, help="driveline/reference INI file")
    common.add_argument("--bench", default=DEFAULT_BENCH_FILE, help="virtual bench INI file")
    common.add_argument("--cost", default=DEFAULT_COST_FILE, help="controller/cost INI file")
    common.add_argument("--learning", default=DEFAULT_LEARNING_FILE, help="GP/learning INI file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default=RunConfig().output_dir, help="output directory")
    common.add_argument("--verbose", action="store_true")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("calibrate", parents=[common], help="calibrate Iv, k, d").set_defaults(func=cmd_calibrate)
    sub.add_parser("reference", parents=[common], help="write the reference CSV").set_defaults(func=cmd_reference)

    p = sub.add_parser("trial", parents=[common], help="run one bench trial")
    p.add_argument("--policy", help="policy INI file (default: LQR/heuristic initial policy)")
    p.set_defaults(func=cmd_trial)

    p = sub.add_parser("learn", parents=[common], help="run the learning loop")
    p.add_argument("--outer-iters", type=int, default=None)
    p.add_argument("--init-policy", help="start from this policy INI file")
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("eval", parents=[common], help="evaluate a policy off the training condition")
    p.add_argument("--policy", required=True, help="trained policy INI file")
    p.add_argument("--duration", type=float, default=None, help="shift duration (s)")
    p.add_argument("--speed-scale", type=float, default=1.0, help="scale of the initial motor speed")
    p.add_argument("--load-scale", type=float, default=1.0, help="scale of the vehicle load torque")
    p.add_argument("--repeats", type=int, default=1, help="trials per policy, seeded like the final learning trial onwards")
    p.add_argument("--outer-iters", type=int, default=None,
                   help="outer iterations of the learning run being reproduced")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", parents=[common], help="analytic vs finite-difference gradient")
    p.add_argument("--policy", help="policy INI file (default: initial policy)")
    p.add_argument("--no-gp", action="store_true", help="check with the GP disabled")
    p.set_defaults(func=cmd_grad_check)

    sub.add_parser("report", parents=[common], help="re-render a history summary").set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"[ShiftTune] configuration error: {exc}", file=sys.stderr)
        return 2
    except (ShiftTuneError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"[ShiftTune] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
