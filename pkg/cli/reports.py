"""
Reports
CSV writers, metrics files, learning-history layout and the fixed-width
tracking-error tables printed by the CLI
"""
import glob
import logging
import os
import shutil

import numpy as np

from errors import ConfigError
from learning.gp_dynamics import save_gp
from plant.bench import ErrorMetrics
from policy.controller import save_policy
from settings import IniStore, parse_float, write_ini

logger = logging.getLogger(__name__)

REFERENCE_COLUMNS = ["t", "xbar_0", "xbar_1", "xbar_2", "xbar_3", "u0_Tm", "u0_T1", "u0_T2"]
TRIAL_COLUMNS = (["t", "x0", "x1", "x2", "x3"]
                 + [f"{prefix}_{ch}" for prefix in ("uc", "ua", "uff") for ch in ("Tm", "T1", "T2")])
BELIEF_COLUMNS = (["t"] + [f"mu_{i}" for i in range(4)] + [f"var_{i}" for i in range(4)] + ["step_cost"])


# =====================================================
#   CSV files
# =====================================================
def write_csv(path, columns, data):
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    np.savetxt(path, np.asarray(data, dtype=float), delimiter=",", header=",".join(columns),
               comments="", fmt="%.17g")


def write_reference_csv(path, ref):
    write_csv(path, REFERENCE_COLUMNS, np.column_stack([ref.t_grid, ref.xbar, ref.ubar0]))


def write_trial_csv(path, trial):
    write_csv(path, TRIAL_COLUMNS, np.column_stack(
        [trial.times, trial.states, trial.commanded, trial.applied, trial.feedforward]))


def write_belief_csv(path, rollout, t_grid):
    mu = np.array([b.mu for b in rollout.beliefs])
    var = np.array([np.diag(b.sigma) for b in rollout.beliefs])
    write_csv(path, BELIEF_COLUMNS, np.column_stack([t_grid[:len(mu)], mu, var, rollout.step_costs]))


def write_j_curve(path, values):
    values = np.asarray(values, dtype=float)
    write_csv(path, ["iteration", "J"], np.column_stack([np.arange(len(values)), values]))


# -----------------------------------------------------
#   Metrics files
# -----------------------------------------------------
def write_metrics(path, metrics):
    write_ini(path, {"metrics": {"e_inf": metrics.e_inf, "e_end": metrics.e_end, "e_2": metrics.e_2}})


def read_metrics(path):
    raw = IniStore(path).group("metrics")
    try:
        return ErrorMetrics(*(parse_float(raw[key], f"[metrics] {key}") for key in ("e_inf", "e_end", "e_2")))
    except KeyError as exc:
        raise ConfigError(f"{path}: missing metric {exc}") from None


# =====================================================
#   Tables
# =====================================================
def render_metrics_table(rows, label="iter"):
    """
    Fixed-width tracking-error table

    Args:
        rows: [(label, ErrorMetrics)]
    """
    lines = [f"{label:>10} {'|e|inf':>12} {'|e(end)|':>12} {'|e|2':>12}"]
    lines.append("-" * len(lines[0]))
    for name, m in rows:
        lines.append(f"{str(name):>10} {m.e_inf:12.4f} {m.e_end:12.4f} {m.e_2:12.4f}")
    return "\n".join(lines)


def reduction_row(first, last):
    """Percent reduction of every metric from the first to the last row"""
    def pct(a, b):
        return 100.0 * (a - b) / a if a > 0 else 0.0
    return (pct(first.e_inf, last.e_inf), pct(first.e_end, last.e_end), pct(first.e_2, last.e_2))


def render_summary(rows):
    """Per-iteration metrics plus the reduction row"""
    text = render_metrics_table(rows)
    if len(rows) > 1:
        r = reduction_row(rows[0][1], rows[-1][1])
        text += f"\n{'reduction':>10} {r[0]:11.1f}% {r[1]:11.1f}% {r[2]:11.1f}%"
    return text


def render_spread_table(rows):
    """rows: [(label, mean ErrorMetrics, std ErrorMetrics)]"""
    lines = [f"{'policy':>10} {'|e|inf':>20} {'|e(end)|':>20} {'|e|2':>20}"]
    lines.append("-" * len(lines[0]))
    for name, mean, std in rows:
        cells = [f"{m:.4f} +/- {s:.4f}" for m, s in zip(mean.as_tuple(), std.as_tuple())]
        lines.append(f"{name:>10} " + " ".join(f"{c:>20}" for c in cells))
    return "\n".join(lines)


def render_grad_report(report, threshold):
    lines = [f"{'param':>8} {'finite diff':>16} {'analytic':>16} {'rel err':>10}"]
    lines.append("-" * len(lines[0]))
    for name, fd, an, err in report.rows:
        an_text = "-" if an is None else f"{an:16.8e}"
        err_text = "-" if err is None else f"{err:10.2e}"
        lines.append(f"{name:>8} {fd:16.8e} {an_text:>16} {err_text:>10}")
    verdict = "PASS" if report.passed(threshold) else "FAIL"
    lines.append(f"max relative error {report.max_rel_err:.3e} (threshold {threshold:g}): {verdict}")
    return "\n".join(lines)


# =====================================================
#   Learning history
# =====================================================
def iteration_dir(out_dir, index):
    return os.path.join(out_dir, f"iter_{index:02d}")


def clear_history(out_dir):
    """Remove the iteration folders and final policy of an earlier run"""
    for folder in glob.glob(os.path.join(out_dir, "iter_*")):
        if os.path.isdir(folder):
            shutil.rmtree(folder)
    stale = os.path.join(out_dir, "final_policy.ini")
    if os.path.isfile(stale):
        os.remove(stale)


def write_history(history, out_dir):
    """
    Lay out a learning history

    out_dir/iter_XX/{trial.csv, metrics.ini, policy.ini, gp.ini, j_curve.csv, belief.csv}
    out_dir/{final_policy.ini, summary.txt}
    """
    os.makedirs(out_dir, exist_ok=True)
    clear_history(out_dir)
    rows = []
    for record in history.records:
        folder = iteration_dir(out_dir, record.index)
        os.makedirs(folder, exist_ok=True)
        write_trial_csv(os.path.join(folder, "trial.csv"), record.trial)
        write_metrics(os.path.join(folder, "metrics.ini"), record.metrics)
        save_policy(os.path.join(folder, "policy.ini"), record.policy)
        if record.gp is not None:
            save_gp(os.path.join(folder, "gp.ini"), record.gp)
            write_j_curve(os.path.join(folder, "j_curve.csv"), record.j_curve)
        if record.belief is not None:
            write_belief_csv(os.path.join(folder, "belief.csv"), record.belief, record.trial.times)
        rows.append((record.index, record.metrics))

    if history.final_policy is not None:
        save_policy(os.path.join(out_dir, "final_policy.ini"), history.final_policy)
    summary = render_summary(rows) if rows else "no iterations recorded"
    if history.error:
        summary += f"\nerror: {history.error}"
    if history.stopped_early:
        summary += "\nstopped early"
    with open(os.path.join(out_dir, "summary.txt"), "w", encoding="utf-8") as handle:
        handle.write(summary + "\n")
    logger.info("History written to %s", out_dir)
    return summary


def read_history_rows(out_dir):
    """[(iteration, ErrorMetrics)] from an existing history directory"""
    folders = sorted(glob.glob(os.path.join(out_dir, "iter_*")))
    if not folders:
        raise ConfigError(f"{out_dir}: no iteration folders found")
    rows = []
    for folder in folders:
        index = int(os.path.basename(folder).split("_")[1])
        rows.append((index, read_metrics(os.path.join(folder, "metrics.ini"))))
    return rows
