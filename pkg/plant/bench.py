"""
Virtual Bench
Stand-in for the physical gearshift test bench: nominal discrete plant plus
hidden motor friction, clutch gain errors, torque saturation and sensor noise
"""
import logging
from dataclasses import dataclass

import numpy as np

from errors import TrialAbortedError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Trial:
    """One recorded bench rollout, all arrays of length T+1"""
    times: np.ndarray
    states: np.ndarray          # measured
    commanded: np.ndarray
    applied: np.ndarray         # saturated, before the hidden gain errors
    feedforward: np.ndarray
    reference: object
    seed: int

    @property
    def n_samples(self):
        return len(self.times)


@dataclass(frozen=True)
class ErrorMetrics:
    """Vehicle-speed tracking error norms"""
    e_inf: float
    e_end: float
    e_2: float

    def as_tuple(self):
        return (self.e_inf, self.e_end, self.e_2)


# =====================================================
#   Hidden dynamics
# =====================================================
def motor_drag(speed, bench):
    """Viscous plus tanh-blended Coulomb friction torque on the motor shaft"""
    speed = np.asarray(speed, dtype=float)
    return bench.viscous * speed + bench.coulomb * np.tanh(speed / bench.blend_speed)


def saturate(u_cmd):
    """Clutch torques cannot go negative; the motor channel is left unlimited"""
    u = np.array(u_cmd, dtype=float)
    u[..., 1:] = np.maximum(u[..., 1:], 0.0)
    return u


def effective_controls(x, u_applied, bench):
    """Applied torques as the plant actually feels them"""
    g1, g2 = bench.clutch_gains
    return np.array([
        u_applied[0] - motor_drag(x[0], bench),
        g1 * u_applied[1],
        g2 * u_applied[2],
    ])


def step_true(x, u_cmd, bench, dss):
    """One step of the true (hidden) dynamics from the commanded torques"""
    u_eff = effective_controls(x, saturate(u_cmd), bench)
    return dss.ad @ x + dss.bd @ u_eff + dss.tau0d


def constant_speed_deficit(speeds, bench, dss, repeats=20):
    """
    Motor torque deficit measured by constant-speed coast steps on the bench

    Each run spins the motor at one speed with both clutches open, steps
    the bench once with a zero command and compares the measured motion with
    the nominal prediction. The mismatch is projected on the motor-torque
    column of Bd. Sensor noise is averaged over `repeats` runs per speed.
    """
    rng = np.random.default_rng(bench.seed)
    noise_std = np.asarray(bench.noise_std, dtype=float)
    column = dss.bd[:, 0]
    zero = np.zeros(3)
    deficits = []
    for speed in np.atleast_1d(np.asarray(speeds, dtype=float)):
        x = np.array([speed, 0.0, 0.0, 0.0])
        estimates = []
        for _ in range(repeats):
            measured = x + rng.normal(0.0, noise_std)
            measured_next = step_true(x, zero, bench, dss) + rng.normal(0.0, noise_std)
            mismatch = measured_next - dss.step(measured, zero)
            estimates.append(-float(column @ mismatch) / float(column @ column))
        deficits.append(float(np.mean(estimates)))
    return np.array(deficits)


# =====================================================
#   Trials
# =====================================================
def run_trial(policy, ref, bench, dss, x0):
    """
    Roll a controller out on the bench

    Args:
        policy: Object with control(x, t) and feedforward(t)
        ref: ReferenceTrajectory the controller tracks
        bench: BenchConfig (perturbations, noise, seed)
        dss: Nominal DiscreteStateSpace
        x0: True initial state
    """
    horizon = ref.horizon
    rng = np.random.default_rng(bench.seed)
    noise_std = np.asarray(bench.noise_std, dtype=float)

    states = np.full((horizon + 1, 4), np.nan)
    commanded = np.full((horizon + 1, 3), np.nan)
    applied = np.full((horizon + 1, 3), np.nan)
    feedforward = np.full((horizon + 1, 3), np.nan)

    def _record(n):
        return Trial(times=ref.t_grid[:n].copy(), states=states[:n].copy(),
                     commanded=commanded[:n].copy(), applied=applied[:n].copy(),
                     feedforward=feedforward[:n].copy(), reference=ref, seed=bench.seed)

    x = np.asarray(x0, dtype=float).copy()
    for t in range(horizon + 1):
        measured = x + rng.normal(0.0, noise_std)
        u_cmd = policy.control(measured, t)
        states[t] = measured
        commanded[t] = u_cmd
        applied[t] = saturate(u_cmd)
        feedforward[t] = policy.feedforward(t)
        if not (np.all(np.isfinite(measured)) and np.all(np.isfinite(u_cmd))):
            raise TrialAbortedError(f"bench state diverged at step {t}", _record(t))
        if t < horizon:
            x = step_true(x, u_cmd, bench, dss)

    return _record(horizon + 1)


# =====================================================
#   Metrics
# =====================================================
def metrics_from_error(error):
    error = np.asarray(error, dtype=float)
    return ErrorMetrics(
        e_inf=float(np.max(np.abs(error))),
        e_end=float(abs(error[-1])),
        e_2=float(np.sqrt(np.sum(error ** 2))),
    )


def tracking_error(trial):
    """Measured minus reference vehicle speed per sample"""
    return trial.states[:, 2] - trial.reference.xbar[:len(trial.states), 2]


def error_metrics(trial):
    metrics = metrics_from_error(tracking_error(trial))
    logger.info("Trial (seed %d): |e|inf=%.4f  |e(end)|=%.4f  |e|2=%.4f",
                trial.seed, metrics.e_inf, metrics.e_end, metrics.e_2)
    return metrics
