"""
Reference Trajectory
Prescribed gearshift state trajectory, idealized nominal command and the
a1..a4 feedforward parameterization
"""
import logging
from dataclasses import dataclass, replace

import numpy as np

from errors import ModelError, ParameterDomainError
from plant.bench import constant_speed_deficit
from plant.driveline import build_state_space

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FeedforwardParams:
    """Motor-torque correction (a1, a2) and clutch torque scale factors (a3, a4)"""
    a1: float = 0.0
    a2: float = 0.0
    a3: float = 1.0
    a4: float = 1.0

    def as_array(self):
        return np.array([self.a1, self.a2, self.a3, self.a4], dtype=float)

    @classmethod
    def from_array(cls, values):
        a1, a2, a3, a4 = (float(v) for v in values)
        return cls(a1, a2, a3, a4)


@dataclass(frozen=True)
class ReferenceTrajectory:
    """
    Gearshift reference on a uniform grid of T+1 points

    xbar_dot holds the analytic time derivative of the prescribed profiles;
    ubar0 stays None until nominal_command fills it in.
    """
    t_grid: np.ndarray
    xbar: np.ndarray
    xbar_dot: np.ndarray
    t_torque_end: float
    t_shift_end: float
    dt: float
    ubar0: np.ndarray = None

    @property
    def horizon(self):
        return len(self.t_grid) - 1

    @property
    def x0(self):
        return self.xbar[0].copy()


# =====================================================
#   State profile
# =====================================================
def _blend(s):
    """Quintic 0 -> 1 with zero slope and curvature at both ends"""
    return s ** 3 * (10.0 - 15.0 * s + 6.0 * s ** 2)


def _blend_rate(s):
    return 30.0 * s ** 2 * (1.0 - s) ** 2


def gear1_initial_state(params, cfg):
    """Gear-1 starting state: motor at cfg.motor_speed, margin above gear-1 sync"""
    output_speed = (cfg.motor_speed - cfg.speed_margin) / params.r1
    if not output_speed > 0:
        raise ParameterDomainError(
            f"motor speed {cfg.motor_speed} with margin {cfg.speed_margin} gives no forward output speed")
    if not params.k > 0:
        raise ParameterDomainError("reference elongation Tv/k needs a positive driveline stiffness")
    return np.array([cfg.motor_speed, output_speed, output_speed, params.tv / params.k])


def build_reference(params, cfg, x0=None):
    """
    Prescribed state trajectory of the upshift (x̄ only)

    Args:
        params: DrivelineParams
        cfg: ReferenceConfig (duration, torque_fraction, dt, motor_speed, speed_margin)
        x0: Starting state; defaults to gear1_initial_state(params, cfg)
    """
    if not cfg.duration > 0:
        raise ParameterDomainError(f"shift duration must be positive, got {cfg.duration}")
    if not 0 < cfg.torque_fraction < 1:
        raise ParameterDomainError(f"torque fraction must lie in (0, 1), got {cfg.torque_fraction}")
    if not cfg.dt > 0:
        raise ParameterDomainError(f"reference step must be positive, got {cfg.dt}")
    steps = int(round(cfg.duration / cfg.dt))
    if steps < 1 or abs(steps * cfg.dt - cfg.duration) > 1e-9 * max(1.0, cfg.duration):
        raise ParameterDomainError(f"duration {cfg.duration} is not a whole number of {cfg.dt} s steps")

    if x0 is None:
        x0 = gear1_initial_state(params, cfg)
    output_speed = float(x0[1])
    if not params.k > 0:
        raise ParameterDomainError("reference elongation Tv/k needs a positive driveline stiffness")

    t = np.arange(steps + 1) * cfg.dt
    t_te = cfg.torque_fraction * cfg.duration
    t_se = cfg.duration
    motor_high = params.r1 * output_speed + cfg.speed_margin
    motor_low = params.r2 * output_speed

    s = np.clip((t - t_te) / (t_se - t_te), 0.0, 1.0)
    motor = motor_high + (motor_low - motor_high) * _blend(s)
    motor_rate = np.where(t > t_te, (motor_low - motor_high) * _blend_rate(s) / (t_se - t_te), 0.0)

    xbar = np.empty((steps + 1, 4))
    xbar[:, 0] = motor
    xbar[:, 1] = output_speed
    xbar[:, 2] = output_speed
    xbar[:, 3] = params.tv / params.k
    xbar_dot = np.zeros_like(xbar)
    xbar_dot[:, 0] = motor_rate

    return ReferenceTrajectory(t_grid=t, xbar=xbar, xbar_dot=xbar_dot,
                               t_torque_end=t_te, t_shift_end=t_se, dt=float(cfg.dt))


# =====================================================
#   Nominal command
# =====================================================
def _steady_balance(params, columns):
    """Solve rows 0-1 of the model at steady state for the two given control channels"""
    c = np.asarray(params.c, dtype=float).reshape(2, 4)
    # row 0 = (c1, c2, c3, c4), row 1 = (c5, c6, c7, c8); c2/c6 multiply the shaft torque Tv
    lhs = c[:, columns]
    rhs = -c[:, 1] * params.tv
    if abs(np.linalg.det(lhs)) < 1e-12 * max(1.0, np.abs(lhs).max() ** 2):
        raise ModelError(f"steady-state torque balance is singular for channels {columns}")
    return np.linalg.solve(lhs, rhs)


def gear1_steady_torques(params):
    """(Tm, T1) holding gear 1 at constant speed with T2 = 0"""
    tm, t1 = _steady_balance(params, [0, 2])
    return float(tm), float(t1)


def gear2_steady_torques(params):
    """(Tm, T2) holding gear 2 at constant speed with T1 = 0"""
    tm, t2 = _steady_balance(params, [0, 3])
    return float(tm), float(t2)


def initial_clutch1_torque(params):
    return gear1_steady_torques(params)[1]


def nominal_command(ref, params):
    """Fill in ū₀: linear T1 ramp, then (Tm, T2) from the rows 0-1 balance per step"""
    c1, _, c3, c4, c5, _, c7, c8 = (float(v) for v in params.c)
    actuation = np.array([[c1, c4], [c5, c8]])
    if abs(np.linalg.det(actuation)) < 1e-12 * max(1.0, np.abs(actuation).max() ** 2):
        raise ModelError("motor and clutch-2 channels are not independent (singular actuation matrix)")

    t = ref.t_grid
    t1_start = initial_clutch1_torque(params)
    if ref.t_torque_end > 0:
        t1 = np.clip(t1_start * (1.0 - t / ref.t_torque_end), 0.0, None)
        t1[t >= ref.t_torque_end] = 0.0
    else:
        t1 = np.zeros_like(t)

    ss = build_state_space(params)
    rhs = (ref.xbar_dot[:, :2] - ref.xbar @ ss.a[:2].T - ss.tau0[:2]
           - np.outer(t1, [c3, c7]))
    tm_t2 = np.linalg.solve(actuation, rhs.T).T

    ubar0 = np.column_stack([tm_t2[:, 0], t1, tm_t2[:, 1]])
    logger.debug("Nominal command: T1(0)=%.4g Nm, Tm range [%.4g, %.4g] Nm",
                 t1_start, ubar0[:, 0].min(), ubar0[:, 0].max())
    return replace(ref, ubar0=ubar0)


def reference_with_command(params, cfg, x0=None):
    """build_reference followed by nominal_command"""
    return nominal_command(build_reference(params, cfg, x0), params)


# =====================================================
#   Feedforward
# =====================================================
def speed_ratio(ref):
    output = ref.xbar[:, 1]
    if np.any(output == 0):
        raise ParameterDomainError("reference output speed is zero; motor/output ratio undefined")
    return ref.xbar[:, 0] / output


def apply_feedforward(ubar0, a, ref):
    """ū from ū₀: Tm + a1·(θ̄̇m/θ̄̇out) + a2, a3·T1, a4·T2"""
    ubar0 = np.asarray(ubar0, dtype=float)
    if ubar0.shape != (len(ref.t_grid), 3):
        raise ParameterDomainError(f"nominal command shape {ubar0.shape} does not match the reference grid")
    ubar = ubar0.copy()
    ubar[:, 0] += a.a1 * speed_ratio(ref) + a.a2
    ubar[:, 1] *= a.a3
    ubar[:, 2] *= a.a4
    return ubar


def heuristic_feedforward(params, ref, bench, dss):
    """
    Initial a1..a4 from constant-speed friction runs on the bench

    The motor torque deficit is measured at the gear-2 synchronization speed
    and at the torque-phase speed, then fitted as a1·ratio + a2. Clutch
    scale factors start at 1.
    """
    output_speed = float(ref.xbar[0, 1])
    speeds = np.array([params.r2 * output_speed, float(ref.xbar[0, 0])])
    deficit = constant_speed_deficit(speeds, bench, dss)
    design = np.column_stack([speeds / output_speed, np.ones_like(speeds)])
    (a1, a2), *_ = np.linalg.lstsq(design, deficit, rcond=None)
    logger.info("Heuristic feedforward: deficits %s Nm -> a1=%.4g, a2=%.4g",
                np.round(deficit, 4).tolist(), a1, a2)
    return FeedforwardParams(a1=float(a1), a2=float(a2), a3=1.0, a4=1.0)
