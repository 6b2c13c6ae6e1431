"""
Driveline Model
Continuous driveline/vehicle state space, calibration of the simulated
vehicle inertia, stiffness and damping, and zero-order-hold discretization

State x = [motor speed, output speed, vehicle speed, driveshaft elongation]
Control u = [motor torque Tm, clutch 1 torque T1, clutch 2 torque T2]
"""
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm
from scipy.optimize import root

from errors import CalibrationError, ParameterDomainError
from settings import CalibrationTargets

logger = logging.getLogger(__name__)

N_STATES = 4
N_CONTROLS = 3


@dataclass(frozen=True)
class DrivelineParams:
    """Dynamic coefficients c1..c8 plus the simulated vehicle side of the bench"""
    c: tuple
    iv: float
    k: float
    d: float
    tv: float
    r1: float
    r2: float

    def __post_init__(self):
        if len(self.c) != 8:
            raise ParameterDomainError(f"expected 8 dynamic coefficients, got {len(self.c)}")
        if not self.iv > 0:
            raise ParameterDomainError(f"vehicle inertia must be positive, got {self.iv}")
        # k = 0 is accepted as the decoupled-driveline limit; references need k > 0
        if self.k < 0:
            raise ParameterDomainError(f"driveline stiffness must be non-negative, got {self.k}")
        if self.d < 0:
            raise ParameterDomainError(f"driveline damping must be non-negative, got {self.d}")
        if not self.r1 > self.r2 > 0:
            raise ParameterDomainError(f"gear ratios must satisfy r1 > r2 > 0, got {self.r1}, {self.r2}")


@dataclass(frozen=True)
class StateSpace:
    a: np.ndarray
    b: np.ndarray
    tau0: np.ndarray


@dataclass(frozen=True)
class DiscreteStateSpace:
    ad: np.ndarray
    bd: np.ndarray
    tau0d: np.ndarray
    dt: float

    def step(self, x, u):
        """Nominal one-step prediction Ad x + Bd u + tau0d"""
        return self.ad @ x + self.bd @ u + self.tau0d


# =====================================================
#   State space
# =====================================================
def build_state_space(p):
    """Linear driveline model x' = A x + B u + tau0"""
    c1, c2, c3, c4, c5, c6, c7, c8 = (float(v) for v in p.c)
    k, d, iv = p.k, p.d, p.iv
    a = np.array([
        [0.0, c2 * d, -c2 * d, c2 * k],
        [0.0, c6 * d, -c6 * d, c6 * k],
        [0.0, d / iv, -d / iv, k / iv],
        [0.0, 1.0, -1.0, 0.0],
    ])
    b = np.array([
        [c1, c3, c4],
        [c5, c7, c8],
        [0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0],
    ])
    tau0 = np.array([0.0, 0.0, -p.tv / iv, 0.0])
    return StateSpace(a=a, b=b, tau0=tau0)


def discretize(ss, dt):
    """Exact zero-order-hold discretization, the bias treated as a unit input"""
    if not dt > 0:
        raise ParameterDomainError(f"discretization step must be positive, got {dt}")
    n, m = ss.b.shape
    # M = [A  B  tau0]
    #     [0  0   0  ]
    aug = np.zeros((n + m + 1, n + m + 1))
    aug[:n, :n] = ss.a
    aug[:n, n:n + m] = ss.b
    aug[:n, n + m] = ss.tau0
    phi = expm(aug * dt)
    return DiscreteStateSpace(
        ad=phi[:n, :n],
        bd=phi[:n, n:n + m],
        tau0d=phi[:n, n + m].copy(),
        dt=float(dt),
    )


# =====================================================
#   Calibration
# =====================================================
def reflected_inertia(c, r1):
    """Inertia of the bodies upstream of the driveshaft seen at the output in gear 1"""
    c1, c2, _, _, c5, c6, _, _ = (float(v) for v in c)
    inverse_mass = np.array([[c1, -c2], [c5, -c6]])
    if abs(np.linalg.det(inverse_mass)) < 1e-12 * max(1.0, np.abs(inverse_mass).max() ** 2):
        raise CalibrationError("coefficients c1, c2, c5, c6 do not define an invertible inertia matrix")
    mass = np.linalg.solve(inverse_mass, np.eye(2))
    v = np.array([r1, 1.0])
    inertia = float(v @ mass @ v)
    if not inertia > 0:
        raise CalibrationError("reflected gear-1 inertia is not positive", {"inertia": inertia})
    return inertia


def first_gear_matrix(c, r1, iv, k, d):
    """State matrix with clutch 1 locked (motor speed = r1 * output speed)"""
    j1 = reflected_inertia(c, r1)
    out_row = np.array([0.0, -d / j1, d / j1, -k / j1])
    return np.array([
        r1 * out_row,
        out_row,
        [0.0, d / iv, -d / iv, k / iv],
        [0.0, 1.0, -1.0, 0.0],
    ])


def oscillatory_mode(a):
    """(natural frequency in Hz, damping ratio) of the dominant complex eigen-pair"""
    eig = np.linalg.eigvals(a)
    pick = int(np.argmax(np.abs(eig.imag)))
    lam = eig[pick]
    if abs(lam.imag) < 1e-9 * max(1.0, abs(lam)):
        raise CalibrationError("first-gear driveline has no oscillatory mode",
                               {"eigenvalues": np.round(eig, 6).tolist()})
    magnitude = abs(lam)
    return magnitude / (2.0 * math.pi), -lam.real / magnitude


def calibrate_driveline(c, r1, targets=None):
    """
    Set Iv from the inertia ratio, then solve (k, d) for the target mode

    Returns:
        (iv, k, d)
    """
    targets = targets or CalibrationTargets()
    f_n, zeta, ratio = targets.natural_frequency, targets.damping_ratio, targets.inertia_ratio
    if not (f_n > 0 and 0 < zeta < 1 and ratio > 0):
        raise CalibrationError("calibration targets out of range",
                               {"natural_frequency": f_n, "damping_ratio": zeta, "inertia_ratio": ratio})

    j1 = reflected_inertia(c, r1)
    iv = j1 / ratio

    # Rigid two-inertia guess
    j_eq = 1.0 / (1.0 / j1 + 1.0 / iv)
    omega = 2.0 * math.pi * f_n
    guess = np.log([omega ** 2 * j_eq, 2.0 * zeta * omega * j_eq])

    def residual(log_kd):
        k, d = np.exp(log_kd)
        f, z = oscillatory_mode(first_gear_matrix(c, r1, iv, k, d))
        return [f / f_n - 1.0, z - zeta]

    sol = root(residual, guess, method="hybr", options={"xtol": 1e-13})
    err = np.abs(residual(sol.x)) if np.all(np.isfinite(sol.x)) else np.array([np.inf, np.inf])
    if not sol.success or err.max() > 1e-9:
        raise CalibrationError("driveline stiffness/damping solve did not converge",
                               {"message": sol.message, "residual": err.tolist(), "nfev": sol.nfev})
    k, d = (float(v) for v in np.exp(sol.x))
    logger.info("Calibrated driveline: Iv=%.6g kg.m^2, k=%.6g Nm/rad, d=%.6g Nm.s/rad", iv, k, d)
    return iv, k, d


def measure_calibration(p):
    """Achieved (natural frequency, damping ratio, inertia ratio) of a parameter set"""
    f, z = oscillatory_mode(first_gear_matrix(p.c, p.r1, p.iv, p.k, p.d))
    return f, z, reflected_inertia(p.c, p.r1) / p.iv


def calibrated_params(constants, targets=None):
    """DrivelineParams from raw constants and calibration targets"""
    iv, k, d = calibrate_driveline(constants.c, constants.r1, targets)
    return DrivelineParams(c=tuple(constants.c), iv=iv, k=k, d=d, tv=constants.tv,
                           r1=constants.r1, r2=constants.r2)
