"""
Gearshift Controller
Feedforward plus full-state feedback on the motor and clutch-2 channels,
LQR initialization of the feedback gain and policy file I/O
"""
import logging
from dataclasses import dataclass

import numpy as np

from errors import ConfigError, ModelError, ParameterDomainError, SynthesisError
from plant.reference import FeedforwardParams, apply_feedforward
from settings import IniStore, parse_float, write_ini

logger = logging.getLogger(__name__)

N_PARAMS = 12
FEEDBACK_CHANNELS = (0, 2)


@dataclass(frozen=True)
class PolicyParams:
    """The 12 tunable parameters: a1..a4 and the 2x4 gain Kc (rows Tm, T2)"""
    ff: FeedforwardParams
    kc: np.ndarray

    def __post_init__(self):
        kc = np.array(self.kc, dtype=float)
        if kc.shape != (2, 4):
            raise ParameterDomainError(f"feedback gain must be 2x4, got {kc.shape}")
        if not (np.all(np.isfinite(kc)) and np.all(np.isfinite(self.ff.as_array()))):
            raise ParameterDomainError("policy parameters must be finite")
        kc.setflags(write=False)
        object.__setattr__(self, "kc", kc)

    def to_vector(self):
        """[a1, a2, a3, a4, kc_00, kc_01, ..., kc_13]"""
        return np.concatenate([self.ff.as_array(), self.kc.ravel()])

    @classmethod
    def from_vector(cls, values):
        values = np.asarray(values, dtype=float)
        if values.shape != (N_PARAMS,):
            raise ParameterDomainError(f"expected {N_PARAMS} policy parameters, got {values.shape}")
        return cls(ff=FeedforwardParams.from_array(values[:4]), kc=values[4:].reshape(2, 4))

    def with_kc(self, kc):
        return PolicyParams(ff=self.ff, kc=kc)


# =====================================================
#   LQR
# =====================================================
def solve_dare_iterative(a, b, q, r, tol=1e-12, max_iter=100000):
    """
    Discrete algebraic Riccati equation by fixed-point iteration from P = Q

    Returns:
        (P, K) with u = -K x the optimal infinite-horizon feedback
    """
    a, b, q, r = (np.atleast_2d(np.asarray(m, dtype=float)) for m in (a, b, q, r))
    if not np.any(b):
        raise SynthesisError("input matrix is zero; system is not stabilizable")

    p = q.copy()
    for iteration in range(1, max_iter + 1):
        bp = b.T @ p
        gain = np.linalg.solve(r + bp @ b, bp @ a)
        p_next = q + a.T @ p @ a - a.T @ p @ b @ gain
        p_next = 0.5 * (p_next + p_next.T)
        if not np.all(np.isfinite(p_next)):
            raise SynthesisError(f"Riccati recursion diverged after {iteration} iterations")
        step = np.max(np.abs(p_next - p))
        p = p_next
        if step <= tol * max(1.0, np.max(np.abs(p))):
            break
    else:
        raise SynthesisError(f"Riccati recursion did not converge in {max_iter} iterations "
                             f"(last change {step:.3e})")

    gain = np.linalg.solve(r + b.T @ p @ b, b.T @ p @ a)
    radius = np.max(np.abs(np.linalg.eigvals(a - b @ gain)))
    if not radius < 1.0:
        raise SynthesisError(f"closed loop is not stable (spectral radius {radius:.6f})")
    logger.debug("Riccati converged in %d iterations, closed-loop spectral radius %.6f", iteration, radius)
    return p, gain


def lqr_init(dss, q, r, tol=1e-12, max_iter=100000):
    """Kc from the discrete LQR with the clutch-1 column of Bd removed"""
    bd_reduced = np.delete(dss.bd, 1, axis=1)
    _, kc = solve_dare_iterative(dss.ad, bd_reduced, q, r, tol, max_iter)
    return kc


def embed_gain(kc):
    """2x4 gain -> 3x4 gain with a zero clutch-1 row"""
    kc = np.asarray(kc, dtype=float)
    full = np.zeros((3, kc.shape[1]))
    full[list(FEEDBACK_CHANNELS)] = kc
    return full


def extract_gain(full):
    return np.asarray(full, dtype=float)[list(FEEDBACK_CHANNELS)].copy()


# =====================================================
#   Controller
# =====================================================
class GearshiftController:
    """u_t = ū_t + K̃c (x̄_t - x)"""

    def __init__(self, policy, ref):
        """
        Bind a parameter set to a reference

        Args:
            policy: PolicyParams
            ref: ReferenceTrajectory with ubar0 filled in
        """
        if ref.ubar0 is None:
            raise ModelError("reference has no nominal command; run nominal_command first")
        self.policy = policy
        self.ref = ref
        self.ubar = apply_feedforward(ref.ubar0, policy.ff, ref)
        self.gain = embed_gain(policy.kc)

    def control(self, x, t):
        return self.ubar[t] + self.gain @ (self.ref.xbar[t] - np.asarray(x, dtype=float))

    def feedforward(self, t):
        return self.ubar[t].copy()


def control(x, t_index, policy, ref):
    return GearshiftController(policy, ref).control(x, t_index)


# =====================================================
#   Policy files
# =====================================================
def policy_groups(policy):
    values = {f"a{i + 1}": float(v) for i, v in enumerate(policy.ff.as_array())}
    for (row, col), v in np.ndenumerate(policy.kc):
        values[f"kc_{row}{col}"] = float(v)
    return {"policy": values}


def save_policy(path, policy):
    write_ini(path, policy_groups(policy))
    logger.debug("Saved policy to %s", path)


def load_policy(path):
    """Read a policy dump; every key is required"""
    raw = IniStore(path).group("policy")
    keys = [f"a{i + 1}" for i in range(4)] + [f"kc_{r}{c}" for r in range(2) for c in range(4)]
    missing = [key for key in keys if key not in raw]
    if missing:
        raise ConfigError(f"{path}: policy is missing keys {', '.join(missing)}")
    values = np.array([parse_float(raw[key], f"[policy] {key}") for key in keys])
    if values[2] < 0 or values[3] < 0:
        raise ConfigError(f"{path}: clutch scale factors a3, a4 must be non-negative")
    try:
        return PolicyParams.from_vector(values)
    except ParameterDomainError as exc:
        raise ConfigError(f"{path}: {exc}") from None
