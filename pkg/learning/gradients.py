"""
Gradient Engine
Policy gradients of the rollout cost: central finite differences over all
12 parameters, and the analytic forward-accumulated chain for the feedback
gain block that serves as its correctness check
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from errors import GradientError, ShiftTuneError
from learning.rollout import cost_terms, joint_z_moments, propagate, rollout_cost, state_to_joint
from policy.controller import FEEDBACK_CHANNELS, N_PARAMS, GearshiftController, PolicyParams

logger = logging.getLogger(__name__)

PARAM_NAMES = ["a1", "a2", "a3", "a4"] + [f"kc_{r}{c}" for r in range(2) for c in range(4)]
KC_SLICE = slice(4, 12)
N_GAIN = 8


# =====================================================
#   Finite differences
# =====================================================
def central_difference(fun, x, rel_step=1e-5, workers=1):
    """
    Central-difference gradient with per-entry step rel_step * max(|x_i|, 1)

    Raises GradientError naming the entry whose perturbed value is not finite.
    """
    x = np.asarray(x, dtype=float)
    steps = rel_step * np.maximum(np.abs(x), 1.0)
    points = []
    for i in range(len(x)):
        for sign in (1.0, -1.0):
            p = x.copy()
            p[i] += sign * steps[i]
            points.append(p)

    def _evaluate(p):
        try:
            return float(fun(p))
        except (ShiftTuneError, np.linalg.LinAlgError, FloatingPointError):
            return np.nan

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            values = list(pool.map(_evaluate, points))
    else:
        values = [_evaluate(p) for p in points]

    values = np.array(values).reshape(len(x), 2)
    for i, (plus, minus) in enumerate(values):
        if not (np.isfinite(plus) and np.isfinite(minus)):
            name = PARAM_NAMES[i] if len(x) == N_PARAMS else str(i)
            raise GradientError(f"objective not finite when perturbing parameter {name}", index=i)
    return (values[:, 0] - values[:, 1]) / (2.0 * steps)


def grad_J_fd(policy, context, rel_step=1e-5, workers=1):
    """dJ/dψ over [a1..a4, Kc] from 24 rollouts"""
    def objective(v):
        return rollout_cost(PolicyParams.from_vector(v), context)

    return central_difference(objective, policy.to_vector(), rel_step, workers)


# =====================================================
#   Kernel and posterior derivatives
# =====================================================
def grad_kernel(zs, z1, h):
    """(dk/dz*, d²k/dz*²) of the SE kernel"""
    inv_ell2 = 1.0 / h.lengthscales ** 2
    delta = np.asarray(zs, dtype=float) - np.asarray(z1, dtype=float)
    k = h.sf2 * np.exp(-0.5 * float(delta @ (delta * inv_ell2)))
    scaled = delta * inv_ell2
    return -scaled * k, (-np.diag(inv_ell2) + np.outer(scaled, scaled)) * k


def grad_posterior(model, d, zs):
    """(dmu/dz*, dvar/dz*, d²mu/dz*²) of output d"""
    _, _, dmu, dvar, d2mu = model.outputs[d].predict_with_derivatives(zs)
    return dmu, dvar, d2mu


# =====================================================
#   Local partials of one belief step
# =====================================================
@dataclass
class StatePartials:
    """Partials of (μ', Σ') w.r.t. (μ, Σ, Kc); the Kc entries are row-major"""
    dmu_dmu: np.ndarray                     # 4 x 4
    dmu_dsig: np.ndarray                    # 4 x 4 x 4
    dmu_dpsi: np.ndarray                    # 4 x 8
    dsig_dmu: np.ndarray                    # 4 x 4 x 4
    dsig_dsig: np.ndarray                   # 4 x 4 x 4 x 4
    dsig_dpsi: np.ndarray                   # 4 x 4 x 8
    extras: dict = field(default_factory=dict)


def _gain_unit(k):
    """(plant channel, state column) of the k-th Kc entry"""
    row, col = divmod(k, 4)
    return FEEDBACK_CHANNELS[row], col


def grad_state_distribution(bx, controller, t, gp, dss):
    """Local partials of propagate, in the 2-channel feedback space"""
    xbar_t = controller.ref.xbar[t]
    g = state_to_joint(controller.gain)
    bz = joint_z_moments(bx, controller, t)
    _, _, dmu, dvar, d2mu = gp.predict(bz.mu)
    sigma_z = bz.sigma
    m = dss.ad - dss.bd @ controller.gain
    delta = xbar_t - bx.mu

    dmu_dmu = m + dmu @ g
    dmu_dsig = np.zeros((4, 4, 4))

    # d(var_i + g_i Σz g_iᵀ)/dz at fixed Σz
    var_slope = dvar + 2.0 * np.einsum("ia,ab,ibc->ic", dmu, sigma_z, d2mu)
    dsig_dmu = np.zeros((4, 4, 4))
    for i in range(4):
        dsig_dmu[i, i] = var_slope[i] @ g

    gg = dmu @ g
    dsig_dsig = np.einsum("ik,jl->ijkl", m, m)
    for i in range(4):
        dsig_dsig[i, i] += np.outer(gg[i], gg[i])

    dmu_dpsi = np.zeros((4, N_GAIN))
    dsig_dpsi = np.zeros((4, 4, N_GAIN))
    for k in range(N_GAIN):
        channel, col = _gain_unit(k)
        # dK̃c/dKc_k = E E_k: single entry at (channel, col)
        du = np.zeros(3)
        du[channel] = delta[col]
        dmu_dpsi[:, k] = (dss.bd + dmu[:, 4:]) @ du

        dm = np.zeros((4, 4))
        dm[:, col] = -dss.bd[:, channel]
        dsig_lin = dm @ bx.sigma @ m.T + m @ bx.sigma @ dm.T

        dz = np.concatenate([np.zeros(4), du])
        dg = np.zeros((7, 4))
        dg[4 + channel, col] = -1.0
        dsig_z = dg @ bx.sigma @ g.T + g @ bx.sigma @ dg.T
        dv = var_slope @ dz + np.einsum("ia,ab,ib->i", dmu, dsig_z, dmu)
        dsig_dpsi[:, :, k] = dsig_lin + np.diag(dv)

    return StatePartials(dmu_dmu=dmu_dmu, dmu_dsig=dmu_dsig, dmu_dpsi=dmu_dpsi,
                         dsig_dmu=dsig_dmu, dsig_dsig=dsig_dsig, dsig_dpsi=dsig_dpsi,
                         extras={"sigma_z": sigma_z, "dmu_gp": dmu})


def grad_cost(bx, xbar_t, l_inv):
    """(dE/dμ, dE/dΣ) of the expected saturating cost"""
    _, s_tilde, delta, q = cost_terms(bx, xbar_t, l_inv)
    sd = s_tilde @ delta
    return q * sd, 0.5 * q * (s_tilde - np.outer(sd, sd))


# =====================================================
#   Analytic dJ/dKc
# =====================================================
def grad_J_analytic_kc(policy, context):
    """Forward accumulation of dμ_t/dKc and dΣ_t/dKc over the rollout"""
    controller = GearshiftController(policy, context.ref)
    xbar = context.ref.xbar
    d_mu = np.zeros((4, N_GAIN))
    d_sig = np.zeros((4, 4, N_GAIN))
    belief = context.x0_belief
    grad = np.zeros(N_GAIN)
    for t in range(context.steps):
        p = grad_state_distribution(belief, controller, t, context.gp, context.dss)
        next_mu = p.dmu_dmu @ d_mu + np.einsum("iab,abp->ip", p.dmu_dsig, d_sig) + p.dmu_dpsi
        next_sig = (np.einsum("ija,ap->ijp", p.dsig_dmu, d_mu)
                    + np.einsum("ijkl,klp->ijp", p.dsig_dsig, d_sig) + p.dsig_dpsi)
        belief = propagate(belief, controller, t, context.gp, context.dss)
        de_dmu, de_dsig = grad_cost(belief, xbar[t + 1], context.l_inv)
        grad += de_dmu @ next_mu + np.einsum("ij,ijp->p", de_dsig, next_sig)
        d_mu, d_sig = next_mu, next_sig
    return grad


# =====================================================
#   Report
# =====================================================
@dataclass
class GradReport:
    grad_fd: np.ndarray
    grad_analytic_kc: np.ndarray
    max_rel_err: float
    rows: list

    def passed(self, threshold=1e-4):
        return bool(self.max_rel_err <= threshold)


def relative_errors(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def gradient_report(policy, context, rel_step=1e-5, workers=1, analytic=None):
    """
    Compare the finite-difference gradient with the analytic Kc chain

    Args:
        analytic: Replacement for grad_J_analytic_kc (same signature)
    """
    analytic = analytic or grad_J_analytic_kc
    fd = grad_J_fd(policy, context, rel_step, workers)
    an = np.asarray(analytic(policy, context), dtype=float)
    errors = relative_errors(fd[KC_SLICE], an)
    rows = []
    for i, name in enumerate(PARAM_NAMES):
        if i < 4:
            rows.append((name, fd[i], None, None))
        else:
            rows.append((name, fd[i], an[i - 4], errors[i - 4]))
    report = GradReport(grad_fd=fd, grad_analytic_kc=an, max_rel_err=float(errors.max()), rows=rows)
    logger.info("Gradient check: max relative error %.3e on the Kc block", report.max_rel_err)
    return report
