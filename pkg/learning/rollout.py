"""
Rollout Engine
Gaussian belief rollouts of a policy through the nominal model plus the
learned residual GPs, with the saturating expected tracking cost
"""
import logging
from dataclasses import dataclass

import numpy as np

from policy.controller import GearshiftController

logger = logging.getLogger(__name__)

# Largest float below 1: the per-step cost never saturates exactly
MAX_COST = float(np.nextafter(1.0, 0.0))


@dataclass(frozen=True)
class GaussianBelief:
    mu: np.ndarray
    sigma: np.ndarray


@dataclass(frozen=True)
class RolloutResult:
    beliefs: list
    step_costs: np.ndarray
    J: float


@dataclass(frozen=True)
class RolloutContext:
    """Everything a rollout needs besides the policy parameters"""
    dss: object
    ref: object
    gp: object
    l_inv: np.ndarray
    x0_belief: GaussianBelief
    horizon: int = None

    @property
    def steps(self):
        return self.ref.horizon if self.horizon is None else int(self.horizon)


def initial_belief(ref, variance):
    """N(x̄0, variance * I)"""
    return GaussianBelief(mu=ref.xbar[0].copy(), sigma=float(variance) * np.eye(4))


def make_context(dss, ref, gp, cost, rollout, horizon=None):
    """RolloutContext from CostConfig and RolloutConfig"""
    return RolloutContext(dss=dss, ref=ref, gp=gp, l_inv=np.asarray(cost.l_inv, dtype=float),
                          x0_belief=initial_belief(ref, rollout.initial_variance), horizon=horizon)


# =====================================================
#   Moments
# =====================================================
def symmetrize(sigma):
    return 0.5 * (sigma + sigma.T)


def psd_floor(sigma):
    """Clip negative eigenvalues at zero (only when one shows up)"""
    sigma = symmetrize(sigma)
    w, v = np.linalg.eigh(sigma)
    if w.min() >= 0.0:
        return sigma
    return symmetrize((v * np.maximum(w, 0.0)) @ v.T)


def state_to_joint(gain):
    """G = [I; -K̃c], so z = G x + const"""
    return np.vstack([np.eye(4), -gain])


def joint_z_moments(bx, controller, t):
    """Belief over z = [x; u] under u = ū_t + K̃c (x̄_t - x)"""
    g = state_to_joint(controller.gain)
    mu_z = np.concatenate([bx.mu, controller.control(bx.mu, t)])
    return GaussianBelief(mu=mu_z, sigma=symmetrize(g @ bx.sigma @ g.T))


def gp_taylor_moments(model, d, bz):
    """First-order Taylor moments of output d at an uncertain input"""
    if not model.enabled:
        return 0.0, 0.0
    mu, var, dmu, _, _ = model.outputs[d].predict_with_derivatives(bz.mu)
    return mu, var + float(dmu @ bz.sigma @ dmu)


def gp_moments(model, bz):
    """All outputs: (mean (4,), variance (4,), raw prediction tuple)"""
    prediction = model.predict(bz.mu)
    mu, var, dmu = prediction[0], prediction[1], prediction[2]
    taylor = np.einsum("di,ij,dj->d", dmu, bz.sigma, dmu)
    return mu, var + taylor, prediction


def closed_loop(dss, controller):
    return dss.ad - dss.bd @ controller.gain


def propagate(bx, controller, t, gp, dss):
    """Belief at t+1 from the belief at t"""
    bz = joint_z_moments(bx, controller, t)
    mean_f, var_f, _ = gp_moments(gp, bz)
    mu_next = dss.ad @ bx.mu + dss.bd @ bz.mu[4:] + dss.tau0d + mean_f
    m = closed_loop(dss, controller)
    sigma_next = m @ bx.sigma @ m.T + np.diag(var_f)
    return GaussianBelief(mu=mu_next, sigma=psd_floor(sigma_next))


# =====================================================
#   Cost
# =====================================================
def cost_terms(bx, xbar_t, l_inv):
    """(expected cost, S̃ = L⁻¹(I + Σ L⁻¹)⁻¹, δ = μ - x̄, q = 1 - E[c])"""
    w = np.diag(np.asarray(l_inv, dtype=float))
    b = np.eye(len(w)) + bx.sigma @ w
    s_tilde = np.linalg.solve(b.T, w).T
    delta = bx.mu - xbar_t
    log_q = -0.5 * np.linalg.slogdet(b)[1] - 0.5 * float(delta @ s_tilde @ delta)
    q = float(np.exp(log_q))
    return min(1.0 - q, MAX_COST), s_tilde, delta, q


def expected_cost(bx, xbar_t, l_inv):
    return cost_terms(bx, xbar_t, l_inv)[0]


def saturating_cost(x, xbar_t, l_inv):
    """Deterministic cost 1 - exp(-1/2 (x - x̄)ᵀ L⁻¹ (x - x̄))"""
    delta = np.asarray(x, dtype=float) - xbar_t
    return min(1.0 - float(np.exp(-0.5 * np.sum(np.asarray(l_inv) * delta ** 2))), MAX_COST)


# =====================================================
#   Rollout
# =====================================================
def simulate_rollout(policy, context):
    """Sequential belief propagation over the horizon, J = sum of the T+1 expected costs"""
    controller = GearshiftController(policy, context.ref)
    xbar = context.ref.xbar
    belief = context.x0_belief
    beliefs = [belief]
    costs = [expected_cost(belief, xbar[0], context.l_inv)]
    for t in range(context.steps):
        belief = propagate(belief, controller, t, context.gp, context.dss)
        beliefs.append(belief)
        costs.append(expected_cost(belief, xbar[t + 1], context.l_inv))
    costs = np.array(costs)
    return RolloutResult(beliefs=beliefs, step_costs=costs, J=float(costs.sum()))


def rollout_cost(policy, context):
    return simulate_rollout(policy, context).J
