"""
GP Dynamics
Squared-exponential Gaussian processes on the residual between measured
transitions and the nominal discrete model, one GP per state dimension
"""
import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize

from errors import ConfigError, DatasetError, FactorizationError, TrainingError
from settings import IniStore, parse_float, parse_vector, write_ini

logger = logging.getLogger(__name__)

N_OUT = 4
N_FEATURES = 7
JITTER_LEVELS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)
SIGNAL_BOUNDS = (1e-5, 1e3)
NOISE_BOUNDS = (1e-4, 1e3)
LENGTH_BOUNDS = (1e-3, 1e3)


# =====================================================
#   Dataset
# =====================================================
@dataclass(frozen=True)
class Dataset:
    z: np.ndarray   # n x 7 features [x, u]
    y: np.ndarray   # n x 4 residual targets

    @property
    def n(self):
        return len(self.z)

    @property
    def digest(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.z, dtype=float).tobytes())
        h.update(np.ascontiguousarray(self.y, dtype=float).tobytes())
        return h.hexdigest()


def transition_rows(trial, dss):
    """(features, residual targets) of every transition in one trial"""
    x_prev = trial.states[:-1]
    u_prev = trial.commanded[:-1]
    nominal = x_prev @ dss.ad.T + u_prev @ dss.bd.T + dss.tau0d
    return np.hstack([x_prev, u_prev]), trial.states[1:] - nominal


def make_dataset(trials, dss, n_max=None, seed=0):
    """
    Stack residual transitions of all trials

    Rows beyond n_max are dropped by a seeded uniform subsample (order kept).
    """
    trials = list(trials)
    if not trials:
        raise DatasetError("no trials to build a dataset from")
    blocks = [transition_rows(trial, dss) for trial in trials]
    z = np.vstack([b[0] for b in blocks])
    y = np.vstack([b[1] for b in blocks])
    if len(z) == 0:
        raise DatasetError("trials contain no transitions")
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(y))):
        raise DatasetError("dataset contains non-finite values")
    if n_max is not None and len(z) > n_max:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(len(z), size=int(n_max), replace=False))
        z, y = z[keep], y[keep]
    logger.debug("Dataset: %d rows from %d trial(s)", len(z), len(trials))
    return Dataset(z=z, y=y)


# =====================================================
#   Kernel
# =====================================================
@dataclass(frozen=True)
class GpHyper:
    """Log length-scales, log signal std and log noise std of one output GP"""
    log_ell: np.ndarray
    log_sf: float
    log_sn: float

    @classmethod
    def from_values(cls, lengthscales, sf2, sn2):
        return cls(log_ell=np.log(np.asarray(lengthscales, dtype=float)),
                   log_sf=0.5 * math.log(sf2), log_sn=0.5 * math.log(sn2))

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=float)
        return cls(log_ell=v[:-2].copy(), log_sf=float(v[-2]), log_sn=float(v[-1]))

    def to_vector(self):
        return np.concatenate([self.log_ell, [self.log_sf, self.log_sn]])

    @property
    def lengthscales(self):
        return np.exp(self.log_ell)

    @property
    def sf2(self):
        return math.exp(2.0 * self.log_sf)

    @property
    def sn2(self):
        return math.exp(2.0 * self.log_sn)


def kernel_matrix(a, b, h):
    """sf2 * exp(-1/2 sum(((a_i - b_j) / ell)^2)) for all row pairs"""
    ell = h.lengthscales
    a = np.atleast_2d(a) / ell
    b = np.atleast_2d(b) / ell
    sq = (np.sum(a ** 2, axis=1)[:, None] + np.sum(b ** 2, axis=1)[None, :] - 2.0 * a @ b.T)
    return h.sf2 * np.exp(-0.5 * np.maximum(sq, 0.0))


def kernel(z, zp, h):
    diff = (np.asarray(z, dtype=float) - np.asarray(zp, dtype=float)) / h.lengthscales
    return h.sf2 * math.exp(-0.5 * float(diff @ diff))


def _sq_dists(z, ell):
    """Per-feature scaled squared distances, shape (F, n, n)"""
    diff = z[:, None, :] - z[None, :, :]
    return np.moveaxis(diff ** 2, 2, 0) / (ell ** 2)[:, None, None]


# =====================================================
#   Single-output GP
# =====================================================
def factorize(k_noisy):
    """Lower Cholesky factor, escalating diagonal jitter relative to the diagonal scale"""
    scale = max(float(np.max(np.diag(k_noisy))), 1e-300)
    eye = np.eye(len(k_noisy))
    for level in JITTER_LEVELS:
        try:
            return cholesky(k_noisy + level * scale * eye, lower=True), level * scale
        except LinAlgError:
            continue
    raise FactorizationError(f"kernel matrix not positive definite even with jitter {JITTER_LEVELS[-1]:g}")


class OutputGp:
    """Posterior of one output dimension with its cached factorization"""

    def __init__(self, z, y, hyper):
        """
        Factorize K + sn2 I for fixed hyperparameters

        Args:
            z: n x F features
            y: n targets
            hyper: GpHyper
        """
        self.z = np.asarray(z, dtype=float)
        self.y = np.asarray(y, dtype=float)
        self.hyper = hyper
        self.k_f = kernel_matrix(self.z, self.z, hyper)
        k_noisy = self.k_f + hyper.sn2 * np.eye(len(self.z))
        self.chol, self.jitter = factorize(k_noisy)
        self.alpha = cho_solve((self.chol, True), self.y)
        self.inv_ell2 = 1.0 / hyper.lengthscales ** 2

    def posterior(self, zs):
        k = kernel_matrix(zs, self.z, self.hyper)[0]
        v = solve_triangular(self.chol, k, lower=True)
        return float(k @ self.alpha), max(self.hyper.sf2 - float(v @ v), 0.0)

    def mean_batch(self, zs, chunk=10000):
        zs = np.atleast_2d(zs)
        out = np.empty(len(zs))
        for start in range(0, len(zs), chunk):
            out[start:start + chunk] = kernel_matrix(zs[start:start + chunk], self.z, self.hyper) @ self.alpha
        return out

    def predict_with_derivatives(self, zs):
        """
        Mean, variance and their input derivatives at one test point

        Returns:
            (mu, var, dmu (F,), dvar (F,), d2mu (F, F))
        """
        delta = np.asarray(zs, dtype=float)[None, :] - self.z
        scaled = delta * self.inv_ell2
        k = self.hyper.sf2 * np.exp(-0.5 * np.sum(delta * scaled, axis=1))
        mu = float(k @ self.alpha)
        kinv_k = cho_solve((self.chol, True), k)
        var = max(self.hyper.sf2 - float(k @ kinv_k), 0.0)
        ak = self.alpha * k
        dmu = -ak @ scaled
        dvar = 2.0 * (kinv_k * k) @ scaled
        d2mu = -np.diag(self.inv_ell2) * ak.sum() + scaled.T @ (ak[:, None] * scaled)
        return mu, var, dmu, dvar, d2mu

    def log_marginal_likelihood(self):
        """(value, gradient w.r.t. [log ell, log sf, log sn])"""
        n = len(self.y)
        value = (-0.5 * float(self.y @ self.alpha) - float(np.sum(np.log(np.diag(self.chol))))
                 - 0.5 * n * math.log(2.0 * math.pi))
        k_inv = cho_solve((self.chol, True), np.eye(n))
        inner = np.outer(self.alpha, self.alpha) - k_inv
        dists = _sq_dists(self.z, self.hyper.lengthscales)
        grad_ell = 0.5 * np.einsum("ij,fij->f", inner, self.k_f[None, :, :] * dists)
        grad_sf = float(np.sum(inner * self.k_f))
        grad_sn = float(np.trace(inner)) * self.hyper.sn2
        return value, np.concatenate([grad_ell, [grad_sf, grad_sn]])


# =====================================================
#   Multi-output model
# =====================================================
class GpModel:
    """Residual dynamics model; `disabled()` predicts zero mean and variance"""

    def __init__(self, dataset=None, hypers=None):
        self.dataset = dataset
        self.hypers = list(hypers or [])
        self.outputs = []
        if dataset is not None:
            if len(self.hypers) != dataset.y.shape[1]:
                raise DatasetError(f"{len(self.hypers)} hyperparameter sets for {dataset.y.shape[1]} outputs")
            self.outputs = [OutputGp(dataset.z, dataset.y[:, d], h) for d, h in enumerate(self.hypers)]

    @classmethod
    def disabled(cls):
        return cls()

    @property
    def enabled(self):
        return bool(self.outputs)

    def posterior(self, d, zs):
        if not self.enabled:
            return 0.0, 0.0
        return self.outputs[d].posterior(zs)

    def predict(self, zs):
        """
        All outputs at one input with derivatives

        Returns:
            (mu (4,), var (4,), dmu (4, 7), dvar (4, 7), d2mu (4, 7, 7))
        """
        if not self.enabled:
            return (np.zeros(N_OUT), np.zeros(N_OUT), np.zeros((N_OUT, N_FEATURES)),
                    np.zeros((N_OUT, N_FEATURES)), np.zeros((N_OUT, N_FEATURES, N_FEATURES)))
        parts = [gp.predict_with_derivatives(zs) for gp in self.outputs]
        return tuple(np.array([p[i] for p in parts]) for i in range(5))

    def log_marginal_likelihood(self, d):
        return self.outputs[d].log_marginal_likelihood()

    def summary(self):
        if not self.enabled:
            return "GP disabled"
        rows = []
        for d, h in enumerate(self.hypers):
            rows.append(f"dim {d}: sf2={h.sf2:.3g} sn2={h.sn2:.3g} "
                        f"ell=[{', '.join(f'{v:.3g}' for v in h.lengthscales)}]")
        return "\n".join(rows)


def log_marginal_likelihood(model, d):
    return model.log_marginal_likelihood(d)


def posterior(model, d, zs):
    return model.posterior(d, zs)


# =====================================================
#   Training
# =====================================================
def _feature_scale(z):
    std = np.std(z, axis=0)
    return np.where(std > 0, std, 1.0)


def hyper_bounds(z):
    scale = _feature_scale(z)
    lower = np.concatenate([np.log(LENGTH_BOUNDS[0] * scale), np.log([SIGNAL_BOUNDS[0], NOISE_BOUNDS[0]])])
    upper = np.concatenate([np.log(LENGTH_BOUNDS[1] * scale), np.log([SIGNAL_BOUNDS[1], NOISE_BOUNDS[1]])])
    return lower, upper


def default_hyper(z, y):
    """Length-scales at the feature spread, signal at the target spread"""
    y_std = float(np.std(y))
    sf = max(y_std, 1e-4)
    sn = max(0.1 * y_std, 1e-4)
    return GpHyper(log_ell=np.log(_feature_scale(z)), log_sf=math.log(sf), log_sn=math.log(sn))


def _negative_lml(z, y):
    """Negative log marginal likelihood and its gradient, for minimize(jac=True)"""
    def evaluate(v):
        value, g = OutputGp(z, y, GpHyper.from_vector(v)).log_marginal_likelihood()
        return -value, -g

    return evaluate


def train_dimension(z, y, cfg, seed=0, dim=0, warm_start=None):
    """Best of several bounded L-BFGS-B starts on the negative log marginal likelihood"""
    lower, upper = hyper_bounds(z)
    base = (warm_start or default_hyper(z, y)).to_vector()
    rng = np.random.default_rng([seed, dim])
    starts = [base] + [base + rng.normal(0.0, cfg.restart_spread, size=base.shape)
                       for _ in range(cfg.restarts)]

    objective = _negative_lml(z, y)
    bounds = list(zip(lower, upper))
    best, diagnostics = None, []
    for i, start in enumerate(starts):
        try:
            result = minimize(objective, np.clip(start, lower, upper), jac=True, method="L-BFGS-B",
                              bounds=bounds, options={"maxiter": cfg.max_iter})
        except (FactorizationError, LinAlgError, FloatingPointError, ValueError) as exc:
            diagnostics.append(f"start {i}: {exc}")
            continue
        if not np.isfinite(result.fun):
            diagnostics.append(f"start {i}: non-finite objective")
            continue
        diagnostics.append(f"start {i}: -lml={result.fun:.6g} ({result.message})")
        if best is None or result.fun < best.fun:
            best = result
    if best is None:
        raise TrainingError(f"every hyperparameter start failed for output {dim}", diagnostics)
    logger.debug("Output %d training:\n  %s", dim, "\n  ".join(diagnostics))
    return GpHyper.from_vector(best.x), -float(best.fun)


def train_hyperparameters(dataset, cfg, seed=0, warm_start=None):
    """
    Train one GP per output dimension

    Args:
        dataset: Dataset
        cfg: GpConfig
        seed: Seed of the multi-start perturbations
        warm_start: Optional hyperparameters of a previous model (one per output)
    """
    if dataset.n == 0:
        raise DatasetError("cannot train on an empty dataset")
    n_out = dataset.y.shape[1]
    warm = list(warm_start) if warm_start else [None] * n_out

    def _train(d):
        return train_dimension(dataset.z, dataset.y[:, d], cfg, seed, d, warm[d])

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_train, range(n_out)))
    else:
        results = [_train(d) for d in range(n_out)]

    for d, (_, lml) in enumerate(results):
        logger.info("GP output %d trained: log marginal likelihood %.4f", d, lml)
    return GpModel(dataset, [hyper for hyper, _ in results])


# =====================================================
#   Model dump
# =====================================================
def save_gp(path, model):
    groups = {"dataset": {"rows": model.dataset.n if model.enabled else 0,
                          "sha256": model.dataset.digest if model.enabled else ""}}
    for d, h in enumerate(model.hypers):
        groups[f"output_{d}"] = {
            "log_lengthscales": [float(v) for v in h.log_ell],
            "log_sf": float(h.log_sf),
            "log_sn": float(h.log_sn),
        }
    write_ini(path, groups)


def load_gp(path, dataset):
    """Rebuild a model from its dump and the dataset it was trained on"""
    store = IniStore(path)
    header = store.group("dataset")
    if str(header.get("sha256", "")) != dataset.digest:
        raise ConfigError(f"{path}: dataset hash does not match the supplied dataset")
    hypers = []
    for d in range(dataset.y.shape[1]):
        raw = store.group(f"output_{d}")
        if not raw:
            raise ConfigError(f"{path}: missing [output_{d}]")
        hypers.append(GpHyper(
            log_ell=np.array(parse_vector(raw.get("log_lengthscales"), "log_lengthscales", dataset.z.shape[1])),
            log_sf=parse_float(raw.get("log_sf"), "log_sf"),
            log_sn=parse_float(raw.get("log_sn"), "log_sn"),
        ))
    return GpModel(dataset, hypers)
