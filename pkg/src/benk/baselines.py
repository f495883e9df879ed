"""Comparison estimators: Cox and Gaussian-kernel Beran base learners, and
T-, S- and X-learners built from them for censored outcomes."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from benk.errors import Degenerate, NonConvergence, NoUncensored
from benk.survival import (
    StepSurvivalFunction,
    SurvivalDataset,
    batch_beran,
    batch_integrate,
    beran_sf,
)

log = logging.getLogger(__name__)

RIDGE_GRID = (0.1, 0.5, 1.0, 2.0, 5.0)
BANDWIDTH_GRID = tuple(sorted({10.0 ** i for i in range(-3, 4)} | {0.5, 5.0, 50.0, 200.0, 500.0, 700.0}))


# --- Cox proportional hazards -------------------------------------------

@dataclass(frozen=True, eq=False)
class CoxModel:
    """Fitted Cox model; the risk score is ``beta @ (z - center)``."""

    beta: np.ndarray
    center: np.ndarray
    baseline_times: np.ndarray
    baseline_cumhaz: np.ndarray
    ridge_coefficient: float
    converged: bool = True
    iterations: int = 0
    objective_trace: tuple[float, ...] = field(default=(), repr=False)


def _risk_set_sums(x, eta, time, event):
    """Breslow partial log-likelihood pieces grouped by distinct time."""
    uniq, inv = np.unique(time, return_inverse=True)
    shift = eta.max()
    r = np.exp(eta - shift)
    k = uniq.size
    d = x.shape[1]
    s0 = np.bincount(inv, weights=r, minlength=k)[::-1].cumsum()[::-1]
    s1 = np.zeros((k, d))
    np.add.at(s1, inv, r[:, None] * x)
    s1 = s1[::-1].cumsum(axis=0)[::-1]
    s2 = np.zeros((k, d, d))
    np.add.at(s2, inv, r[:, None, None] * x[:, :, None] * x[:, None, :])
    s2 = s2[::-1].cumsum(axis=0)[::-1]
    return inv, shift, s0, s1, s2


def _penalized(x, time, event, beta, ridge):
    eta = x @ beta
    inv, shift, s0, s1, s2 = _risk_set_sums(x, eta, time, event)
    ev = event
    log_s0 = np.log(s0[inv[ev]]) + shift
    value = float(np.sum(eta[ev] - log_s0)) - 0.5 * ridge * float(beta @ beta)
    mean = s1[inv[ev]] / s0[inv[ev]][:, None]
    grad = np.sum(x[ev] - mean, axis=0) - ridge * beta
    second = s2[inv[ev]] / s0[inv[ev]][:, None, None]
    info = np.sum(second - mean[:, :, None] * mean[:, None, :], axis=0) + ridge * np.eye(x.shape[1])
    return value, grad, info


def breslow_cumhaz(dataset: SurvivalDataset, risk: np.ndarray):
    """Breslow baseline cumulative hazard at every distinct observed time."""
    uniq, inv = np.unique(dataset.time, return_inverse=True)
    shift = risk.max()
    r = np.exp(risk - shift)
    s0 = np.bincount(inv, weights=r, minlength=uniq.size)[::-1].cumsum()[::-1]
    deaths = np.bincount(inv, weights=dataset.event.astype(float), minlength=uniq.size)
    return uniq, np.cumsum(deaths / s0) * np.exp(-shift)


def fit_cox(dataset: SurvivalDataset, ridge: float = 0.1, *, max_iter: int = 100, tol: float = 1e-8,
            strict: bool = False) -> CoxModel:
    """Ridge-penalized Breslow partial likelihood by Newton-Raphson with step halving.

    Features are z-scored internally and the penalty acts on the standardized
    coefficients; the returned ``beta`` is on the original feature scale.
    """
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    if not dataset.event.any():
        raise Degenerate("Cox model needs at least one uncensored record")
    x = dataset.x
    center = x.mean(axis=0)
    scale = x.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    xs = (x - center) / scale
    const = x.std(axis=0) == 0
    xs[:, const] = 0.0

    beta = np.zeros(x.shape[1])
    value, grad, info = _penalized(xs, dataset.time, dataset.event, beta, ridge)
    trace = [value]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if np.linalg.norm(grad) < tol:
            converged = True
            break
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(info, grad, rcond=None)[0]
        scale_step = 1.0
        while True:
            cand = beta + scale_step * step
            cand_value, cand_grad, cand_info = _penalized(xs, dataset.time, dataset.event, cand, ridge)
            if np.isfinite(cand_value) and cand_value >= value - 1e-12 * abs(value):
                break
            scale_step *= 0.5
            if scale_step < 1e-10:
                cand, cand_value, cand_grad, cand_info = beta, value, grad, info
                break
        if cand is beta:
            converged = np.linalg.norm(grad) < 1e-6
            break
        beta, value, grad, info = cand, cand_value, cand_grad, cand_info
        trace.append(value)
    else:
        converged = np.linalg.norm(grad) < tol

    beta_raw = np.where(const, 0.0, beta / scale)
    if not converged:
        if strict:
            raise NonConvergence("Cox Newton iterations did not converge", last_iterate=beta_raw)
        log.warning("Cox fit stopped after %d iterations, |grad|=%.3g", it, np.linalg.norm(grad))
    times, cumhaz = breslow_cumhaz(dataset, (x - center) @ beta_raw)
    return CoxModel(beta_raw, center, times, cumhaz, float(ridge), converged, it, tuple(trace))


def _cox_survival(model: CoxModel, z: np.ndarray) -> np.ndarray:
    z = np.atleast_2d(np.asarray(z, dtype=float))
    risk = np.exp((z - model.center) @ model.beta)
    return np.exp(-model.baseline_cumhaz[None, :] * risk[:, None])


def cox_sf(model: CoxModel, z) -> StepSurvivalFunction:
    z = np.asarray(z, dtype=float).reshape(-1)
    if z.shape[0] != model.beta.shape[0]:
        raise ValueError("dimension mismatch")
    return StepSurvivalFunction(model.baseline_times, np.clip(_cox_survival(model, z)[0], 0.0, 1.0))


# --- Gaussian-kernel Beran -----------------------------------------------

@dataclass(frozen=True)
class GaussianBeranConfig:
    bandwidth: float

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")


def gaussian_weights(x: np.ndarray, z, bandwidth: float) -> np.ndarray:
    """Normalized weights ``exp(-|z - x_i|^2 / (2 h^2))`` for each row of ``z``."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    sq = np.sum(z * z, axis=1)[:, None] + np.sum(x * x, axis=1)[None, :] - 2.0 * z @ x.T
    logits = -np.maximum(sq, 0.0) / (2.0 * bandwidth * bandwidth)
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=1, keepdims=True)


def gaussian_beran_sf(dataset: SurvivalDataset, z, config: GaussianBeranConfig) -> StepSurvivalFunction:
    z = np.asarray(z, dtype=float).reshape(-1)
    if z.shape[0] != dataset.d:
        raise ValueError("dimension mismatch")
    return beran_sf(dataset, gaussian_weights(dataset.x, z, config.bandwidth)[0])


def nadaraya_watson(x: np.ndarray, y: np.ndarray, z, bandwidth: float) -> np.ndarray:
    return gaussian_weights(x, z, bandwidth) @ y


def loo_bandwidth(x: np.ndarray, y: np.ndarray, grid=BANDWIDTH_GRID) -> float:
    """Bandwidth minimizing leave-one-out squared error of Nadaraya-Watson regression."""
    if x.shape[0] < 2:
        return float(max(grid))
    sq = np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=-1)
    best = (np.inf, None)
    for h in sorted(grid):
        logits = -sq / (2.0 * h * h)
        np.fill_diagonal(logits, -np.inf)
        logits -= logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        w /= w.sum(axis=1, keepdims=True)
        err = float(np.mean((w @ y - y) ** 2))
        if err < best[0]:
            best = (err, h)
    return best[1]


# --- base learners ---------------------------------------------------------

class CoxLearner:
    kind = "cox"

    def __init__(self, ridge: float = 0.1):
        self.ridge = ridge

    def fit(self, dataset: SurvivalDataset) -> "CoxLearner":
        self.model_ = fit_cox(dataset, self.ridge)
        return self

    def sf(self, z) -> StepSurvivalFunction:
        return cox_sf(self.model_, z)

    def integrate(self, z, grid=None) -> np.ndarray:
        """Integral of S(.|z) over ``grid`` (default: the training times) per row of ``z``."""
        surv = _cox_survival(self.model_, z)
        return batch_integrate(self.model_.baseline_times, surv, grid)

    def hyperparams(self) -> dict:
        return {"ridge": self.ridge}


class GaussianBeranLearner:
    kind = "gaussian-beran"

    def __init__(self, bandwidth: float = 1.0):
        self.config = GaussianBeranConfig(bandwidth)

    def fit(self, dataset: SurvivalDataset) -> "GaussianBeranLearner":
        self.refs_ = dataset
        return self

    def sf(self, z) -> StepSurvivalFunction:
        return gaussian_beran_sf(self.refs_, z, self.config)

    def integrate(self, z, grid=None, chunk: int = 256) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=float))
        out = np.empty(z.shape[0])
        for start in range(0, z.shape[0], chunk):
            w = gaussian_weights(self.refs_.x, z[start:start + chunk], self.config.bandwidth)
            times, surv = batch_beran(w, self.refs_)
            out[start:start + chunk] = batch_integrate(times, surv, grid)
        return out

    def hyperparams(self) -> dict:
        return {"bandwidth": self.config.bandwidth}


BaseLearner = CoxLearner | GaussianBeranLearner


def make_base(kind: str, value: float) -> BaseLearner:
    if kind == "cox":
        return CoxLearner(value)
    if kind in ("nw", "gaussian-beran"):
        return GaussianBeranLearner(value)
    raise ValueError(f"unknown base learner {kind!r}")


def _clone(base: BaseLearner) -> BaseLearner:
    return CoxLearner(base.ridge) if isinstance(base, CoxLearner) else GaussianBeranLearner(base.config.bandwidth)


def _grid(ds: SurvivalDataset) -> np.ndarray:
    return np.unique(ds.time)


def _maybe_scalar(z, out):
    return float(out[0]) if np.ndim(z) == 1 else out


# --- meta-learners ----------------------------------------------------------

def t_learner_cate(base: BaseLearner, controls: SurvivalDataset, treatments: SurvivalDataset, z):
    """Separate base fits per group; difference of expected lifetimes at ``z``."""
    zz = np.atleast_2d(np.asarray(z, dtype=float))
    m0 = _clone(base).fit(controls)
    m1 = _clone(base).fit(treatments)
    return _maybe_scalar(z, m1.integrate(zz) - m0.integrate(zz))


def pooled_dataset(controls: SurvivalDataset, treatments: SurvivalDataset) -> SurvivalDataset:
    x = np.vstack([
        np.column_stack([controls.x, np.zeros(len(controls))]),
        np.column_stack([treatments.x, np.ones(len(treatments))]),
    ])
    return SurvivalDataset(
        x,
        np.concatenate([controls.time, treatments.time]),
        np.concatenate([controls.event, treatments.event]),
        np.concatenate([np.zeros(len(controls)), np.ones(len(treatments))]).astype(np.int8),
    )


def s_learner_cate(base: BaseLearner, controls: SurvivalDataset, treatments: SurvivalDataset, z):
    """One base fit on the pooled data with the group as an extra feature.

    S(.|z, 1) is integrated over the treatment time grid and S(.|z, 0) over
    the control time grid.
    """
    zz = np.atleast_2d(np.asarray(z, dtype=float))
    model = _clone(base).fit(pooled_dataset(controls, treatments))
    ones, zeros = np.ones((zz.shape[0], 1)), np.zeros((zz.shape[0], 1))
    e1 = model.integrate(np.hstack([zz, ones]), _grid(treatments))
    e0 = model.integrate(np.hstack([zz, zeros]), _grid(controls))
    return _maybe_scalar(z, e1 - e0)


@dataclass
class XLearnerFit:
    tau0_bandwidth: float
    tau1_bandwidth: float
    alpha: float


def x_learner_cate(base: BaseLearner, controls: SurvivalDataset, treatments: SurvivalDataset, z,
                   alpha: float | None = None, tau_bandwidth: tuple[float, float] | None = None,
                   return_fit: bool = False):
    """Imputed-effect X-learner with expected lifetimes as outcome functions.

    Imputed effects use uncensored records only; the second-stage regressions
    are Gaussian Nadaraya-Watson with leave-one-out bandwidths unless
    ``tau_bandwidth`` is given.  ``alpha`` defaults to the treated fraction.
    """
    ev0, ev1 = controls.event, treatments.event
    if not ev0.any():
        raise NoUncensored("no uncensored control record")
    if not ev1.any():
        raise NoUncensored("no uncensored treatment record")
    if alpha is None:
        alpha = len(treatments) / (len(controls) + len(treatments))
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    zz = np.atleast_2d(np.asarray(z, dtype=float))
    m0 = _clone(base).fit(controls)
    m1 = _clone(base).fit(treatments)
    x0, f = controls.x[ev0], controls.time[ev0]
    x1, h = treatments.x[ev1], treatments.time[ev1]
    d1 = h - m0.integrate(x1)
    d0 = m1.integrate(x0) - f
    if tau_bandwidth is None:
        tau_bandwidth = (loo_bandwidth(x0, d0), loo_bandwidth(x1, d1))
    tau0 = nadaraya_watson(x0, d0, zz, tau_bandwidth[0])
    tau1 = nadaraya_watson(x1, d1, zz, tau_bandwidth[1])
    out = _maybe_scalar(z, alpha * tau0 + (1.0 - alpha) * tau1)
    if return_fit:
        return out, XLearnerFit(tau_bandwidth[0], tau_bandwidth[1], alpha)
    return out
