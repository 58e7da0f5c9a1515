"""Sandwich covariance for the calibrated estimators.

The two-stage procedure first estimates the change-time model parameters
``eta`` and then solves the calibrated partial-likelihood score for
``theta = (beta, gamma)``.  The asymptotic covariance of ``theta`` therefore
needs both the usual robust (score-residual) piece and a correction for the
estimation error in ``eta``:

    V = bread^{-1} . (1/n) sum_i r_i r_i' . bread^{-1},
    r_i = b_i - [grad_eta U] . [(1/n) sum_j H_j^eta]^{-1} . s_i,

with ``bread`` the negative Jacobian of the (normalized) partial-likelihood
score ``U`` in ``theta``, ``b_i`` the per-subject score residuals, ``s_i``
the per-subject calibration-likelihood scores and ``H_j^eta`` their
Hessians.  ``Cov(theta_hat) = V / n``.

``grad_eta U`` and the calibration Hessian are computed by central finite
differences (step ``1e-5 * (1 + |eta_k|)``); the calibration scores are
analytic.  Basis coefficients sitting on the ``alpha >= 0`` boundary are
dropped from ``eta`` (the derivative does not exist across the constraint).
Models without a finite-dimensional ``eta`` (the NPMLE) skip the correction
term, leaving the plain robust covariance.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import norm

from . import _engine
from .calibration import HistoryGrid, RiskSetCalibration, prob_exposed, probability_matrix
from .data_model import Dataset, History
from .icfit import NpmleFit, PhSplineFit, WeibullFit

_ALPHA_BOUND_TOL = 1e-8


def a_vector(theta: np.ndarray, eta_model, history: History) -> np.ndarray:
    """Per-subject score direction at one history: (exposure part, z)."""
    theta = np.asarray(theta, dtype=float)
    beta = theta[0]
    p = prob_exposed(eta_model, history)
    eb = np.exp(beta)
    first = eb * p / (1.0 + (eb - 1.0) * p)
    z = history.z if history.z is not None else np.zeros(theta.size - 1)
    return np.concatenate([[first], np.asarray(z, dtype=float)])


def _structure_for(dataset: Dataset, model, grid: HistoryGrid | None = None):
    obs, ev = dataset.obs_times, dataset.events
    order = np.argsort(obs[ev], kind="stable")
    ev_times = obs[ev][order]
    if grid is None:
        grid = HistoryGrid.build(dataset, ev_times)
    P = probability_matrix(model, dataset, ev_times, grid=grid)
    return _engine.build_structure(obs, ev, dataset.z, P), grid


def score_u(theta: np.ndarray, eta_model, dataset: Dataset) -> np.ndarray:
    """Normalized partial-likelihood score ``U(theta; eta)`` (gradient / n)."""
    data, _ = _structure_for(dataset, eta_model)
    return _engine.score(data, np.asarray(theta, dtype=float)) / data.n


def b_vectors_from_structure(data: _engine.PartialLikelihoodData,
                             theta: np.ndarray) -> np.ndarray:
    """Per-subject score residuals ``b_i``; their sum is n times the score."""
    theta = np.asarray(theta, dtype=float)
    _, D, phi = _engine._factors(data, theta)
    A = np.exp(theta[0]) * data.p_matrix / D
    rows = np.arange(data.event_times.size)
    own = data.event_subjects
    Z = data.z
    s0 = phi.sum(axis=1)
    mb = (phi * A).sum(axis=1) / s0
    mg = (phi @ Z) / s0[:, None]
    n, dim = data.n, data.dim
    b = np.zeros((n, dim))
    # event terms
    np.add.at(b[:, 0], own, A[rows, own] - mb)
    np.add.at(b[:, 1:], own, Z[own] - mg)
    # risk-set compensator terms
    w = phi / s0[:, None]
    b[:, 0] -= (w * (A - mb[:, None])).sum(axis=0)
    b[:, 1:] -= Z * w.sum(axis=0)[:, None] - w.T @ mg
    return b


def b_vectors(theta: np.ndarray, eta_model, dataset: Dataset) -> np.ndarray:
    data, _ = _structure_for(dataset, eta_model)
    return b_vectors_from_structure(data, np.asarray(theta, dtype=float))


# ---------------------------------------------------------------------------
# Calibration-likelihood derivatives per model family
# ---------------------------------------------------------------------------

def _eta_of(model) -> np.ndarray | None:
    if isinstance(model, PhSplineFit):
        return model.eta
    if isinstance(model, WeibullFit):
        return np.array([model.shape, model.scale])
    return None


def _with_eta(model, eta: np.ndarray):
    if isinstance(model, PhSplineFit):
        return model.with_eta(eta)
    if isinstance(model, WeibullFit):
        return WeibullFit(shape=float(eta[0]), scale=float(eta[1]),
                          loglik=float("nan"), converged=model.converged)
    raise TypeError(f"model {type(model).__name__} has no finite parameter vector")


def _per_subject_scores(model, dataset: Dataset, eta: np.ndarray) -> np.ndarray:
    """Analytic per-subject gradients of the interval-censoring loglik."""
    left, right = dataset.interval_bounds()
    n = left.size
    if isinstance(model, PhSplineFit):
        from .splines import ispline_eval

        q = dataset.q
        p = q.shape[1]
        psi, alpha = eta[:p], eta[p:]
        bl = ispline_eval(model.basis, left)
        finite = ~np.isinf(right)
        br = np.array(bl)
        if finite.any():
            br[finite] = ispline_eval(model.basis, right[finite])
        lam_l, lam_r = bl @ alpha, br @ alpha
        rel = np.exp(q @ psi) if p else np.ones(n)
        sl = np.exp(-lam_l * rel)
        sr = np.where(finite, np.exp(-lam_r * rel), 0.0)
        den = np.maximum(sl - sr, 1e-300)
        dl = -sl * rel / den
        dr = np.where(finite, sr * rel / den, 0.0)
        g_alpha = bl * dl[:, None] + br * dr[:, None]
        g_psi = q * ((-sl * lam_l + np.where(finite, sr * lam_r, 0.0)) * rel / den)[:, None]
        return np.column_stack([g_psi, g_alpha]) if p else g_alpha
    if isinstance(model, WeibullFit):
        shape, scale = eta

        def surv_grads(t):
            with np.errstate(divide="ignore", invalid="ignore"):
                u = np.where(t > 0, t / scale, 1.0)
                pw = np.where(t > 0, u ** shape, 0.0)
                s = np.exp(-pw)
                da = np.where(t > 0, -s * pw * np.log(u), 0.0)
                db = s * pw * shape / scale
            return s, da, db

        sl, dl_a, dl_b = surv_grads(left)
        finite = ~np.isinf(right)
        sr = np.zeros(n)
        dr_a = np.zeros(n)
        dr_b = np.zeros(n)
        if finite.any():
            sr[finite], dr_a[finite], dr_b[finite] = surv_grads(right[finite])
        den = np.maximum(sl - sr, 1e-300)
        return np.column_stack([(dl_a - dr_a) / den, (dl_b - dr_b) / den])
    raise TypeError(f"model {type(model).__name__} has no finite parameter vector")


def _total_score(model, dataset: Dataset, eta: np.ndarray) -> np.ndarray:
    return _per_subject_scores(model, dataset, eta).sum(axis=0)


@dataclass
class SandwichComponents:
    """Ingredients of the sandwich covariance, all in normalized units."""

    bread: np.ndarray                  # -grad_theta U, (dim, dim)
    cross: np.ndarray | None           # grad_eta U restricted to free coords
    calib_hessian: np.ndarray | None   # (1/n) sum_j Hessian of per-subject loglik
    calib_scores: np.ndarray | None    # (n, n_free)
    b: np.ndarray                      # (n, dim)
    r: np.ndarray                      # (n, dim)
    meat: np.ndarray                   # (1/n) sum r r'
    free_eta: np.ndarray | None        # indices kept after boundary dropping

    def summary(self) -> dict:
        return {
            "bread_cond": float(np.linalg.cond(self.bread)),
            "corrected": self.cross is not None,
            "n_free_eta": 0 if self.free_eta is None else int(self.free_eta.size),
        }


def _correction_models(model):
    """(baseline model, all models sharing the common eta perturbation)."""
    if isinstance(model, RiskSetCalibration):
        base = model.models[0]
        if isinstance(base, NpmleFit):
            return None, None
        return base, model
    if isinstance(model, NpmleFit):
        return None, None
    return model, model


def _perturbed(model, delta: np.ndarray):
    """Model with ``eta + delta``; risk-set cells all share the shift."""
    if isinstance(model, RiskSetCalibration):
        cells = [_with_eta(m, np.maximum(_eta_of(m) + delta, _cell_floor(m, delta)))
                 for m in model.models]
        return RiskSetCalibration(grid_times=model.grid_times, models=cells,
                                  family=model.family)
    return _with_eta(model, _eta_of(model) + delta)


def _cell_floor(m, delta: np.ndarray) -> np.ndarray:
    # keep ph-spline alpha coefficients nonnegative under the shared shift
    if isinstance(m, PhSplineFit):
        floor = np.full(delta.size, -np.inf)
        floor[m.psi.size:] = 0.0
        return floor
    return np.full(delta.size, -np.inf)


def sandwich_from_structure(data: _engine.PartialLikelihoodData, theta: np.ndarray,
                            model, dataset: Dataset, grid: HistoryGrid | None = None,
                            correct_for_calibration: bool = True,
                            fd_step: float = 1e-5):
    """Sandwich covariance of ``theta`` given the fitted structure.

    Returns ``(covariance, SandwichComponents)``.  ``model`` may be a plain
    change-time model (ordinary calibration) or a
    :class:`RiskSetCalibration`; in the risk-set case the finite-difference
    perturbation of ``eta`` is applied to every grid cell simultaneously and
    the calibration scores come from the baseline (t = 0) model, so a
    one-cell grid reproduces the ordinary-calibration covariance exactly.
    """
    theta = np.asarray(theta, dtype=float)
    n = data.n
    _, H = _engine.score_and_hessian(data, theta)
    bread = -H / n
    try:
        bread_inv = np.linalg.inv(bread)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError(
            f"bread matrix is singular (cond={np.linalg.cond(bread):.3g})")
    b = b_vectors_from_structure(data, theta)

    base_model, pert_target = _correction_models(model)
    cross = hess = scores = free = None
    r = b.copy()
    if correct_for_calibration and base_model is not None:
        eta0 = _eta_of(base_model)
        dim_eta = eta0.size
        free_mask = np.ones(dim_eta, dtype=bool)
        if isinstance(base_model, PhSplineFit):
            p = base_model.psi.size
            alphas = [base_model.alpha]
            if isinstance(pert_target, RiskSetCalibration):
                alphas = [m.alpha for m in pert_target.models]
            min_alpha = np.min(np.stack(alphas), axis=0)
            free_mask[p:] = min_alpha > _ALPHA_BOUND_TOL
        free = np.flatnonzero(free_mask)
        if free.size:
            if grid is None:
                grid = HistoryGrid.build(dataset, data.event_times)
            steps = fd_step * (1.0 + np.abs(eta0))
            if isinstance(base_model, PhSplineFit):
                p = base_model.psi.size
                amin = np.minimum.reduce([
                    m.alpha for m in (pert_target.models
                                      if isinstance(pert_target, RiskSetCalibration)
                                      else [base_model])])
                steps[p:] = np.minimum(steps[p:], np.maximum(amin / 2.0, 1e-12))
            cross = np.zeros((data.dim, free.size))
            for col, k in enumerate(free):
                delta = np.zeros(dim_eta)
                delta[k] = steps[k]
                up = probability_matrix(_perturbed(pert_target, delta), dataset,
                                        data.event_times, grid=grid)
                delta[k] = -steps[k]
                dn = probability_matrix(_perturbed(pert_target, delta), dataset,
                                        data.event_times, grid=grid)
                s_up = _engine.score(replace(data, p_matrix=up), theta) / n
                s_dn = _engine.score(replace(data, p_matrix=dn), theta) / n
                cross[:, col] = (s_up - s_dn) / (2.0 * steps[k])
            scores_full = _per_subject_scores(base_model, dataset, eta0)
            scores = scores_full[:, free]
            hess = np.zeros((free.size, free.size))
            for col, k in enumerate(free):
                delta = np.zeros(dim_eta)
                delta[k] = steps[k]
                g_up = _total_score(base_model, dataset, eta0 + delta)
                g_dn = _total_score(base_model, dataset, eta0 - delta)
                hess[:, col] = ((g_up - g_dn) / (2.0 * steps[k]))[free]
            hess = 0.5 * (hess + hess.T) / n
            try:
                correction = cross @ np.linalg.solve(hess, scores.T)
            except np.linalg.LinAlgError:
                raise np.linalg.LinAlgError(
                    "calibration Hessian is singular "
                    f"(cond={np.linalg.cond(hess):.3g})")
            r = b - correction.T
    meat = (r.T @ r) / n
    vhat = bread_inv @ meat @ bread_inv
    comps = SandwichComponents(bread=bread, cross=cross, calib_hessian=hess,
                               calib_scores=scores, b=b, r=r, meat=meat,
                               free_eta=free)
    return vhat / n, comps


def sandwich(theta, eta_fit, dataset: Dataset, correct_for_calibration: bool = True):
    """Sandwich covariance from scratch (rebuilds the likelihood structure).

    ``theta`` may be a fitted parameter vector or a
    :class:`~survcalib.estimators.MainFit`.
    """
    theta = np.asarray(getattr(theta, "theta", theta), dtype=float)
    data, grid = _structure_for(dataset, eta_fit)
    cov, _ = sandwich_from_structure(data, theta, eta_fit, dataset, grid=grid,
                                     correct_for_calibration=correct_for_calibration)
    return cov


def confidence_interval(fit, level: float = 0.95) -> np.ndarray:
    """Normal-quantile confidence intervals, one (lo, hi) row per parameter."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must be inside (0, 1)")
    theta = fit.theta
    se = np.sqrt(np.maximum(np.diag(fit.covariance), 0.0))
    z = norm.ppf(0.5 + level / 2.0)
    return np.column_stack([theta - z * se, theta + z * se])
