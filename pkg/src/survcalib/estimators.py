"""Point estimation: naive baselines and the calibrated estimators.

Four fitting routines share one partial-likelihood engine:

* :func:`fit_lvcf` -- last value carried forward, a deterministic 0/1 path;
* :func:`fit_midi` -- midpoint-imputed change time (LVCF path when the
  change time is right-censored);
* :func:`fit_oc` -- ordinary calibration: exposure probabilities from a
  change-time model fitted once on the whole sample;
* :func:`fit_rsc` -- risk-set calibration: the change-time model is refitted
  on each grouped risk set before computing the probabilities.

Naive fits report the usual model-based covariance (inverse observed
information).  Calibrated fits replace it with the sandwich covariance that
propagates first-stage estimation error; see :mod:`survcalib.inference`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _engine, inference
from .calibration import (HistoryGrid, RiskSetCalibration, naive_indicator_matrix,
                          probability_matrix)
from .data_model import Dataset
from .icfit import CollinearityError, PhSplineFit
from .splines import equally_spaced_basis


@dataclass
class MainFit:
    """Fitted association parameters of the main survival model.

    ``beta`` is the log hazard ratio of the binary exposure, ``gamma`` the
    coefficients of the remaining covariates.  ``covariance`` spans
    ``(beta, gamma)`` in that order; ``se_beta`` is the square root of its
    leading entry.
    """

    method: str
    beta: float
    gamma: np.ndarray
    covariance: np.ndarray
    se_beta: float
    loglik: float
    iterations: int
    converged: bool
    extras: dict = field(default_factory=dict)

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([[self.beta], self.gamma])

    @property
    def hazard_ratio(self) -> float:
        return float(np.exp(self.beta))

    def to_dict(self, level: float = 0.95) -> dict:
        """JSON-ready summary with normal-quantile intervals and p-values."""
        from scipy.stats import norm

        z = norm.ppf(0.5 + level / 2.0)
        se = np.sqrt(np.maximum(np.diag(self.covariance), 0.0))
        est = self.theta
        with np.errstate(divide="ignore", invalid="ignore"):
            pvals = 2.0 * norm.sf(np.abs(np.where(se > 0, est / np.where(se > 0, se, 1.0), np.inf)))
        return {
            "method": self.method,
            "beta": float(self.beta),
            "se_beta": float(self.se_beta),
            "hr": float(np.exp(self.beta)),
            "ci_beta": [float(self.beta - z * self.se_beta), float(self.beta + z * self.se_beta)],
            "ci_hr": [float(np.exp(self.beta - z * self.se_beta)),
                      float(np.exp(self.beta + z * self.se_beta))],
            "p_value": float(pvals[0]),
            "gamma": [float(g) for g in self.gamma],
            "se_gamma": [float(s) for s in se[1:]],
            "loglik": float(self.loglik),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "conf_level": level,
        }


@dataclass
class CoxEngineInput:
    """Raw engine input for a custom exposure specification.

    ``exposure`` maps (subject index, array of event times) to the exposure
    probability (or 0/1 indicator) of that subject at those times.
    """

    obs_times: np.ndarray
    events: np.ndarray
    z: np.ndarray
    exposure: Callable[[int, np.ndarray], np.ndarray]


def cox_fit(inp: CoxEngineInput, theta0: np.ndarray | None = None) -> MainFit:
    """Newton-Raphson fit of the (calibrated) Cox partial likelihood.

    The covariance is the model-based inverse observed information, which is
    the right choice for deterministic exposure paths; calibrated fits go
    through :func:`fit_oc` / :func:`fit_rsc` which replace it.
    """
    obs_times = np.asarray(inp.obs_times, dtype=float)
    events = np.asarray(inp.events, dtype=bool)
    order = np.argsort(obs_times[events], kind="stable")
    ev_times = obs_times[events][order]
    n = obs_times.size
    P = np.zeros((ev_times.size, n))
    for j in range(n):
        P[:, j] = inp.exposure(j, ev_times)
    data = _engine.build_structure(obs_times, events, inp.z, P)
    return _fit_from_structure(data, "COX", theta0=theta0)


def _fit_from_structure(data: _engine.PartialLikelihoodData, method: str,
                        theta0: np.ndarray | None = None) -> MainFit:
    theta, hess, ll, it, converged = _engine.newton_solve(data, theta0=theta0)
    try:
        cov = np.linalg.inv(-hess)
    except np.linalg.LinAlgError as exc:
        raise CollinearityError(f"observed information is singular at the optimum: {exc}")
    return MainFit(method=method, beta=float(theta[0]), gamma=theta[1:],
                   covariance=cov, se_beta=float(np.sqrt(max(cov[0, 0], 0.0))),
                   loglik=ll, iterations=it, converged=converged)


def _naive_fit(dataset: Dataset, method: str) -> MainFit:
    obs, ev = dataset.obs_times, dataset.events
    order = np.argsort(obs[ev], kind="stable")
    ev_times = obs[ev][order]
    grid = HistoryGrid.build(dataset, ev_times)
    P = naive_indicator_matrix(dataset, ev_times, method, grid=grid)
    data = _engine.build_structure(obs, ev, dataset.z, P)
    return _fit_from_structure(data, method.upper())


def fit_lvcf(dataset: Dataset) -> MainFit:
    """Cox fit with the last measured exposure status carried forward."""
    return _naive_fit(dataset, "lvcf")


def fit_midi(dataset: Dataset) -> MainFit:
    """Cox fit with the change time imputed at its interval midpoint."""
    return _naive_fit(dataset, "midi")


def fit_oc(dataset: Dataset, calib_model, variance: str = "sandwich") -> MainFit:
    """Ordinary-calibration estimator.

    ``calib_model`` is any fitted change-time model exposing
    ``survival(v, q)``; it is normally fitted on the same dataset's censoring
    intervals (the sandwich variance assumes so).  ``variance`` is
    ``"sandwich"`` (default) or ``"model"`` to keep the inverse-information
    covariance (useful for diagnostics, not for reporting).
    """
    obs, ev = dataset.obs_times, dataset.events
    order = np.argsort(obs[ev], kind="stable")
    ev_times = obs[ev][order]
    grid = HistoryGrid.build(dataset, ev_times)
    P = probability_matrix(calib_model, dataset, ev_times, grid=grid)
    data = _engine.build_structure(obs, ev, dataset.z, P)
    fit = _fit_from_structure(data, "OC")
    if variance == "sandwich":
        cov, comps = inference.sandwich_from_structure(data, fit.theta, calib_model,
                                                       dataset, grid=grid)
        fit.covariance = cov
        fit.se_beta = float(np.sqrt(max(cov[0, 0], 0.0)))
        fit.extras["sandwich"] = comps.summary()
    return fit


def fit_rsc(dataset: Dataset, grouping_width: float = 0.5,
            calib_model=None, rsc: RiskSetCalibration | None = None,
            family: str = "ph-spline", basis=None,
            variance: str = "sandwich", **fit_kwargs) -> MainFit:
    """Risk-set-calibration estimator.

    The change-time model is refitted on each grouped risk set (grid step
    ``grouping_width``); every event time draws its exposure probabilities
    from the model of its own grid cell.  With a single grid cell the fit
    coincides with ordinary calibration.

    ``rsc`` may carry prefitted risk-set models; otherwise they are fitted
    here (``family``, ``basis`` and extra keyword arguments are forwarded).
    """
    if rsc is None:
        if family == "ph-spline" and basis is None:
            finite = [iv.right for iv in dataset.intervals if not iv.is_right_censored]
            lefts = [iv.left for iv in dataset.intervals]
            endpoint = max(finite) if finite else max(lefts)
            basis = equally_spaced_basis(5, 2, float(endpoint))
        rsc = RiskSetCalibration.fit(dataset, family=family, grid_width=grouping_width,
                                     basis=basis, **fit_kwargs)
    obs, ev = dataset.obs_times, dataset.events
    order = np.argsort(obs[ev], kind="stable")
    ev_times = obs[ev][order]
    grid = HistoryGrid.build(dataset, ev_times)
    P = probability_matrix(rsc, dataset, ev_times, grid=grid)
    data = _engine.build_structure(obs, ev, dataset.z, P)
    fit = _fit_from_structure(data, "RSC")
    fit.extras["grid_times"] = [float(g) for g in rsc.grid_times]
    if variance == "sandwich":
        cov, comps = inference.sandwich_from_structure(data, fit.theta, rsc,
                                                       dataset, grid=grid)
        fit.covariance = cov
        fit.se_beta = float(np.sqrt(max(cov[0, 0], 0.0)))
        fit.extras["sandwich"] = comps.summary()
    return fit
