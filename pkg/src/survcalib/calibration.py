"""Conditional exposure probabilities and risk-set recalibration.

Given a fitted change-time model, the probability that a subject is exposed
at time ``t`` conditional on the observed history is 1 once a positive
status has been recorded, and otherwise is the conditional probability of a
status change inside ``(w_bar, t]``:

    P(X(t) = 1 | history) = [S(w_bar | q) - S(t | q)] / S(w_bar | q).

The partial-likelihood factor for a subject then uses the closed-form
moment generating function of a Bernoulli indicator,
``E[exp(b * X(t)) | history] = 1 + P(X(t) = 1 | history) * (exp(b) - 1)``.

Risk-set calibration refits the change-time model on each (grouped) risk
set so the plugged-in distribution conditions on survival to ``t``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .data_model import Dataset, History, history_at
from .icfit import NpmleFit, PhSplineFit, WeibullFit, fit_npmle, fit_ph_spline, fit_weibull

logger = logging.getLogger(__name__)


class InconsistentModelError(ValueError):
    """The model assigns probability zero to an observed non-exposure."""


def prob_exposed(model, history: History) -> float:
    """P(X(t) = 1 | observed history) under a fitted change-time model."""
    if history.x_at_wbar:
        return 1.0
    if history.t <= history.w_bar:
        return 0.0
    s_wbar = float(model.survival(history.w_bar, history.q))
    if s_wbar <= 0.0:
        raise InconsistentModelError(
            f"model puts zero probability on remaining unexposed at t={history.w_bar}"
        )
    s_t = float(model.survival(history.t, history.q))
    return float(np.clip((s_wbar - s_t) / s_wbar, 0.0, 1.0))


def mgf_expectation(beta: float, p: float) -> float:
    """E[exp(beta * X) | history] for exposure probability ``p``."""
    return 1.0 + p * (math.expm1(beta))


@dataclass
class RiskSetCalibration:
    """Change-time models refitted on grouped risk sets.

    ``grid_times`` is increasing and starts at 0; ``models[i]`` was fitted on
    the subjects still under observation at ``grid_times[i]``.  Event times
    are served by the model of the largest grid time not exceeding them.
    """

    grid_times: np.ndarray
    models: list
    family: str

    def model_for(self, event_time: float):
        idx = int(np.searchsorted(self.grid_times, event_time, side="right")) - 1
        return self.models[max(idx, 0)]

    def cell_indices(self, times: np.ndarray) -> np.ndarray:
        idx = np.searchsorted(self.grid_times, times, side="right") - 1
        return np.maximum(idx, 0)

    @classmethod
    def fit(cls, dataset: Dataset, family: str = "ph-spline", grid_width: float = 0.5,
            basis=None, min_informative: int = 1, baseline_model=None,
            **fit_kwargs) -> "RiskSetCalibration":
        """Refit the calibration model on every grouped risk set.

        The grid spans ``0, grid_width, 2 * grid_width, ...`` up to the last
        event time.  A cell whose refit fails (or that lacks at least
        ``min_informative`` finite-right intervals) falls back to the most
        recent successful model, since shrinking risk sets destabilize the
        later refits.  ``baseline_model`` may carry an already fitted
        whole-sample model to reuse for the first cell.
        """
        if grid_width <= 0:
            raise ValueError("grid_width must be positive")
        event_times = dataset.obs_times[dataset.events]
        if event_times.size == 0:
            raise ValueError("dataset has no events to calibrate against")
        top = float(event_times.max())
        n_cells = int(math.floor(top / grid_width)) + 1
        grid = np.arange(n_cells) * grid_width

        models = []
        prev = None
        prev_fit = None
        if baseline_model is not None:
            models.append(baseline_model)
            prev = prev_fit = baseline_model
            grid_rest = grid[1:]
        else:
            grid_rest = grid
        for g in grid_rest:
            at_risk = dataset.obs_times >= g
            sub = dataset.subset(at_risk) if g > 0 else dataset
            model = None
            finite_rights = sum(1 for iv in sub.intervals if not iv.is_right_censored)
            if finite_rights >= min_informative:
                try:
                    model = _fit_family(family, sub, basis=basis, warm=prev_fit, **fit_kwargs)
                except (ValueError, np.linalg.LinAlgError) as exc:
                    logger.warning("risk-set refit at t=%.3g failed (%s); falling back", g, exc)
            else:
                logger.warning(
                    "risk-set refit at t=%.3g has %d informative intervals; falling back",
                    g, finite_rights)
            if model is None:
                if prev is None:
                    raise ValueError("baseline calibration fit failed; cannot build risk sets")
                model = prev
            else:
                converged = getattr(model, "converged", True)
                if not converged and prev is not None:
                    logger.warning("risk-set refit at t=%.3g did not converge; falling back", g)
                    model = prev
                else:
                    prev_fit = model
            models.append(model)
            prev = model
        return cls(grid_times=grid, models=models, family=family)


def _fit_family(family: str, dataset: Dataset, basis=None, warm=None, **kw):
    if family == "npmle":
        return fit_npmle(dataset.intervals, **kw)
    if family == "weibull":
        x0 = (warm.shape, warm.scale) if isinstance(warm, WeibullFit) else None
        return fit_weibull(dataset.intervals, x0=x0, **kw)
    if family == "ph-spline":
        if basis is None:
            raise ValueError("ph-spline family needs a basis")
        psi0 = warm.psi if isinstance(warm, PhSplineFit) else None
        alpha0 = warm.alpha if isinstance(warm, PhSplineFit) else None
        return fit_ph_spline(dataset.intervals, dataset.q, basis,
                             psi0=psi0, alpha0=alpha0, **kw)
    raise ValueError(f"unknown calibration family {family!r}")


def rsc_prob_exposed(rsc: RiskSetCalibration, event_time: float, history: History) -> float:
    """Exposure probability under the risk-set model in force at ``event_time``."""
    return prob_exposed(rsc.model_for(event_time), history)


# ---------------------------------------------------------------------------
# Vectorized probability matrices for the partial-likelihood engine
# ---------------------------------------------------------------------------

@dataclass
class HistoryGrid:
    """Precomputed observed-history lookups for a (times x subjects) grid.

    ``wbar_index[e, j]`` points into ``table_times`` at the last measurement
    time of subject ``j`` at or before ``times[e]`` (index 0 is the synthetic
    time 0); ``xbar`` carries the measured status there.
    """

    times: np.ndarray
    at_risk: np.ndarray        # (E, n) bool
    wbar_index: np.ndarray     # (E, n) int, into table_times
    xbar: np.ndarray           # (E, n) bool
    table_times: np.ndarray    # unique lookup times, table_times[0] == 0

    @classmethod
    def build(cls, dataset: Dataset, times: np.ndarray) -> "HistoryGrid":
        times = np.asarray(times, dtype=float)
        n = len(dataset)
        all_w = np.concatenate([s.quest_times for s in dataset.subjects]) if n else np.zeros(0)
        table = np.unique(np.concatenate([[0.0], all_w]))
        E = times.size
        wbar_index = np.zeros((E, n), dtype=np.int32)
        xbar = np.zeros((E, n), dtype=bool)
        for j, s in enumerate(dataset.subjects):
            if s.n_measurements == 0:
                continue
            pos = np.searchsorted(s.quest_times, times, side="right") - 1
            has = pos >= 0
            wb = np.where(has, s.quest_times[np.maximum(pos, 0)], 0.0)
            wbar_index[:, j] = np.searchsorted(table, wb)
            xbar[:, j] = np.where(has, s.quest_status[np.maximum(pos, 0)], False)
        at_risk = dataset.obs_times[None, :] >= times[:, None]
        return cls(times=times, at_risk=at_risk, wbar_index=wbar_index,
                   xbar=xbar, table_times=table)


def probability_matrix(model, dataset: Dataset, times: np.ndarray,
                       grid: HistoryGrid | None = None) -> np.ndarray:
    """Matrix of P(X_j(t_e) = 1 | history) for every time row and subject.

    Entries where the subject is no longer at risk are filled with 0; the
    engine masks them out anyway.
    """
    if grid is None:
        grid = HistoryGrid.build(dataset, times)
    if isinstance(model, RiskSetCalibration):
        return _rsc_probability_matrix(model, dataset, grid)
    idx = grid.wbar_index
    if isinstance(model, PhSplineFit):
        lam_tab = model.cumulative_hazard(grid.table_times)
        lam_t = model.cumulative_hazard(grid.times)
        if model.psi.size:
            rel = np.exp(dataset.q @ model.psi)
        else:
            rel = np.ones(len(dataset))
        # conditional change probability over (w_bar, t]
        dlam = np.maximum(lam_t[:, None] - lam_tab[idx], 0.0)
        p = -np.expm1(-dlam * rel[None, :])
    else:
        # covariate-free families: one survival curve serves every subject
        s_tab = np.asarray(model.survival(grid.table_times), dtype=float)
        s_tim = np.asarray(model.survival(grid.times), dtype=float)
        s_wbar = s_tab[idx]
        bad = (s_wbar <= 0) & ~grid.xbar & grid.at_risk
        if bad.any():
            raise InconsistentModelError(
                "model puts zero probability on an observed unexposed history")
        with np.errstate(divide="ignore", invalid="ignore"):
            p = np.where(s_wbar > 0,
                         1.0 - s_tim[:, None] / np.maximum(s_wbar, 1e-300), 1.0)
        p = np.clip(p, 0.0, 1.0)
    p = np.where(grid.xbar, 1.0, np.clip(p, 0.0, 1.0))
    return np.where(grid.at_risk, p, 0.0)


def _rsc_probability_matrix(rsc: RiskSetCalibration, dataset: Dataset,
                            grid: HistoryGrid) -> np.ndarray:
    cells = rsc.cell_indices(grid.times)
    p = np.zeros((grid.times.size, len(dataset)))
    for cell in np.unique(cells):
        rows = np.flatnonzero(cells == cell)
        sub = HistoryGrid(times=grid.times[rows], at_risk=grid.at_risk[rows],
                          wbar_index=grid.wbar_index[rows], xbar=grid.xbar[rows],
                          table_times=grid.table_times)
        p[rows] = probability_matrix(rsc.models[cell], dataset, grid.times[rows], grid=sub)
    return p


def naive_indicator_matrix(dataset: Dataset, times: np.ndarray, method: str,
                           grid: HistoryGrid | None = None) -> np.ndarray:
    """Deterministic 0/1 exposure paths for the naive imputation methods.

    ``method`` is ``"lvcf"`` (carry the last measured status forward) or
    ``"midi"`` (midpoint-imputed change time; right-censored change times
    keep the LVCF path).
    """
    if grid is None:
        grid = HistoryGrid.build(dataset, times)
    if method == "lvcf":
        x = grid.xbar.astype(float)
    elif method == "midi":
        left = np.array([iv.left for iv in dataset.intervals])
        right = np.array([iv.right for iv in dataset.intervals])
        vhat = np.where(np.isinf(right), np.inf, 0.5 * (left + right))
        x = (grid.times[:, None] >= vhat[None, :]).astype(float)
    else:
        raise ValueError(f"unknown naive method {method!r}")
    return np.where(grid.at_risk, x, 0.0)


def probability_trajectories(model, dataset: Dataset, times: np.ndarray) -> np.ndarray:
    """Per-subject exposure-probability paths (len(times), n) for plotting."""
    grid = HistoryGrid.build(dataset, times)
    grid = HistoryGrid(times=grid.times,
                       at_risk=np.ones_like(grid.at_risk),
                       wbar_index=grid.wbar_index, xbar=grid.xbar,
                       table_times=grid.table_times)
    return probability_matrix(model, dataset, times, grid=grid)
