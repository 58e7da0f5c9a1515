"""Calibration-model fitting from interval-censored change times.

Each subject contributes the probability that the change time falls inside
its censoring interval, ``S(w_left) - S(w_right)`` with ``S(0) = 1`` and the
convention ``S(inf) = 0``; the fitters maximize the product of these terms.

Three model families are supported:

* :func:`fit_npmle` -- the nonparametric maximum likelihood estimator, a
  step function with mass only on the innermost (Turnbull) intervals, found
  by the self-consistency EM of Turnbull (1976);
* :func:`fit_weibull` -- a two-parameter Weibull survival curve, no
  covariates;
* :func:`fit_ph_spline` -- a proportional hazards model whose cumulative
  baseline hazard is a nonnegative combination of I-spline members, fitted
  by a Poisson latent-variable EM in the style of Wang et al. (2016).

All fitters guarantee a nondecreasing log-likelihood across iterations.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .data_model import CensoringInterval
from .splines import SplineBasis, equally_spaced_basis, ispline_eval

_LOG_FLOOR = 1e-300


class CollinearityError(ValueError):
    """Raised when covariate columns are collinear (model unidentifiable)."""


def _interval_arrays(intervals) -> tuple[np.ndarray, np.ndarray]:
    left = np.array([iv.left for iv in intervals], dtype=float)
    right = np.array([iv.right for iv in intervals], dtype=float)
    if left.size == 0:
        raise ValueError("need at least one censoring interval")
    return left, right


# ---------------------------------------------------------------------------
# Nonparametric maximum likelihood (Turnbull)
# ---------------------------------------------------------------------------

def turnbull_intervals(intervals) -> list[tuple[float, float]]:
    """Innermost intervals ``(p, q]`` that can carry NPMLE mass.

    Scans the pooled endpoints in increasing order, resolving ties so that a
    right endpoint at value ``v`` is processed before a left endpoint at the
    same value (mass at exactly ``v`` belongs to intervals closing at ``v``,
    not to those opening there).
    """
    left, right = _interval_arrays(intervals)
    # marker 0 = right endpoint, 1 = left endpoint; sorted tuples put right first
    markers = [(v, 1) for v in left] + [(v, 0) for v in right]
    markers.sort()
    out = []
    pending = None
    for value, kind in markers:
        if kind == 1:
            pending = value
        elif pending is not None:
            out.append((pending, value))
            pending = None
    return out


@dataclass
class NpmleFit:
    """Step-function NPMLE of the change-time survival curve.

    ``support_intervals`` are the Turnbull innermost intervals ``(p, q]`` and
    ``masses`` the probabilities attached to them.  The survival function
    drops at each interval's right endpoint (Kaplan-Meier convention).
    """

    support_intervals: list[tuple[float, float]]
    masses: np.ndarray
    loglik: float
    converged: bool
    n_iter: int
    degenerate: bool = False
    residual: float = float("nan")
    loglik_path: np.ndarray = field(default=None, repr=False)

    def survival(self, v, q=None) -> np.ndarray:
        """P(change time > v); ``q`` accepted for interface parity, ignored."""
        v = np.asarray(v, dtype=float)
        drops = np.array([iv[1] for iv in self.support_intervals])
        keep = drops[None, :] > v[..., None] if v.ndim else drops > v
        return np.asarray(keep @ self.masses)


def npmle_loglik(masses: np.ndarray, membership: np.ndarray) -> float:
    """Interval-censoring log-likelihood of a candidate mass vector."""
    probs = membership @ masses
    return float(np.log(np.maximum(probs, _LOG_FLOOR)).sum())


def npmle_score(masses: np.ndarray, membership: np.ndarray) -> np.ndarray:
    """Gradient of :func:`npmle_loglik` with respect to the masses."""
    probs = np.maximum(membership @ masses, _LOG_FLOOR)
    return membership.T @ (1.0 / probs)


def npmle_membership(intervals, support) -> np.ndarray:
    """Indicator matrix: innermost interval j sits inside observation i."""
    left, right = _interval_arrays(intervals)
    p = np.array([s[0] for s in support])
    q = np.array([s[1] for s in support])
    return ((p[None, :] >= left[:, None]) & (q[None, :] <= right[:, None])).astype(float)


def fit_npmle(intervals, tol: float = 1e-8, max_iter: int = 10000) -> NpmleFit:
    """Self-consistency EM for the interval-censored NPMLE.

    Mass is placed only on the Turnbull innermost intervals; the returned
    masses are a fixed point of the self-consistency equations (residual
    below ``tol``).  A dataset in which every interval is right-censored is
    fitted anyway (all mass past the largest left endpoint) and flagged
    ``degenerate``.
    """
    left, right = _interval_arrays(intervals)
    support = turnbull_intervals(intervals)
    degenerate = bool(np.isinf(right).all())
    A = npmle_membership(intervals, support)
    if (A.sum(axis=1) == 0).any():
        raise ValueError("an observation interval contains no innermost interval")
    m = len(support)
    pi = np.full(m, 1.0 / m)
    n = left.size
    residual = np.inf
    it = 0
    path = [npmle_loglik(pi, A)]
    for it in range(1, max_iter + 1):
        probs = np.maximum(A @ pi, _LOG_FLOOR)
        new = pi * (A.T @ (1.0 / probs)) / n
        new /= new.sum()
        residual = float(np.abs(new - pi).max())
        pi = new
        path.append(npmle_loglik(pi, A))
        if residual < tol:
            break
    return NpmleFit(
        support_intervals=support,
        masses=pi,
        loglik=path[-1],
        converged=residual < tol,
        n_iter=it,
        degenerate=degenerate,
        residual=residual,
        loglik_path=np.asarray(path),
    )


# ---------------------------------------------------------------------------
# Weibull model
# ---------------------------------------------------------------------------

@dataclass
class WeibullFit:
    """Weibull survival curve ``S(v) = exp(-(v / scale) ** shape)``."""

    shape: float
    scale: float
    loglik: float
    converged: bool
    loglik_path: np.ndarray = field(default=None, repr=False)

    def survival(self, v, q=None) -> np.ndarray:
        v = np.maximum(np.asarray(v, dtype=float), 0.0)
        return np.exp(-((v / self.scale) ** self.shape))


def weibull_loglik(params: np.ndarray, left: np.ndarray, right: np.ndarray) -> float:
    shape, scale = params
    if shape <= 0 or scale <= 0:
        return -np.inf
    with np.errstate(over="ignore"):   # extreme line-search trials saturate to 0
        sl = np.exp(-((left / scale) ** shape))
        sr = np.zeros_like(sl)
        finite = ~np.isinf(right)
        if finite.any():
            sr[finite] = np.exp(-((right[finite] / scale) ** shape))
    return float(np.log(np.maximum(sl - sr, _LOG_FLOOR)).sum())


def weibull_score(params: np.ndarray, left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """Analytic gradient of :func:`weibull_loglik` in (shape, scale)."""
    shape, scale = params

    def surv_and_grads(t):
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            u = np.where(t > 0, t / scale, 1.0)  # placeholder where t == 0
            pw = np.where(t > 0, u ** shape, 0.0)
            s = np.exp(-pw)
            ds_dshape = np.where((t > 0) & np.isfinite(pw), -s * pw * np.log(u), 0.0)
            ds_dscale = np.where(np.isfinite(pw), s * pw * shape / scale, 0.0)
        return s, ds_dshape, ds_dscale

    sl, dl_a, dl_b = surv_and_grads(left)
    finite = ~np.isinf(right)
    sr = np.zeros_like(sl)
    dr_a = np.zeros_like(sl)
    dr_b = np.zeros_like(sl)
    if finite.any():
        s, da, db = surv_and_grads(right[finite])
        sr[finite], dr_a[finite], dr_b[finite] = s, da, db
    den = np.maximum(sl - sr, _LOG_FLOOR)
    g_shape = ((dl_a - dr_a) / den).sum()
    g_scale = ((dl_b - dr_b) / den).sum()
    return np.array([g_shape, g_scale])


def fit_weibull(intervals, x0: tuple[float, float] | None = None) -> WeibullFit:
    """Maximum-likelihood Weibull fit to interval-censored change times.

    When no interval has a finite right endpoint the likelihood increases
    toward the scale boundary; a fit is still returned but flagged
    non-converged.
    """
    left, right = _interval_arrays(intervals)
    if np.isinf(right).all():
        scale = 100.0 * max(1.0, float(left.max()))
        return WeibullFit(shape=1.0, scale=scale,
                          loglik=weibull_loglik(np.array([1.0, scale]), left, right),
                          converged=False)
    finite_r = right[~np.isinf(right)]
    if x0 is None:
        x0 = (1.0, float(np.mean(finite_r)))

    def neg(p_log):
        p = np.exp(np.minimum(p_log, 700.0))
        return -weibull_loglik(p, left, right)

    def neg_grad(p_log):
        p = np.exp(np.minimum(p_log, 700.0))
        return -weibull_score(p, left, right) * p

    x_start = np.log(np.asarray(x0))
    path = [-neg(x_start)]
    res = minimize(neg, x_start, jac=neg_grad, method="BFGS",
                   callback=lambda xk: path.append(-neg(xk)),
                   options={"gtol": 1e-12, "maxiter": 500})
    shape, scale = np.exp(res.x)
    path.append(-float(res.fun))
    grad_norm = float(np.linalg.norm(weibull_score(np.array([shape, scale]), left, right)))
    return WeibullFit(shape=float(shape), scale=float(scale),
                      loglik=-float(res.fun), converged=grad_norm < 1e-6,
                      loglik_path=np.asarray(path))


# ---------------------------------------------------------------------------
# Proportional hazards model with I-spline cumulative baseline hazard
# ---------------------------------------------------------------------------

@dataclass
class PhSplineFit:
    """PH model ``S(v | q) = exp(-Lambda0(v) * exp(psi @ q))``.

    ``Lambda0`` is the nonnegative combination ``sum_k alpha_k * b_k`` over
    the I-spline members of ``basis``; ``eta`` is the stacked parameter
    vector ``(psi, alpha)``.
    """

    psi: np.ndarray
    alpha: np.ndarray
    basis: SplineBasis
    loglik: float
    converged: bool
    n_iter: int
    loglik_path: np.ndarray = field(default=None, repr=False)

    @property
    def eta(self) -> np.ndarray:
        return np.concatenate([self.psi, self.alpha])

    def cumulative_hazard(self, v) -> np.ndarray:
        return ispline_eval(self.basis, v) @ self.alpha

    def survival(self, v, q=None) -> np.ndarray:
        lam = self.cumulative_hazard(v)
        if q is None or self.psi.size == 0:
            rel = 1.0
        else:
            rel = np.exp(np.asarray(q, dtype=float) @ self.psi)
        return np.exp(-lam * rel)

    def with_eta(self, eta: np.ndarray) -> "PhSplineFit":
        """Copy of this fit with a replacement parameter vector."""
        p = self.psi.size
        return PhSplineFit(psi=np.asarray(eta[:p], dtype=float),
                           alpha=np.asarray(eta[p:], dtype=float),
                           basis=self.basis, loglik=float("nan"),
                           converged=self.converged, n_iter=self.n_iter)


def _check_collinear(q: np.ndarray):
    if q.size == 0 or q.shape[1] == 0:
        return
    # all-zero columns are inert (coefficient fixed at 0), not collinear
    live = np.flatnonzero(np.abs(q).max(axis=0) > 0)
    if live.size == 0:
        return
    centered = q[:, live] - q[:, live].mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    tol = max(q.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    rank = int((s > max(tol, 1e-10)).sum())
    if rank < live.size:
        # identify columns that add no rank
        bad = []
        for j in range(live.size):
            sub = np.delete(centered, j, axis=1)
            if np.linalg.matrix_rank(np.column_stack([sub, centered[:, j]]), tol=1e-10) == \
               np.linalg.matrix_rank(sub, tol=1e-10):
                bad.append(int(live[j]))
        raise CollinearityError(
            f"calibration covariate columns {bad or [int(j) for j in live]} are "
            "collinear (constant columns are absorbed by the baseline hazard)"
        )


def ph_spline_loglik(eta: np.ndarray, basis: SplineBasis, intervals, q: np.ndarray) -> float:
    """Interval-censoring log-likelihood of the PH I-spline model at ``eta``."""
    left, right = _interval_arrays(intervals)
    q = np.asarray(q, dtype=float)
    p = q.shape[1] if q.ndim == 2 else 0
    psi, alpha = eta[:p], eta[p:]
    bl = ispline_eval(basis, left)
    lam_l = bl @ alpha
    rel = np.exp(q @ psi) if p else np.ones(left.size)
    finite = ~np.isinf(right)
    ll = 0.0
    if (~finite).any():
        ll += float(-(lam_l[~finite] * rel[~finite]).sum())
    if finite.any():
        lam_r = ispline_eval(basis, right[finite]) @ alpha
        dlam = np.maximum(lam_r - lam_l[finite], 0.0)
        term = -lam_l[finite] * rel[finite] + np.log(
            np.maximum(-np.expm1(-dlam * rel[finite]), _LOG_FLOOR))
        ll += float(term.sum())
    return ll


def ph_spline_score(eta: np.ndarray, basis: SplineBasis, intervals, q: np.ndarray) -> np.ndarray:
    """Analytic gradient of :func:`ph_spline_loglik` in ``eta = (psi, alpha)``."""
    left, right = _interval_arrays(intervals)
    q = np.asarray(q, dtype=float)
    p = q.shape[1] if q.ndim == 2 else 0
    psi, alpha = eta[:p], eta[p:]
    n = left.size
    bl = ispline_eval(basis, left)
    finite = ~np.isinf(right)
    br = np.zeros_like(bl)
    if finite.any():
        br[finite] = ispline_eval(basis, right[finite])
    lam_l = bl @ alpha
    lam_r = br @ alpha
    rel = np.exp(q @ psi) if p else np.ones(n)
    sl = np.exp(-lam_l * rel)
    sr = np.where(finite, np.exp(-lam_r * rel), 0.0)
    den = np.maximum(sl - sr, _LOG_FLOOR)
    # d loglik / d Lambda(L) and / d Lambda(R), chained through alpha and psi
    dl = -sl * rel / den
    dr = np.where(finite, sr * rel / den, 0.0)
    g_alpha = bl.T @ dl + br.T @ dr
    if p:
        glin = (-sl * lam_l + np.where(finite, sr * lam_r, 0.0)) * rel / den
        g_psi = q.T @ glin
    else:
        g_psi = np.zeros(0)
    return np.concatenate([g_psi, g_alpha])


def fit_ph_spline(intervals, q: np.ndarray, basis: SplineBasis,
                  tol: float = 1e-7, max_iter: int = 1000,
                  psi0: np.ndarray | None = None,
                  alpha0: np.ndarray | None = None,
                  polish: bool = True) -> PhSplineFit:
    """EM fit of the PH I-spline model from interval-censored data.

    The latent-variable construction follows Wang et al. (2016): independent
    Poisson counts attached to the basis members turn the interval-censoring
    likelihood into a missing-data problem whose M-step has closed-form
    ``alpha`` updates (automatically nonnegative) and a concave profile in
    ``psi`` solved by a few Newton steps.  The observed log-likelihood is
    nondecreasing across iterations; iteration stops when its relative change
    drops below ``tol``.

    EM crawls near the maximizer, so by default the EM solution is polished
    with a projected quasi-Newton pass (L-BFGS-B on the analytic score under
    the ``alpha >= 0`` bounds), which sharpens stationarity without breaking
    the monotone log-likelihood path.

    Parameters
    ----------
    intervals : sequence of CensoringInterval
    q : ndarray, shape (n, p)
        Calibration covariates; may have zero columns.
    basis : SplineBasis
        Must cover every finite interval endpoint.
    psi0, alpha0 : ndarray, optional
        Starting values.  Zero (or omitted) ``alpha0`` entries are bumped to
        a small positive value: zeros are absorbing under the multiplicative
        EM update.
    polish : bool
        Run the quasi-Newton refinement after EM (default True).
    """
    left, right = _interval_arrays(intervals)
    n = left.size
    q = np.asarray(q, dtype=float)
    if q.ndim == 1:
        q = q.reshape(n, -1) if q.size else np.zeros((n, 0))
    if q.shape[0] != n:
        raise ValueError("covariate rows must align with intervals")
    _check_collinear(q)
    p = q.shape[1]
    K = basis.size
    finite = ~np.isinf(right)
    fr = right[finite]
    if fr.size and fr.max() > basis.upper:
        raise ValueError("basis does not cover all finite interval endpoints")

    bl = ispline_eval(basis, left)                      # (n, K)
    br = np.array(bl)
    if finite.any():
        br[finite] = ispline_eval(basis, fr)
    db = np.maximum(br - bl, 0.0)                       # increment, 0 for right-censored
    b_upper = np.where(finite[:, None], br, bl)         # exposure for the Poisson rates

    psi = np.zeros(p) if psi0 is None else np.asarray(psi0, dtype=float).copy()
    if alpha0 is None:
        alpha = np.full(K, 1.0 / K)
    else:
        alpha = np.asarray(alpha0, dtype=float).copy()
        alpha[alpha <= 0] = 1e-3 / K

    def loglik(psi_, alpha_):
        rel = np.exp(q @ psi_) if p else np.ones(n)
        lam_l = bl @ alpha_
        ll = -(lam_l[~finite] * rel[~finite]).sum() if (~finite).any() else 0.0
        if finite.any():
            dlam = db[finite] @ alpha_
            ll += (-lam_l[finite] * rel[finite]
                   + np.log(np.maximum(-np.expm1(-dlam * rel[finite]), _LOG_FLOOR))).sum()
        return float(ll)

    path = [loglik(psi, alpha)]
    it = 0
    converged = False
    for it in range(1, max_iter + 1):
        rel = np.exp(q @ psi) if p else np.ones(n)
        # E-step: expected latent counts; only finite-right subjects carry mass
        omega = np.zeros((n, K))
        if finite.any():
            dlam = db[finite] @ alpha
            denom = np.maximum(-np.expm1(-dlam * rel[finite]), _LOG_FLOOR)
            omega[finite] = (alpha[None, :] * db[finite]) * (rel[finite] / denom)[:, None]
        col_mass = omega.sum(axis=0)                    # Omega_k
        row_mass = omega.sum(axis=1)

        # M-step: closed-form alpha given psi, concave Newton profile in psi
        if p:
            psi = _profile_psi_update(psi, q, b_upper, col_mass, row_mass)
            rel = np.exp(q @ psi)
        denom_k = b_upper.T @ rel                       # (K,)
        with np.errstate(invalid="ignore", divide="ignore"):
            alpha = np.where(denom_k > 0, col_mass / np.maximum(denom_k, _LOG_FLOOR), 0.0)

        path.append(loglik(psi, alpha))
        if abs(path[-1] - path[-2]) < tol * (abs(path[-2]) + 1.0):
            converged = True
            break

    if polish:
        eta0 = np.concatenate([psi, alpha])

        def neg(eta):
            return -ph_spline_loglik(eta, basis, intervals, q)

        def neg_grad(eta):
            return -ph_spline_score(eta, basis, intervals, q)

        bounds = [(None, None)] * p + [(0.0, None)] * K
        res = minimize(neg, eta0, jac=neg_grad, method="L-BFGS-B", bounds=bounds,
                       options={"ftol": 1e-14, "gtol": 1e-10, "maxiter": 500})
        if -res.fun >= path[-1]:
            psi, alpha = res.x[:p], res.x[p:]
            path.append(-float(res.fun))
            converged = converged or bool(res.success)

    return PhSplineFit(psi=psi, alpha=alpha, basis=basis, loglik=path[-1],
                       converged=converged, n_iter=it,
                       loglik_path=np.asarray(path))


def _profile_psi_update(psi: np.ndarray, q: np.ndarray, b_upper: np.ndarray,
                        col_mass: np.ndarray, row_mass: np.ndarray,
                        max_newton: int = 30) -> np.ndarray:
    """Maximize the M-step objective profiled over the alpha coefficients.

    The profile ``g(psi) = sum_k Omega_k log(Omega_k / D_k(psi)) + sum_i
    row_mass_i * psi @ q_i`` (constants dropped) is concave, so undamped
    Newton with step halving is globally safe.
    """
    active = col_mass > 0
    qa = q
    base = qa.T @ row_mass

    def value(ps):
        relv = np.exp(qa @ ps)
        dk = b_upper.T @ relv
        return float(-(col_mass[active] * np.log(np.maximum(dk[active], _LOG_FLOOR))).sum()
                     + ps @ base)

    cur = value(psi)
    for _ in range(max_newton):
        relv = np.exp(qa @ psi)
        w = b_upper * relv[:, None]                     # (n, K)
        dk = np.maximum(w.sum(axis=0), _LOG_FLOOR)
        frac = w / dk[None, :]                          # column-normalized weights
        mean_q = frac.T @ qa                            # (K, p) weighted means
        grad = base - mean_q[active].T @ col_mass[active]
        # Hessian: -(sum_k Omega_k * weighted covariance of q under frac[:, k])
        hess = np.zeros((qa.shape[1], qa.shape[1]))
        for k in np.flatnonzero(active):
            wq = frac[:, k][:, None] * qa
            second = qa.T @ wq
            hess -= col_mass[k] * (second - np.outer(mean_q[k], mean_q[k]))
        gnorm = np.linalg.norm(grad)
        if gnorm < 1e-10 * (1.0 + abs(cur)):
            break
        # lstsq tolerates inert (all-zero) covariate columns
        step = np.linalg.lstsq(hess, -grad, rcond=None)[0]
        if not np.isfinite(step).all() or step @ grad <= 0:
            step = grad / max(gnorm, 1.0)
        lam = 1.0
        for _ in range(30):
            cand = psi + lam * step
            cv = value(cand)
            if cv >= cur - 1e-12:
                psi, cur = cand, cv
                break
            lam *= 0.5
        else:
            break
    return psi


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def survival_at(model, v, q=None):
    """Survival probability of the change time at ``v`` under any fitted model."""
    return model.survival(v, q)


def select_knots(intervals, q: np.ndarray, candidate_m, degree: int = 3,
                 criterion: str = "bic",
                 basis_factory=None) -> tuple[SplineBasis, PhSplineFit, list[dict]]:
    """Pick the interior-knot count minimizing an information criterion.

    ``criterion`` is ``"bic"`` (penalty ``log n`` per free parameter) or
    ``"aic"`` (penalty 2); free parameters are the covariate coefficients
    plus the basis size.  Candidates whose fit fails are skipped with a
    warning.  Returns the winning basis and fit together with a per-candidate
    trace of ``{m, loglik, criterion value, converged}``.
    """
    candidate_m = list(candidate_m)
    if not candidate_m:
        raise ValueError("candidate knot list is empty")
    if criterion not in ("bic", "aic"):
        raise ValueError(f"unknown criterion {criterion!r}; use 'aic' or 'bic'")
    left, right = _interval_arrays(intervals)
    n = left.size
    q = np.asarray(q, dtype=float)
    p = q.shape[1] if q.ndim == 2 else 0
    if basis_factory is None:
        finite_r = right[~np.isinf(right)]
        endpoint = float(max(left.max(), finite_r.max() if finite_r.size else left.max()))
        if endpoint <= 0:
            endpoint = 1.0

        def basis_factory(m):
            return equally_spaced_basis(m, degree, endpoint)

    trace = []
    best = None
    for m in candidate_m:
        try:
            basis = basis_factory(m)
            fit = fit_ph_spline(intervals, q, basis)
        except (ValueError, np.linalg.LinAlgError) as exc:
            warnings.warn(f"knot candidate m={m} failed: {exc}")
            continue
        k_free = p + basis.size
        penalty = k_free * math.log(n) if criterion == "bic" else 2.0 * k_free
        score = -2.0 * fit.loglik + penalty
        trace.append({"m": m, "loglik": fit.loglik, criterion: score,
                      "converged": fit.converged})
        if best is None or score < best[0]:
            best = (score, basis, fit)
    if best is None:
        raise ValueError("every knot candidate failed to fit")
    return best[1], best[2], trace
