"""Newton-Raphson core for the calibrated Cox partial likelihood.

The engine works on a dense (event rows x subjects) probability matrix
``P``: entry ``P[e, j]`` is the exposure probability of subject ``j`` at the
``e``-th event time (0/1 for the naive methods, a calibrated probability
otherwise).  Each at-risk subject contributes the factor

    phi_j(t_e) = exp(gamma @ z_j) * (1 + P[e, j] * (exp(beta) - 1)),

which equals ``exp(beta * X_j(t_e) + gamma @ z_j)`` exactly when ``P`` is
degenerate, so one code path serves naive and calibrated fits alike.  Ties
are handled with the Breslow convention: every event keeps the full
risk-set denominator at its time.

Z columns are centered internally for numerical stability; the partial
likelihood is invariant to that shift.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .icfit import CollinearityError


@dataclass
class PartialLikelihoodData:
    """Precomputed structure shared by loglik/score/Hessian evaluations."""

    event_times: np.ndarray      # (E,) ascending
    event_subjects: np.ndarray   # (E,) subject index of each event
    at_risk: np.ndarray          # (E, n) bool
    z: np.ndarray                # (n, p), centered
    p_matrix: np.ndarray         # (E, n) exposure probabilities
    n: int

    @property
    def dim(self) -> int:
        return 1 + self.z.shape[1]


def build_structure(obs_times: np.ndarray, events: np.ndarray, z: np.ndarray,
                    p_matrix: np.ndarray) -> PartialLikelihoodData:
    obs_times = np.asarray(obs_times, dtype=float)
    events = np.asarray(events, dtype=bool)
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z.reshape(-1, 1) if z.size else np.zeros((obs_times.size, 0))
    if not events.any():
        raise ValueError("no events: the partial likelihood is empty")
    order = np.argsort(obs_times[events], kind="stable")
    ev_idx = np.flatnonzero(events)[order]
    ev_times = obs_times[ev_idx]
    at_risk = obs_times[None, :] >= ev_times[:, None]
    zc = z - z.mean(axis=0) if z.size else z
    return PartialLikelihoodData(event_times=ev_times, event_subjects=ev_idx,
                                 at_risk=at_risk, z=zc,
                                 p_matrix=np.asarray(p_matrix, dtype=float),
                                 n=obs_times.size)


def _factors(data: PartialLikelihoodData, theta: np.ndarray):
    """Per-(event, subject) likelihood factors phi (masked) and D."""
    beta, gamma = theta[0], theta[1:]
    expb = np.exp(beta)
    c = np.exp(data.z @ gamma) if gamma.size else np.ones(data.n)
    D = 1.0 + (expb - 1.0) * data.p_matrix
    phi = np.where(data.at_risk, c[None, :] * D, 0.0)
    return c, D, phi


def _loglik_from(data, theta, D, phi) -> float:
    gamma = theta[1:]
    rows = np.arange(data.event_times.size)
    own = data.event_subjects
    s0 = phi.sum(axis=1)
    lin = data.z[own] @ gamma if gamma.size else 0.0
    return float((lin + np.log(D[rows, own]) - np.log(s0)).sum())


def loglik(data: PartialLikelihoodData, theta: np.ndarray) -> float:
    theta = np.asarray(theta, dtype=float)
    _, D, phi = _factors(data, theta)
    return _loglik_from(data, theta, D, phi)


def score(data: PartialLikelihoodData, theta: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    expb = np.exp(theta[0])
    _, D, phi = _factors(data, theta)
    A = expb * data.p_matrix / D
    rows = np.arange(data.event_times.size)
    own = data.event_subjects
    s0 = phi.sum(axis=1)
    s1b = (phi * A).sum(axis=1)
    s1g = phi @ data.z
    g_beta = (A[rows, own] - s1b / s0).sum()
    g_gamma = (data.z[own] - s1g / s0[:, None]).sum(axis=0)
    return np.concatenate([[g_beta], g_gamma])


def score_and_hessian(data: PartialLikelihoodData, theta: np.ndarray,
                      with_loglik: bool = False):
    theta = np.asarray(theta, dtype=float)
    expb = np.exp(theta[0])
    P = data.p_matrix
    _, D, phi = _factors(data, theta)
    A = expb * P / D                      # d log phi / d beta
    hb = A * (1.0 - P) / D                # d^2 log phi / d beta^2
    rows = np.arange(data.event_times.size)
    own = data.event_subjects
    Z = data.z
    s0 = phi.sum(axis=1)
    phiA = phi * A
    s1b = phiA.sum(axis=1)
    s1g = phi @ Z
    mb = s1b / s0
    mg = s1g / s0[:, None]

    g_beta = (A[rows, own] - mb).sum()
    g_gamma = (Z[own] - mg).sum(axis=0)
    grad = np.concatenate([[g_beta], g_gamma])

    # Hessian blocks; per-subject weights collapse the event sums.
    hbb = (hb[rows, own].sum()
           - float(((phi * (A * A + hb)).sum(axis=1) / s0 - mb * mb).sum()))
    wA = (phiA / s0[:, None]).sum(axis=0)
    hbg = -(wA @ Z - mb @ mg)
    wj = (phi / s0[:, None]).sum(axis=0)
    hgg = -((Z.T * wj) @ Z - mg.T @ mg)
    dim = data.dim
    H = np.zeros((dim, dim))
    H[0, 0] = hbb
    H[0, 1:] = hbg
    H[1:, 0] = hbg
    H[1:, 1:] = hgg
    if with_loglik:
        return grad, H, _loglik_from(data, theta, D, phi)
    return grad, H


def newton_solve(data: PartialLikelihoodData, theta0: np.ndarray | None = None,
                 score_tol: float = 1e-9, step_tol: float = 1e-9,
                 max_iter: int = 100, max_halvings: int = 20):
    """Maximize the partial likelihood by damped Newton-Raphson.

    Returns ``(theta, hessian, loglik, n_iter, converged)``.  Raises
    :class:`CollinearityError` when the information matrix is numerically
    singular (no usable curvature direction).
    """
    dim = data.dim
    theta = np.zeros(dim) if theta0 is None else np.asarray(theta0, dtype=float).copy()
    converged = False
    it = 0
    grad, H, ll = score_and_hessian(data, theta, with_loglik=True)
    for it in range(1, max_iter + 1):
        cond_fail = not np.isfinite(H).all()
        if not cond_fail:
            try:
                step = np.linalg.solve(-H, grad)
            except np.linalg.LinAlgError:
                cond_fail = True
        if cond_fail or np.abs(np.diag(H)).min() < 1e-12 * max(1.0, np.abs(np.diag(H)).max()):
            raise CollinearityError(
                "singular information matrix: a covariate (or the exposure "
                "probability) has no contrast over the risk sets")
        lam = 1.0
        accepted = False
        for _ in range(max_halvings + 1):
            cand = theta + lam * step
            cand_ll = loglik(data, cand)
            if cand_ll >= ll - 1e-12:
                theta, ll = cand, cand_ll
                accepted = True
                break
            lam *= 0.5
        if not accepted:
            break
        small = np.linalg.norm(grad) < score_tol and lam * np.linalg.norm(step) < step_tol
        grad, H, ll = score_and_hessian(data, theta, with_loglik=True)
        if small:
            converged = True
            break
    converged = converged or (np.linalg.norm(grad) < score_tol)
    return theta, H, ll, it, converged
