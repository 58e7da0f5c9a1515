"""Monotone I-spline basis and its M-spline derivative basis.

The cumulative-hazard model used by the interval-censored proportional
hazards fitter is a nonnegative combination of integrated spline basis
functions (I-splines, Ramsay 1988).  Each I-spline member is nondecreasing,
0 at the lower support boundary and 1 at the upper one, so any coefficient
vector with nonnegative entries yields a valid monotone cumulative hazard.
The M-splines are their derivatives: nonnegative densities, each integrating
to one over the support.

Evaluation is recurrence-based (Cox-de Boor).  Writing ``d`` for the
polynomial degree of the I-spline members, the M-splines are the order-``d``
M-splines on a knot vector with ``d``-fold boundary multiplicity, and each
I-spline is the suffix sum of the order-``d+1`` normalized B-splines on the
same interior knots: integrating the scaled B-spline identity
``M_i = d * N_i / (t_{i+d} - t_i)`` gives ``I_i(x) = sum_{j > i} N_j(x)``
with the N of one order higher.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SplineBasis:
    """Shared configuration of an I-spline/M-spline basis family.

    Parameters
    ----------
    degree : int
        Polynomial degree of the integrated (I-spline) members; the M-spline
        members are piecewise polynomials of degree ``degree - 1``.
    interior_knots : array-like
        Strictly increasing knots inside ``(lower, upper)``.
    lower, upper : float
        Support boundaries.  Members are 0 below ``lower``; I-spline members
        are 1 above ``upper``.
    """

    degree: int
    interior_knots: tuple[float, ...]
    lower: float
    upper: float

    def __post_init__(self):
        if self.degree < 1:
            raise ValueError("degree must be a positive integer")
        knots = tuple(float(k) for k in self.interior_knots)
        if any(k2 <= k1 for k1, k2 in zip(knots, knots[1:])):
            raise ValueError("interior knots must be strictly increasing")
        if knots and not (self.lower < knots[0] and knots[-1] < self.upper):
            raise ValueError("interior knots must lie strictly inside (lower, upper)")
        if not self.lower < self.upper:
            raise ValueError("lower boundary must be below upper boundary")
        object.__setattr__(self, "interior_knots", knots)

    @property
    def size(self) -> int:
        """Number of basis members (interior knot count + degree)."""
        return len(self.interior_knots) + self.degree

    def knot_vector(self, order: int) -> np.ndarray:
        """Knot vector with ``order``-fold boundary multiplicity."""
        return np.concatenate([
            np.full(order, self.lower),
            np.asarray(self.interior_knots, dtype=float),
            np.full(order, self.upper),
        ])


def equally_spaced_basis(n_interior: int, degree: int, max_endpoint: float,
                         pad: float = 1.001) -> SplineBasis:
    """Default basis: equally spaced interior knots over ``[0, max_endpoint]``.

    The upper boundary is ``max_endpoint * pad`` so every observed finite
    time stays strictly interior to the support.
    """
    if max_endpoint <= 0:
        raise ValueError("max_endpoint must be positive")
    upper = max_endpoint * pad
    knots = np.linspace(0.0, upper, n_interior + 2)[1:-1]
    return SplineBasis(degree=degree, interior_knots=tuple(knots), lower=0.0, upper=upper)


def _bspline_columns(knots: np.ndarray, order: int, x: np.ndarray) -> np.ndarray:
    """Normalized (partition-of-unity) B-splines of ``order`` at points ``x``.

    Returns an array of shape ``(len(x), len(knots) - order)``.  Points are
    assumed to lie within ``[knots[0], knots[-1]]``; the right boundary is
    folded into the last nondegenerate span so the basis is left-continuous
    there.
    """
    nb = len(knots) - order
    out = np.zeros((x.size, nb + order - 1))
    # Order-1 indicators over half-open spans [t_i, t_{i+1}).
    upper = knots[-1]
    last = np.searchsorted(knots, upper, side="left") - 1
    span = np.searchsorted(knots, x, side="right") - 1
    span = np.where(x >= upper, last, span)
    valid = (span >= 0) & (span < nb + order - 1)
    out[valid, span[valid]] = 1.0
    for r in range(2, order + 1):
        prev = out
        ncur = len(knots) - r
        cur = np.zeros((x.size, ncur))
        for i in range(ncur):
            left_den = knots[i + r - 1] - knots[i]
            right_den = knots[i + r] - knots[i + 1]
            acc = 0.0
            if left_den > 0:
                acc = (x - knots[i]) / left_den * prev[:, i]
            if right_den > 0:
                acc = acc + (knots[i + r] - x) / right_den * prev[:, i + 1]
            cur[:, i] = acc
        out = cur
    return out


def mspline_eval(basis: SplineBasis, v) -> np.ndarray:
    """Evaluate all M-spline members at ``v``.

    Returns shape ``(basis.size,)`` for scalar input, ``(len(v), basis.size)``
    otherwise.  Values are nonnegative and zero outside the support; each
    member integrates to one over ``[lower, upper]``.
    """
    scalar = np.isscalar(v)
    x = np.atleast_1d(np.asarray(v, dtype=float))
    order = basis.degree
    knots = basis.knot_vector(order)
    inside = (x >= basis.lower) & (x <= basis.upper)
    vals = np.zeros((x.size, basis.size))
    if inside.any():
        nb = _bspline_columns(knots, order, x[inside])
        widths = knots[order:] - knots[:-order]
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(widths > 0, order / np.where(widths > 0, widths, 1.0), 0.0)
        vals[inside] = nb * scale
    return vals[0] if scalar else vals


def ispline_eval(basis: SplineBasis, v) -> np.ndarray:
    """Evaluate all I-spline members at ``v``.

    Each member is the running integral of the matching M-spline member:
    nondecreasing, 0 at or below ``lower`` and 1 at or above ``upper``.
    Shapes as in :func:`mspline_eval`.
    """
    scalar = np.isscalar(v)
    x = np.atleast_1d(np.asarray(v, dtype=float))
    order = basis.degree + 1
    knots = basis.knot_vector(order)
    vals = np.zeros((x.size, basis.size))
    vals[x >= basis.upper] = 1.0
    inside = (x >= basis.lower) & (x < basis.upper)
    if inside.any():
        nb = _bspline_columns(knots, order, x[inside])
        # Suffix sums skipping each member's own higher-order column.
        suffix = np.cumsum(nb[:, ::-1], axis=1)[:, ::-1]
        vals[inside] = suffix[:, 1:]
    return np.clip(vals[0] if scalar else vals, 0.0, 1.0)
