import math

import numpy as np
import pytest

from survcalib import _engine
from survcalib.calibration import HistoryGrid, probability_matrix
from survcalib.data_model import Dataset, History, Subject
from survcalib.estimators import MainFit, fit_oc
from survcalib.icfit import fit_ph_spline, fit_npmle, fit_weibull
from survcalib.inference import (a_vector, b_vectors, b_vectors_from_structure,
                                 confidence_interval, sandwich,
                                 sandwich_from_structure, score_u)
from survcalib.simulate import Scenario, gen_dataset, rng_for_replication
from survcalib.splines import equally_spaced_basis


@pytest.fixture(scope="module")
def fitted():
    sc = Scenario(n=300, beta0=math.log(2), m_star=2, seed=90)
    ds = gen_dataset(sc, rng_for_replication(90, 0))
    finite = [iv.right for iv in ds.intervals if not iv.is_right_censored]
    basis = equally_spaced_basis(5, 2, float(max(finite)))
    base = fit_ph_spline(ds.intervals, ds.q, basis, tol=1e-6)
    fit = fit_oc(ds, base)
    return ds, base, fit


def structure_for(ds, model):
    evt = np.sort(ds.obs_times[ds.events])
    grid = HistoryGrid.build(ds, evt)
    P = probability_matrix(model, ds, evt, grid=grid)
    return _engine.build_structure(ds.obs_times, ds.events, ds.z, P), grid


class TestAVector:
    def model(self):
        from survcalib.icfit import PhSplineFit
        from survcalib.splines import ispline_eval

        basis = equally_spaced_basis(3, 1, 20.0)
        grid = np.array([basis.lower, *basis.interior_knots, basis.upper])
        alpha, *_ = np.linalg.lstsq(ispline_eval(basis, grid), grid, rcond=None)
        return PhSplineFit(psi=np.zeros(0), alpha=alpha, basis=basis,
                           loglik=0.0, converged=True, n_iter=0)

    def test_certain_exposure_first_entry_one(self):
        h = History(t=2.0, w_bar=1.0, x_at_wbar=True, q=np.zeros(0), z=np.array([0.7]))
        a = a_vector(np.array([0.5, 0.1]), self.model(), h)
        assert a[0] == pytest.approx(1.0)
        assert a[1] == pytest.approx(0.7)

    def test_null_beta_reduces_to_probability(self):
        h = History(t=math.log(2.0), w_bar=0.0, x_at_wbar=False, q=np.zeros(0),
                    z=np.array([0.0]))
        a = a_vector(np.array([0.0, 0.0]), self.model(), h)
        assert a[0] == pytest.approx(0.5, abs=1e-9)

    def test_half_probability_log2(self):
        # construct a history whose exposure probability is exactly one half
        h = History(t=math.log(2.0), w_bar=0.0, x_at_wbar=False, q=np.zeros(0),
                    z=np.zeros(0))
        a = a_vector(np.array([math.log(2.0)]), self.model(), h)
        assert a[0] == pytest.approx(2.0 * 0.5 / 1.5, abs=1e-9)


class TestScoreU:
    def test_zero_at_the_fit(self, fitted):
        ds, base, fit = fitted
        u = score_u(fit.theta, base, ds)
        assert np.linalg.norm(u) < 1e-8

    def test_matches_finite_differences_of_mean_loglik(self, fitted):
        ds, base, fit = fitted
        data, _ = structure_for(ds, base)
        rng = np.random.default_rng(1)
        for _ in range(10):
            theta = rng.normal(0, 0.3, 4)
            u = score_u(theta, base, ds)
            fd = np.zeros(4)
            for k in range(4):
                h = 1e-6
                e = np.zeros(4); e[k] = h
                fd[k] = (_engine.loglik(data, theta + e)
                         - _engine.loglik(data, theta - e)) / (2 * h * data.n)
            assert np.allclose(u, fd, rtol=1e-5, atol=1e-7)

    def test_single_subject_single_event_is_degenerate_zero(self):
        subs = [Subject(id=0, obs_time=1.0, event=True, z=(0.4,), q=(),
                        quest_times=[0.5], quest_status=[True])]
        ds = Dataset(subs)
        model = fit_npmle(ds.intervals)
        u = score_u(np.array([0.3, -0.2]), model, ds)
        assert np.allclose(u, 0.0, atol=1e-12)


class TestBVectors:
    def test_sum_to_n_times_score_at_fit(self, fitted):
        ds, base, fit = fitted
        b = b_vectors(fit.theta, base, ds)
        assert np.abs(b.sum(axis=0)).max() < 1e-6

    def test_sum_identity_away_from_fit(self, fitted):
        ds, base, fit = fitted
        theta = fit.theta + np.array([0.2, -0.1, 0.05, 0.0])
        b = b_vectors(theta, base, ds)
        u = score_u(theta, base, ds)
        assert np.allclose(b.sum(axis=0), len(ds) * u, atol=1e-8)

    def test_never_at_risk_subject_contributes_zero(self):
        # censored before the first event: no event term, empty compensator
        subs = [Subject(id=0, obs_time=0.2, event=False, z=(1.0,), q=(),
                        quest_times=[], quest_status=[]),
                Subject(id=1, obs_time=1.0, event=True, z=(0.0,), q=(),
                        quest_times=[0.5], quest_status=[False]),
                Subject(id=2, obs_time=2.0, event=True, z=(0.5,), q=(),
                        quest_times=[], quest_status=[])]
        ds = Dataset(subs)
        model = fit_npmle(ds.intervals)
        b = b_vectors(np.array([0.1, 0.3]), model, ds)
        assert np.allclose(b[0], 0.0, atol=1e-12)

    def test_two_subject_toy_matches_hand_enumeration(self):
        subs = [Subject(id=0, obs_time=1.0, event=True, z=(1.0,), q=(),
                        quest_times=[0.6], quest_status=[True]),
                Subject(id=1, obs_time=2.0, event=True, z=(-1.0,), q=(),
                        quest_times=[1.5], quest_status=[False])]
        ds = Dataset(subs)
        model = fit_weibull([(ds.intervals[0]), (ds.intervals[1])])
        theta = np.array([0.4, 0.25])
        data, grid = structure_for(ds, model)
        b = b_vectors_from_structure(data, theta)
        # direct enumeration: two events, risk sets {0,1} then {1}
        P = data.p_matrix
        Z = data.z
        eb = math.exp(theta[0])
        A = eb * P / (1 + (eb - 1) * P)
        phi = np.where(data.at_risk, np.exp(Z[:, 0] * theta[1])[None, :]
                       * (1 + (eb - 1) * P), 0.0)
        expected = np.zeros((2, 2))
        for e, subj in enumerate(data.event_subjects):
            s0 = phi[e].sum()
            mb = (phi[e] * A[e]).sum() / s0
            mg = (phi[e] * Z[:, 0]).sum() / s0
            expected[subj] += [A[e, subj] - mb, Z[subj, 0] - mg]
            for i in range(2):
                w = phi[e, i] / s0
                expected[i] -= [w * (A[e, i] - mb), w * (Z[i, 0] - mg)]
        assert np.allclose(b, expected, atol=1e-12)


class TestSandwich:
    def test_bread_matches_fd_of_score(self, fitted):
        ds, base, fit = fitted
        data, grid = structure_for(ds, base)
        cov, comps = sandwich_from_structure(data, fit.theta, base, ds, grid=grid)
        n = data.n
        fd = np.zeros((4, 4))
        for k in range(4):
            h = 1e-6
            e = np.zeros(4); e[k] = h
            fd[:, k] = (_engine.score(data, fit.theta + e)
                        - _engine.score(data, fit.theta - e)) / (2 * h * n)
        assert np.allclose(comps.bread, -fd, rtol=1e-4, atol=1e-6)

    def test_meat_is_positive_semidefinite(self, fitted):
        ds, base, fit = fitted
        data, grid = structure_for(ds, base)
        _, comps = sandwich_from_structure(data, fit.theta, base, ds, grid=grid)
        eig = np.linalg.eigvalsh(comps.meat)
        assert eig.min() >= -1e-10

    def test_correction_off_reduces_to_robust(self, fitted):
        ds, base, fit = fitted
        data, grid = structure_for(ds, base)
        cov, comps = sandwich_from_structure(data, fit.theta, base, ds, grid=grid,
                                             correct_for_calibration=False)
        bread_inv = np.linalg.inv(comps.bread)
        manual = bread_inv @ (comps.b.T @ comps.b / data.n) @ bread_inv / data.n
        assert np.allclose(cov, manual, rtol=1e-12)
        assert np.allclose(comps.r, comps.b)

    def test_npmle_model_skips_correction(self, fitted):
        ds, _, fit = fitted
        model = fit_npmle(ds.intervals)
        cov = sandwich(fit.theta, model, ds)
        cov2 = sandwich(fit.theta, model, ds, correct_for_calibration=False)
        assert np.allclose(cov, cov2)

    def test_sandwich_within_band_of_model_variance_at_null(self):
        # well-specified null: robust and model-based variances agree loosely
        sc = Scenario(n=800, beta0=0.0, m_star=2, seed=91)
        ds = gen_dataset(sc, rng_for_replication(91, 0))
        finite = [iv.right for iv in ds.intervals if not iv.is_right_censored]
        basis = equally_spaced_basis(5, 2, float(max(finite)))
        base = fit_ph_spline(ds.intervals, ds.q, basis, tol=1e-6)
        fit_model = fit_oc(ds, base, variance="model")
        data, grid = structure_for(ds, base)
        cov, _ = sandwich_from_structure(data, fit_model.theta, base, ds, grid=grid,
                                         correct_for_calibration=False)
        ratio = cov[0, 0] / fit_model.covariance[0, 0]
        assert 0.75 < ratio < 1.25

    def test_symmetric(self, fitted):
        ds, base, fit = fitted
        cov = sandwich(fit, base, ds)
        assert np.allclose(cov, cov.T, atol=1e-14)


class TestConfidenceInterval:
    def make_fit(self, beta, se):
        cov = np.diag([se ** 2, 0.01])
        return MainFit(method="OC", beta=beta, gamma=np.array([0.0]),
                       covariance=cov, se_beta=se, loglik=0.0, iterations=1,
                       converged=True)

    def test_zero_se_degenerate(self):
        ci = confidence_interval(self.make_fit(0.7, 0.0), 0.95)
        assert ci[0, 0] == ci[0, 1] == pytest.approx(0.7)

    def test_reference_hazard_ratio_interval(self):
        ci = confidence_interval(self.make_fit(-0.32, 0.176), 0.95)
        hr = np.exp(ci[0])
        assert hr[0] == pytest.approx(0.51, abs=0.005)
        assert hr[1] == pytest.approx(1.03, abs=0.005)

    def test_nested_levels(self):
        fit = self.make_fit(0.2, 0.1)
        inner = confidence_interval(fit, 0.5)
        outer = confidence_interval(fit, 0.95)
        assert outer[0, 0] < inner[0, 0] < inner[0, 1] < outer[0, 1]

    def test_invalid_level_rejected(self):
        with pytest.raises(ValueError):
            confidence_interval(self.make_fit(0.0, 1.0), 1.0)
