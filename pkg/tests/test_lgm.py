import numpy as np
import pytest
import scipy.linalg as sla

from jointlap import lgm
from jointlap import modelspec as ms
from jointlap.augment import LongDataset, SurvDataset, ValidationError


def spec_dict(assoc=None, bins=3, covs=("x1",)):
    return {
        "markers": [
            {"id": "y1", "family": "gaussian", "fixed": ["intercept", "time", "x1"], "random": ["intercept", "time"]}
        ],
        "survival": {
            "bins": bins,
            "causes": [
                {
                    "id": 1,
                    "covariates": list(covs),
                    "association": assoc
                    if assoc is not None
                    else [
                        {"marker": "y1", "kind": "current_value"},
                        {"marker": "y1", "kind": "current_slope"},
                        {"marker": "y1", "kind": "shared_random_effect", "term": "intercept"},
                    ],
                }
            ],
        },
    }


def tiny_data():
    obj = lambda xs: np.array(xs, dtype=object)
    long = LongDataset(
        subject=obj(["a", "a", "b"]),
        marker=obj(["y1"] * 3),
        time=np.array([0.0, 1.0, 0.0]),
        value=np.array([1.0, 2.0, 0.5]),
        covariates={"x1": np.array([0.3, 0.3, -1.2])},
    )
    surv = SurvDataset(subject=obj(["a", "b"]), time=np.array([2.0, 1.5]), event=np.array([1, 0]))
    return long, surv


@pytest.fixture
def model():
    long, surv = tiny_data()
    return lgm.assemble(ms.ModelSpec.from_dict(spec_dict()), long, surv)


class TestRandomWalk:
    def test_rw2_interior_row(self):
        Q = lgm.rw2_precision(5, 1.0).to_dense()
        np.testing.assert_allclose(Q[2], [1, -4, 6, -4, 1])
        np.testing.assert_allclose(Q[0], [1, -2, 1, 0, 0])

    def test_rw2_null_space(self):
        Q = lgm.rw2_precision(8, 2.5).to_dense()
        t = np.arange(8.0)
        np.testing.assert_allclose(Q @ np.ones(8), 0, atol=1e-12)
        np.testing.assert_allclose(Q @ t, 0, atol=1e-12)
        assert np.linalg.matrix_rank(Q) == 6

    def test_rw1_null_space(self):
        Q = lgm.rw1_precision(6, 1.0).to_dense()
        np.testing.assert_allclose(Q @ np.ones(6), 0, atol=1e-12)
        assert np.linalg.matrix_rank(Q) == 5

    def test_invalid(self):
        with pytest.raises(ValueError):
            lgm.rw2_precision(2, 1.0)
        with pytest.raises(ValueError):
            lgm.rw2_precision(5, 0.0)


class TestLayout:
    def test_ordering_and_labels(self, model):
        idx = model.index
        assert idx.re_dim == 2 and idx.n_subjects == 2
        assert idx.spline_start == 4 and idx.gamma_start == 7 and idx.beta_start == 8 and idx.dim == 11
        labels = idx.labels()
        assert labels[idx.re(1, "y1", "time")] == "b[b,y1:time]"
        assert labels[idx.spline(1, 2)] == "baseline[1,2]"
        assert labels[idx.gamma(1, 0)] == "gamma[1:x1]"
        assert labels[idx.beta("y1", 2)] == "beta[y1:x1]"

    def test_hyper_layout(self, model):
        h = model.hyper
        assert h.dim == 1 + 3 + 1 + 3
        assert h.labels()[:5] == [
            "log_prec[y1]",
            "log_L[y1:intercept]",
            "log_L[y1:time]",
            "L[y1:time,y1:intercept]",
            "log_tau_baseline[1]",
        ]
        assert [e.key for e in h.phi_entries] == [(1, "y1:current_value"), (1, "y1:current_slope"), (1, "y1:intercept")]

    def test_natural_round_trip(self, model):
        h = model.hyper
        cov = np.array([[0.8, 0.1], [0.1, 0.3]])
        theta = h.theta_from_natural(resid_sd={"y1": 0.5}, re_cov=[cov], rw_tau={1: 4.0}, phi={(1, "y1:current_value"): 0.3})
        nat = h.natural(theta)
        assert nat["sigma_eps[y1]"] == pytest.approx(0.5)
        assert nat["var[y1:intercept]"] == pytest.approx(0.8)
        assert nat["cov[y1:intercept,y1:time]"] == pytest.approx(0.1)
        assert nat["tau_baseline[1]"] == pytest.approx(4.0)
        assert nat["phi[1,y1:current_value]"] == 0.3
        labels, vals = h.natural_batch(np.vstack([theta, theta]))
        np.testing.assert_allclose(vals[1], [nat[k] for k in labels])


class TestPriorPrecision:
    def test_dense_oracle(self, model):
        rng = np.random.default_rng(0)
        theta = rng.normal(scale=0.4, size=model.hyper.dim)
        P = ms.theta_to_re_precision(theta[1:4])
        tau = np.exp(theta[4])
        D = np.diff(np.eye(3), n=2, axis=0)
        rw = tau * (D.T @ D + 1e-5 * np.eye(3))
        ref = sla.block_diag(P, P, rw, np.eye(4) / 2.5**2)
        np.testing.assert_allclose(model.prior_precision(theta).to_dense(), ref, atol=1e-14)
        np.testing.assert_allclose(model.prior_precision_scipy(theta).toarray(), ref, atol=1e-14)

    def test_log_prior_finite_and_normalised_phi(self, model):
        theta = model.hyper.default_theta()
        lp = model.hyper.log_prior(theta)
        assert np.isfinite(lp)
        # only phi components change: the difference is the Gaussian log ratio
        th2 = theta.copy()
        th2[model.hyper.phi_entries[0].start] = 1.0
        assert model.hyper.log_prior(th2) - lp == pytest.approx(-0.5 / 2.5**2)


class TestObservationTerms:
    def test_longitudinal_rows(self, model):
        T = model.terms
        rng = np.random.default_rng(1)
        u = rng.normal(size=model.index.dim)
        idx = model.index
        b = lambda s, t: u[idx.re(s, "y1", t)]
        beta = u[idx.beta("y1") : idx.beta("y1") + 3]
        expected = [
            beta @ [1, 0.0, 0.3] + b(0, "intercept"),
            beta @ [1, 1.0, 0.3] + b(0, "intercept") + b(0, "time"),
            beta @ [1, 0.0, -1.2] + b(1, "intercept"),
        ]
        eta = T.eta(u, np.zeros(3))
        np.testing.assert_allclose(eta[:3], expected, atol=1e-14)
        assert list(T.family[:3]) == [lgm.GAUSSIAN] * 3
        assert list(T.prec_index[:3]) == [0, 0, 0]

    def test_hazard_rows_hand_oracle(self, model):
        T, idx = model.terms, model.index
        rng = np.random.default_rng(2)
        u = rng.normal(size=idx.dim)
        phi = np.array([0.7, -0.4, 1.3])
        eta = T.eta(u, phi)
        x1 = {0: 0.3, 1: -1.2}
        cuts = np.array([0, 2 / 3, 4 / 3, 2.0])
        Tobs = {0: 2.0, 1: 1.5}
        beta = u[idx.beta("y1") : idx.beta("y1") + 3]
        hz = np.flatnonzero(T.family == lgm.HAZARD)
        assert hz.size == 3 + 3
        for r in hz:
            s = int(T.subject[r])
            bin_ = int(model.pseudo.bin[r - 3])
            lo, hi = cuts[bin_], min(cuts[bin_ + 1], Tobs[s])
            t = 0.5 * (lo + hi)
            b0, b1 = u[idx.re(s, "y1", "intercept")], u[idx.re(s, "y1", "time")]
            value = beta @ [1, t, x1[s]] + b0 + b1 * t
            slope = beta[1] + b1
            want = (
                u[idx.spline(1, bin_)]
                + u[idx.gamma(1)] * x1[s]
                + phi[0] * value
                + phi[1] * slope
                + phi[2] * b0
                + np.log(hi - lo)
            )
            assert eta[r] == pytest.approx(want, abs=1e-12)
            assert T.offset[r] == pytest.approx(np.log(hi - lo))

    def test_event_row_at_event_time(self, model):
        T, idx = model.terms, model.index
        rng = np.random.default_rng(4)
        u = rng.normal(size=idx.dim)
        phi = np.array([0.7, -0.4, 1.3])
        ev = np.flatnonzero(T.family == lgm.EVENT)
        assert ev.size == 1 and T.subject[ev[0]] == 0 and T.y[ev[0]] == 1.0
        beta = u[idx.beta("y1") : idx.beta("y1") + 3]
        b0, b1 = u[idx.re(0, "y1", "intercept")], u[idx.re(0, "y1", "time")]
        t = 2.0  # event time of subject a, last bin
        want = (
            u[idx.spline(1, 2)]
            + u[idx.gamma(1)] * 0.3
            + phi[0] * (beta @ [1, t, 0.3] + b0 + b1 * t)
            + phi[1] * (beta[1] + b1)
            + phi[2] * b0
        )
        assert T.eta(u, phi)[ev[0]] == pytest.approx(want, abs=1e-12)
        assert T.offset[ev[0]] == 0.0
        assert np.all(T.y[T.family == lgm.HAZARD] == 0.0)

    def test_constant_association_matches_exact_likelihood(self):
        from jointlap.augment import exact_surv_loglik

        long, surv = tiny_data()
        assoc = [{"marker": "y1", "kind": "shared_random_effect", "term": "intercept"}]
        model = lgm.assemble(ms.ModelSpec.from_dict(spec_dict(assoc=assoc)), long, surv)
        T, idx = model.terms, model.index
        u = np.random.default_rng(5).normal(size=idx.dim)
        phi = np.array([0.8])
        eta = T.eta(u, phi)
        haz, ev = T.family == lgm.HAZARD, T.family == lgm.EVENT
        ours = float(np.sum(T.y[ev] * eta[ev]) - np.sum(np.exp(eta[haz])))
        exact = 0.0
        for s, x1 in ((0, 0.3), (1, -1.2)):
            shift = u[idx.gamma(1)] * x1 + phi[0] * u[idx.re(s, "y1", "intercept")]
            levels = np.exp(u[idx.spline(1, 0) : idx.spline(1, 0) + 3] + shift)
            exact += exact_surv_loglik(surv.time[s], surv.event[s], model.partition.cuts, levels[None, :])
        assert ours == pytest.approx(exact, abs=1e-12)

    def test_single_term_view_matches(self, model):
        T = model.terms
        rng = np.random.default_rng(3)
        u = rng.normal(size=model.index.dim)
        phi = rng.normal(size=3)
        eta = T.eta(u, phi)
        for r in range(T.n_rows):
            assert T.term(r).eta(u, phi) == pytest.approx(eta[r], abs=1e-12)

    def test_ns_slope_uses_derivative(self):
        d = {
            "markers": [
                {
                    "id": "y1",
                    "family": "gaussian",
                    "time_basis": {"ns": {"knots": [1.0], "boundary": [0.0, 2.0]}},
                    "fixed": ["intercept", "ns1", "ns2"],
                    "random": ["intercept"],
                }
            ],
            "survival": {"bins": 3, "causes": [{"id": 1, "association": [{"marker": "y1", "kind": "current_slope"}]}]},
        }
        long, surv = tiny_data()
        model = lgm.assemble(ms.ModelSpec.from_dict(d), long, surv)
        T, idx = model.terms, model.index
        u = np.zeros(idx.dim)
        u[idx.beta("y1") : idx.beta("y1") + 3] = [5.0, 1.0, -2.0]
        eta = T.eta(u, np.array([1.0]))
        hz = np.flatnonzero(T.family == lgm.HAZARD)
        t = model.pseudo.t_eval
        _, dB = ms.ns_basis([1.0], [0.0, 2.0], t)
        np.testing.assert_allclose(eta[hz] - T.offset[hz], dB @ [1.0, -2.0], atol=1e-12)

    def test_longitudinal_only(self):
        long, _ = tiny_data()
        d = {"markers": spec_dict()["markers"]}
        model = lgm.assemble(ms.ModelSpec.from_dict(d), long)
        assert model.index.n_causes == 0 and model.terms.n_rows == 3
        assert model.index.dim == 2 * 2 + 3

    def test_missing_covariate(self):
        long, surv = tiny_data()
        with pytest.raises(ValidationError):
            lgm.assemble(ms.ModelSpec.from_dict(spec_dict(covs=("x9",))), long, surv)

    def test_too_many_causes_in_data(self):
        long, surv = tiny_data()
        surv = SurvDataset(surv.subject, surv.time, np.array([2, 0]))
        with pytest.raises(ValidationError):
            lgm.assemble(ms.ModelSpec.from_dict(spec_dict()), long, surv)
