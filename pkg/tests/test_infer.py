from types import SimpleNamespace

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special, stats

from jointlap import infer, lgm
from jointlap import modelspec as ms
from jointlap.augment import LongDataset
from jointlap.modelspec import SupportError


# ---------------------------------------------------------------------------
# toy models
# ---------------------------------------------------------------------------


class ToyModel:
    """Minimal model: u ~ N(0, q^-1 I), fixed observation rows, no hyperparameters."""

    def __init__(self, family, y, A, q=1.0, offset=None, prec=None):
        A = sp.csr_matrix(np.atleast_2d(np.asarray(A, dtype=float)))
        n, dim = A.shape
        coo = A.tocoo()
        self.terms = lgm.ObservationTerms(
            family=np.full(n, family, dtype=np.int64),
            y=np.asarray(y, dtype=float),
            offset=np.zeros(n) if offset is None else np.asarray(offset, dtype=float),
            prec_index=np.full(n, -1, dtype=np.int64),
            subject=np.zeros(n, dtype=np.int64),
            e_row=coo.row.astype(np.int64),
            e_col=coo.col.astype(np.int64),
            e_coef=coo.data,
            e_phi=np.full(coo.nnz, -1, dtype=np.int64),
            dim=dim,
        )
        self.q = q
        self.prec = np.ones(n) if prec is None else np.asarray(prec, dtype=float)
        self.index = SimpleNamespace(dim=dim, n_causes=0, n_bins=0, n_subjects=0, gamma_start=0)
        self.spec = SimpleNamespace(re_blocks=(), baseline="rw2", priors=SimpleNamespace(fixed_scale=q**-0.5))
        self.hyper = SimpleNamespace(entries=(), phi=lambda th: np.zeros(0), log_prior=lambda th: 0.0)
        self.q_rows = np.arange(dim)
        self.q_cols = np.arange(dim)

    def q_values(self, theta):
        return np.full(self.index.dim, self.q)

    def prior_precision_scipy(self, theta):
        return sp.identity(self.index.dim, format="csr") * self.q

    def residual_precision(self, theta):
        return self.prec


def gaussian_long_model(n_subj=25, seed=0, random=("intercept", "time"), priors=None, n_visits=4):
    rng = np.random.default_rng(seed)
    subj, t, x = [], [], []
    for i in range(n_subj):
        k = rng.integers(1, n_visits + 1)
        subj += [str(i)] * k
        t += list(np.sort(rng.uniform(0, 5, k)))
        x += [rng.normal()] * k
    t, x = np.array(t), np.array(x)
    y = 0.3 - 0.1 * t + 0.2 * x + rng.normal(0, 0.5, t.size)
    y += np.repeat(rng.normal(0, 0.4, n_subj), np.bincount(np.array(subj, dtype=int)))
    long = LongDataset(np.array(subj, dtype=object), np.array(["y1"] * t.size, dtype=object), t, y, {"x1": x})
    d = {"markers": [{"id": "y1", "family": "gaussian", "fixed": ["intercept", "time", "x1"], "random": list(random)}]}
    if priors:
        d["priors"] = priors
    return lgm.assemble(ms.ModelSpec.from_dict(d), long), long


def dense_gaussian_oracle(model, theta):
    A = model.terms.design(model.hyper.phi(theta)).toarray()
    Q = model.prior_precision_scipy(theta).toarray()
    lam = model.residual_precision(theta)
    y = model.terms.y - model.terms.offset
    H = Q + A.T @ (lam[:, None] * A)
    mean = np.linalg.solve(H, A.T @ (lam * y))
    sd = np.sqrt(np.diag(np.linalg.inv(H)))
    V = A @ np.linalg.solve(Q, A.T) + np.diag(1.0 / lam)
    logml = stats.multivariate_normal(np.zeros(y.size), V).logpdf(y)
    return mean, sd, logml + model.hyper.log_prior(theta)


# ---------------------------------------------------------------------------
# loglik_eta
# ---------------------------------------------------------------------------


class TestLoglikEta:
    def test_examples(self):
        v, d1, d2 = infer.loglik_eta("gaussian", 1.0, 0.0, 1.0)
        assert (v, d1, d2) == pytest.approx((-0.5 - 0.5 * np.log(2 * np.pi), 1.0, -1.0))
        v, d1, d2 = infer.loglik_eta("poisson", 2.0, 0.0)
        assert (v, d1, d2) == pytest.approx((-1 - np.log(2), 1.0, -1.0))
        v, d1, d2 = infer.loglik_eta("binomial", 1.0, 0.0)
        assert (v, d1, d2) == pytest.approx((np.log(0.5), 0.5, -0.25))

    def test_support(self):
        with pytest.raises(SupportError):
            infer.loglik_eta("poisson", -1.0, 0.0)
        with pytest.raises(SupportError):
            infer.loglik_eta("binomial", 0.5, 0.0)
        with pytest.raises(SupportError):
            infer.loglik_eta("gaussian", 0.5, 0.0, 0.0)

    def test_finite_differences(self):
        rng = np.random.default_rng(0)
        h = 1e-5
        for _ in range(1000):
            fam = rng.choice(["gaussian", "poisson", "binomial"])
            eta = rng.uniform(-3, 3)
            y = {"gaussian": rng.normal(), "poisson": float(rng.poisson(2.0)), "binomial": float(rng.integers(0, 2))}[fam]
            s = rng.uniform(0.2, 5.0)
            v, d1, d2 = infer.loglik_eta(fam, y, eta, s)
            vp, d1p, _ = infer.loglik_eta(fam, y, eta + h, s)
            vm, d1m, _ = infer.loglik_eta(fam, y, eta - h, s)
            assert d1 == pytest.approx((vp - vm) / (2 * h), rel=1e-6, abs=1e-8)
            assert d2 == pytest.approx((d1p - d1m) / (2 * h), rel=1e-6, abs=1e-8)
            assert d2 <= 0


# ---------------------------------------------------------------------------
# inner problem and hyper posterior
# ---------------------------------------------------------------------------


def bisect(f, lo, hi, tol=1e-14):
    flo = f(lo)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if (f(mid) > 0) == (flo > 0):
            lo, flo = mid, f(mid)
        else:
            hi = mid
    return 0.5 * (lo + hi)


class TestInnerNewton:
    def test_poisson_1d_bisection(self):
        eng = infer.LaplaceEngine(ToyModel(lgm.POISSON, [3.0], [[1.0]]))
        ga = eng.inner_newton(np.zeros(0))
        ref = bisect(lambda u: 3 - np.exp(u) - u, -5.0, 5.0)
        assert ga.mode[0] == pytest.approx(ref, abs=1e-10)

    def test_warm_start_fixed_point(self):
        eng = infer.LaplaceEngine(ToyModel(lgm.POISSON, [3.0, 1.0], [[1.0, 0.5], [0.0, 1.0]]))
        ga = eng.inner_newton(np.zeros(0))
        again = eng.inner_newton(np.zeros(0), ga.mode)
        assert again.iterations <= 1
        np.testing.assert_allclose(again.mode, ga.mode, atol=1e-10)

    def test_gaussian_one_step_gls(self):
        model, _ = gaussian_long_model()
        theta = np.array([0.5, 0.2, -0.1, 0.3])
        eng = infer.LaplaceEngine(model)
        ga = eng.inner_newton(theta)
        mean, sd, _ = dense_gaussian_oracle(model, theta)
        assert ga.iterations == 1
        np.testing.assert_allclose(ga.mode, mean, atol=1e-8)
        np.testing.assert_allclose(ga.sd, sd, atol=1e-8)

    def test_divergence_surfaces_as_minus_inf(self):
        eng = infer.LaplaceEngine(ToyModel(lgm.POISSON, [3.0], [[1.0]]))
        eng.max_newton = 0
        assert eng.log_hyper_post(np.zeros(0)) == -np.inf
        with pytest.raises(infer.InnerDivergence):
            eng.inner_newton(np.zeros(0))


class TestLogHyperPost:
    def test_gaussian_exact_marginal(self):
        model, _ = gaussian_long_model()
        eng = infer.LaplaceEngine(model)
        for theta in (np.zeros(4), np.array([1.2, 0.4, -0.3, 0.5])):
            _, _, ref = dense_gaussian_oracle(model, theta)
            assert eng.log_hyper_post(theta) == pytest.approx(ref, abs=1e-8)

    def test_poisson_gauss_hermite(self):
        y = np.array([40.0, 35.0, 45.0])
        eng = infer.LaplaceEngine(ToyModel(lgm.POISSON, y, np.ones((3, 1))))
        logf = lambda u: np.sum(y * u - np.exp(u) - special.gammaln(y + 1)) - 0.5 * u * u - 0.5 * np.log(2 * np.pi)
        m = bisect(lambda u: np.sum(y - np.exp(u)) - u, -5.0, 10.0)
        s = 1.0 / np.sqrt(3 * np.exp(m) + 1.0)
        x, w = np.polynomial.hermite.hermgauss(15)
        nodes = m + np.sqrt(2) * s * x
        ref = np.log(np.sqrt(2) * s * np.sum(w * np.exp(x * x + np.array([logf(v) for v in nodes]))))
        assert eng.log_hyper_post(np.zeros(0)) == pytest.approx(ref, abs=2e-3)

    def test_permutation_invariance(self):
        model, long = gaussian_long_model(seed=3)
        perm = np.random.default_rng(1).permutation(len(long))
        model2 = lgm.assemble(model.spec, long.subset(perm))
        a, b = np.zeros(4), np.array([0.7, -0.2, 0.1, 0.4])
        e1, e2 = infer.LaplaceEngine(model), infer.LaplaceEngine(model2)
        d1 = e1.log_hyper_post(a) - e1.log_hyper_post(b)
        d2 = e2.log_hyper_post(a) - e2.log_hyper_post(b)
        assert d1 == pytest.approx(d2, abs=1e-10)

    def test_translation_with_diffuse_fixed_prior(self):
        # location invariance holds in the flat-prior limit for the intercept
        model, long = gaussian_long_model(seed=4, priors={"fixed_scale": 1e5})
        shifted = LongDataset(long.subject, long.marker, long.time, long.value + 3.0, long.covariates)
        model2 = lgm.assemble(model.spec, shifted)
        a, b = np.zeros(4), np.array([0.7, -0.2, 0.1, 0.4])
        e1, e2 = infer.LaplaceEngine(model), infer.LaplaceEngine(model2)
        d1 = e1.log_hyper_post(a) - e1.log_hyper_post(b)
        d2 = e2.log_hyper_post(a) - e2.log_hyper_post(b)
        assert d1 == pytest.approx(d2, abs=1e-8)


# ---------------------------------------------------------------------------
# optimizer and exploration
# ---------------------------------------------------------------------------


class TestOptimize:
    def test_quadratic(self):
        C = np.array([[2.0, 0.5], [0.5, 1.0]])
        f = lambda x: -0.5 * (x - [1.0, -2.0]) @ C @ (x - [1.0, -2.0])
        res = infer.optimize_hyper(f, np.zeros(2))
        assert res.converged
        np.testing.assert_allclose(res.theta, [1.0, -2.0], atol=1e-4)
        np.testing.assert_allclose(infer.fd_hessian(f, res.theta), -C, atol=1e-6)

    def test_start_at_optimum(self):
        f = lambda x: -np.sum((x - 0.5) ** 2)
        res = infer.optimize_hyper(f, np.full(3, 0.5))
        assert res.converged and res.iterations == 0

    def test_grid_oracle_conjugate_gaussian(self):
        model, _ = gaussian_long_model(seed=5, random=())
        eng = infer.LaplaceEngine(model)
        res = infer.optimize_hyper(eng.log_hyper_post, np.zeros(1))
        coarse = np.linspace(-3, 5, 161)
        best = coarse[np.argmax([eng.log_hyper_post(np.array([g])) for g in coarse])]
        fine = np.linspace(best - 0.05, best + 0.05, 201)
        best = fine[np.argmax([eng.log_hyper_post(np.array([g])) for g in fine])]
        assert res.converged
        assert res.theta[0] == pytest.approx(best, abs=1e-2)

    def test_infeasible_start(self):
        res = infer.optimize_hyper(lambda x: -np.inf, np.zeros(2))
        assert not res.converged

    def test_stall_rule(self):
        # supremum at x1 -> inf, like a precision drifting to infinity
        f = lambda x: -((x[0] - 0.3) ** 2) - np.exp(-x[1])
        res = infer.optimize_hyper(f, np.zeros(2), grad_tol=1e-9)
        assert res.converged and "stalled" in res.message
        assert f(res.theta) > -2e-3 and res.theta[0] == pytest.approx(0.3, abs=1e-3)

    def test_hessian_mixed_terms(self):
        f = lambda x: np.sin(x[0]) * np.exp(0.5 * x[1]) + x[0] ** 3 * x[2] - np.cos(x[1] * x[2])
        a, b, c = x = np.array([0.3, -0.7, 1.1])
        exact = np.array(
            [
                [-np.sin(a) * np.exp(0.5 * b) + 6 * a * c, 0.5 * np.cos(a) * np.exp(0.5 * b), 3 * a * a],
                [0.5 * np.cos(a) * np.exp(0.5 * b), 0.25 * np.sin(a) * np.exp(0.5 * b) + c * c * np.cos(b * c), np.sin(b * c) + b * c * np.cos(b * c)],
                [3 * a * a, np.sin(b * c) + b * c * np.cos(b * c), b * b * np.cos(b * c)],
            ]
        )
        # second-order accurate: halving h quarters the error
        e1 = np.max(np.abs(infer.fd_hessian(f, x, 1e-2) - exact))
        e2 = np.max(np.abs(infer.fd_hessian(f, x, 5e-3) - exact))
        assert e2 < 1e-4 and e1 / e2 == pytest.approx(4.0, rel=0.05)


class TestExplore:
    def test_eb_single_point(self):
        f = lambda th: (-0.5 * float(th @ th), None)
        pts, cov = infer.explore(f, np.zeros(2), -np.eye(2), "EB")
        assert len(pts) == 1 and pts[0].weight == 1.0
        np.testing.assert_allclose(cov, np.eye(2))

    def test_full_symmetric_gaussian(self):
        f = lambda th: (-0.5 * 4.0 * float(th @ th), None)
        pts, cov = infer.explore(f, np.zeros(1), np.array([[-4.0]]), "FULL")
        assert len(pts) == 3
        assert pts[1].weight == pytest.approx(pts[2].weight, abs=1e-10)
        assert sum(p.weight for p in pts) == pytest.approx(1.0)
        # the mixture reproduces the Gaussian variance
        var = sum(p.weight * (p.theta[0] ** 2) for p in pts) + cov[0, 0]
        assert var == pytest.approx(0.25, rel=1e-10)

    def test_infeasible_point_gets_zero_weight(self):
        f = lambda th: (-np.inf, None) if th[0] > 0 else (-0.5 * float(th @ th), None)
        pts, _ = infer.explore(f, np.zeros(1), -np.eye(1), "FULL")
        assert [p.weight for p in pts if p.theta[0] > 0] == [0.0]

    def test_indefinite_hessian_falls_back(self):
        f = lambda th: (0.0, None)
        pts, _ = infer.explore(f, np.zeros(2), np.diag([-1.0, 1.0]), "FULL")
        assert len(pts) == 1

    def test_skewed_toy_full_mean_between_mode_and_grid(self):
        model, _ = gaussian_long_model(n_subj=4, seed=6, random=(), n_visits=2)
        eng = infer.LaplaceEngine(model)
        res = infer.fit(model, "FULL", n_hyper_samples=10)
        grid = np.linspace(res.theta_mode[0] - 8, res.theta_mode[0] + 8, 4001)
        lp = np.array([eng.log_hyper_post(np.array([g])) for g in grid])
        w = np.exp(lp - lp.max())
        grid_mean = np.sum(w * grid) / np.sum(w)
        full_mean = sum(p.weight * p.theta[0] for p in res.points)
        mode = res.theta_mode[0]
        assert min(mode, grid_mean) <= full_mean <= max(mode, grid_mean)
        assert abs(full_mean - grid_mean) < abs(mode - grid_mean)


# ---------------------------------------------------------------------------
# marginals, summaries and sampling
# ---------------------------------------------------------------------------


def mixture(ws, ms_, ss):
    return infer.MarginalMixture(np.array(ws), np.array(ms_)[:, None], np.array(ss)[:, None])


class TestMixture:
    def test_single_component(self):
        m = mixture([1.0], [1.0], [0.5])
        assert m.mean()[0] == 1.0 and np.sqrt(m.var()[0]) == pytest.approx(0.5)
        assert m.quantile(0.025)[0] == pytest.approx(1 - 1.959964 * 0.5, abs=1e-6)
        assert m.quantile(0.975)[0] == pytest.approx(1 + 1.959964 * 0.5, abs=1e-6)

    def test_identical_components(self):
        a, b = mixture([0.5, 0.5], [1.0, 1.0], [0.5, 0.5]), mixture([1.0], [1.0], [0.5])
        for q in (0.025, 0.975):
            assert a.quantile(q)[0] == pytest.approx(b.quantile(q)[0], abs=1e-9)
        assert a.var()[0] == pytest.approx(b.var()[0])

    def test_two_component_grid_inversion(self):
        m = mixture([0.3, 0.7], [-1.0, 2.0], [1.0, 0.5])
        grid = np.linspace(-6, 5, 2_000_001)
        cdf = 0.3 * stats.norm.cdf(grid, -1, 1) + 0.7 * stats.norm.cdf(grid, 2, 0.5)
        for q in (0.025, 0.975):
            assert m.quantile(q)[0] == pytest.approx(np.interp(q, cdf, grid), abs=1e-6)
        assert m.mean()[0] == pytest.approx(0.3 * -1 + 0.7 * 2)
        assert m.var()[0] == pytest.approx(0.3 * 2 + 0.7 * 4.25 - 1.1**2)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.floats(0.05, 1), st.floats(-3, 3), st.floats(0.1, 2)), min_size=1, max_size=4))
    def test_quantile_inverts_cdf(self, comps):
        w = np.array([c[0] for c in comps])
        m = mixture(w / w.sum(), [c[1] for c in comps], [c[2] for c in comps])
        for q in (0.025, 0.5, 0.975):
            assert m.cdf(m.quantile(q))[0] == pytest.approx(q, abs=1e-9)


def resid_layout():
    spec = ms.ModelSpec.from_dict({"markers": [{"id": "y1", "family": "gaussian", "fixed": ["intercept"], "random": []}]})
    return lgm.HyperLayout.from_spec(spec)


def re_layout():
    spec = ms.ModelSpec.from_dict(
        {"markers": [{"id": "y1", "family": "poisson", "fixed": ["intercept"], "random": ["intercept"]}]}
    )
    return lgm.HyperLayout.from_spec(spec)


class TestHyperSummaries:
    def test_degenerate(self):
        pts = [infer.HyperPoint(np.zeros(1), 0.0, 1.0)]
        out = infer.hyper_summaries(resid_layout(), pts, np.zeros((1, 1)), np.random.default_rng(0), 100)
        assert out["sigma_eps[y1]"]["mean"] == 1.0 and out["sigma_eps[y1]"]["sd"] == 0.0

    def test_lognormal_moments(self):
        pts = [infer.HyperPoint(np.zeros(1), 0.0, 1.0)]
        n = 5000
        # residual sd = exp(-theta/2); block variance = exp(-2 theta)
        for layout, label, k in ((resid_layout(), "sigma_eps[y1]", -0.5), (re_layout(), "var[y1:intercept]", -2.0)):
            out = infer.hyper_summaries(layout, pts, np.array([[0.04]]), np.random.default_rng(1), n)
            s = out[label]
            assert abs(s["mean"] - np.exp(0.5 * k * k * 0.04)) <= 3 * s["sd"] / np.sqrt(n)

    def test_symmetric_phi(self):
        spec = ms.ModelSpec.from_dict(
            {
                "markers": [{"id": "y1", "family": "binomial", "fixed": ["intercept"], "random": []}],
                "survival": {"bins": 3, "causes": [{"id": 1, "association": [{"marker": "y1", "kind": "current_value"}]}]},
            }
        )
        layout = lgm.HyperLayout.from_spec(spec)
        pts = [infer.HyperPoint(np.array([0.0, 0.3]), 0.0, 1.0)]
        n = 5000
        s = infer.hyper_summaries(layout, pts, np.diag([0.01, 0.09]), np.random.default_rng(2), n)["phi[1,y1:current_value]"]
        assert abs(s["mean"] - 0.3) <= 3 * 0.3 / np.sqrt(n)
        assert (s["q975"] - 0.3) == pytest.approx(0.3 - s["q025"], abs=0.03)


def toy_fit_result(model):
    eng = infer.LaplaceEngine(model)
    val, ga = eng.log_hyper_post(np.zeros(0), return_approx=True)
    pts = [infer.HyperPoint(np.zeros(0), val, 1.0, ga)]
    return infer.FitResult(
        strategy="EB", converged=True, message="", theta_labels=[], theta_mode=np.zeros(0), hessian=np.zeros((0, 0)),
        points=pts, component_cov=np.zeros((0, 0)), latent_labels=[], latent={}, hyper={}, mlik=val, timings={},
        iterations=0, n_evals=1,
    ), ga


class TestSampling:
    def test_empty(self):
        res, _ = toy_fit_result(ToyModel(lgm.POISSON, [3.0], [[1.0]]))
        out = infer.sample_joint_posterior(res, 0)
        assert out["u"].shape == (0, 1)

    def test_moments_3d(self):
        A = np.array([[1.0, 0.5, 0.0], [0.0, 1.0, -0.3], [0.2, 0.0, 1.0], [1.0, 1.0, 1.0]])
        res, ga = toy_fit_result(ToyModel(lgm.POISSON, [2.0, 1.0, 4.0, 3.0], A))
        n = 100_000
        U = infer.sample_joint_posterior(res, n, seed=3)["u"]
        eta = A @ ga.mode
        H = np.eye(3) + A.T @ (np.exp(eta)[:, None] * A)
        cov = np.linalg.inv(H)
        sd = np.sqrt(np.diag(cov))
        assert np.all(np.abs(U.mean(axis=0) - ga.mode) <= 3 * sd / np.sqrt(n))
        np.testing.assert_allclose(np.cov(U.T), cov, rtol=0.05, atol=0.05 * sd.max() ** 2)

    def test_deterministic(self):
        res, _ = toy_fit_result(ToyModel(lgm.POISSON, [3.0], [[1.0]]))
        a = infer.sample_joint_posterior(res, 10, seed=5)["u"]
        b = infer.sample_joint_posterior(res, 10, seed=5)["u"]
        np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# full pipeline on a small joint dataset
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def s1_fits(s1_small):
    cfg, long, surv, _ = s1_small
    model = lgm.assemble(cfg.model_spec(), long, surv)
    return model, infer.fit(model, "EB"), infer.fit(model, "FULL")


class TestFit:
    def test_eb(self, s1_fits):
        _, eb, _ = s1_fits
        assert eb.converged and len(eb.points) == 1
        est = eb.estimates()
        assert est["sigma_eps[y1]"]["mean"] == pytest.approx(0.4, abs=0.05)
        assert not any(k.startswith("b[") or k.startswith("baseline[") for k in est)
        assert np.isfinite(eb.mlik)

    def test_full_weights(self, s1_fits):
        model, _, full = s1_fits
        assert len(full.points) == 1 + 2 * model.hyper.dim
        w = np.array([p.weight for p in full.points])
        assert np.all(w >= 0) and w.sum() == pytest.approx(1.0)

    def test_eb_full_close(self, s1_fits):
        _, eb, full = s1_fits
        a, b = eb.estimates(), full.estimates()
        for k in a:
            assert abs(a[k]["mean"] - b[k]["mean"]) < 0.5 * a[k]["sd"] + 1e-3

    def test_mixture_matches_sampling(self, s1_fits):
        model, _, full = s1_fits
        n = 20_000
        U = infer.sample_joint_posterior(full, n, seed=1)["u"]
        sl = model.index.fixed_slice()
        mean, sd = full.latent["mean"][sl], full.latent["sd"][sl]
        assert np.all(np.abs(U[:, sl].mean(axis=0) - mean) <= 3.5 * sd / np.sqrt(n))
        # sd of the sample variance of a near-Gaussian is var*sqrt(2/n)
        assert np.all(np.abs(U[:, sl].var(axis=0) - sd**2) <= 3.5 * sd**2 * np.sqrt(2.0 / n))

    def test_json(self, s1_fits):
        _, eb, _ = s1_fits
        js = eb.to_json()
        assert js["strategy"] == "EB" and js["converged"] is True
        assert not any(lab.startswith("b[") for lab in js["latent"]["labels"])

    def test_unknown_strategy(self, s1_fits):
        with pytest.raises(ValueError):
            infer.fit(s1_fits[0], "GRID")


def test_full_equals_eb_for_point_mass_hyper():
    # a very tight residual prior leaves no room for the hyperparameter to move
    model, _ = gaussian_long_model(n_subj=10, seed=8, random=(), priors={"residual_shape": 1e12, "residual_rate": 1e12})
    eb = infer.fit(model, "EB", n_hyper_samples=10)
    full = infer.fit(model, "FULL", n_hyper_samples=10)
    np.testing.assert_allclose(full.latent["mean"], eb.latent["mean"], atol=1e-10)
