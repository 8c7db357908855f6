"""Nested Laplace approximation: inner Gaussian approximation of the latent
field, the hyperparameter posterior, its exploration and posterior summaries."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.special import expit, gammaln, ndtr, ndtri

from .lgm import BINOMIAL, EVENT, GAUSSIAN, HAZARD, POISSON, AssembledModel, _difference_matrix, RIDGE
from .modelspec import SupportError
from .numkernel import NotPositiveDefinite, SymbolicCholesky

log = logging.getLogger(__name__)

LOG2PI = np.log(2.0 * np.pi)


class InnerDivergence(RuntimeError):
    """Inner Newton iteration failed; ``diagnostics`` holds the last state."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


# ---------------------------------------------------------------------------
# Likelihood per row
# ---------------------------------------------------------------------------


_FAMILY_NAMES = {"gaussian": GAUSSIAN, "poisson": POISSON, "binomial": BINOMIAL}


def loglik_eta(family, y, eta, scale=1.0):
    """Log-likelihood of y given the linear predictor and its first two
    derivatives in eta. ``scale`` is the residual precision for gaussian."""
    fam = _FAMILY_NAMES.get(family, family) if isinstance(family, str) else family
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if fam == GAUSSIAN:
        if not np.all(np.asarray(scale) > 0):
            raise SupportError("precision must be positive")
        r = y - eta
        val = 0.5 * np.log(scale) - 0.5 * LOG2PI - 0.5 * scale * r * r
        return val, scale * r, -scale * np.ones_like(eta)
    if fam in (POISSON, HAZARD):
        if np.any(y < 0) or np.any(y != np.round(y)):
            raise SupportError("poisson responses must be non-negative integers")
        mu = np.exp(eta)
        return y * eta - mu - gammaln(y + 1.0), y - mu, -mu
    if fam == BINOMIAL:
        if np.any((y != 0) & (y != 1)):
            raise SupportError("binomial responses must be 0 or 1")
        p = expit(eta)
        return y * eta - np.logaddexp(0.0, eta), y - p, -p * (1.0 - p)
    if fam == EVENT:
        return y * eta, y * np.ones_like(eta), np.zeros_like(eta)
    raise ValueError(f"unknown family {family!r}")


class _RowLikelihood:
    """Vectorized log-likelihood over all observation rows of a model."""

    def __init__(self, terms):
        self.y = terms.y
        self.gauss = np.flatnonzero(terms.family == GAUSSIAN)
        self.pois = np.flatnonzero((terms.family == POISSON) | (terms.family == HAZARD))
        self.binom = np.flatnonzero(terms.family == BINOMIAL)
        self.event = np.flatnonzero(terms.family == EVENT)
        haz = terms.family == HAZARD
        # parameter-free constants: log y! and the y*log(exposure) term of hazard rows
        self.const = -float(np.sum(gammaln(terms.y[self.pois] + 1.0))) - float(
            np.sum(terms.y[haz] * terms.offset[haz])
        )

    @np.errstate(over="ignore", invalid="ignore")
    def value(self, eta, prec):
        y = self.y
        total = self.const
        g = self.gauss
        if g.size:
            r = y[g] - eta[g]
            total += float(np.sum(0.5 * np.log(prec[g]) - 0.5 * LOG2PI - 0.5 * prec[g] * r * r))
        p = self.pois
        if p.size:
            total += float(np.sum(y[p] * eta[p] - np.exp(eta[p])))
        b = self.binom
        if b.size:
            total += float(np.sum(y[b] * eta[b] - np.logaddexp(0.0, eta[b])))
        e = self.event
        if e.size:
            total += float(y[e] @ eta[e])
        return total

    @np.errstate(over="ignore", invalid="ignore")
    def derivs(self, eta, prec):
        d1 = np.empty_like(eta)
        w = np.empty_like(eta)  # negative second derivative
        g, p, b, y = self.gauss, self.pois, self.binom, self.y
        d1[g] = prec[g] * (y[g] - eta[g])
        w[g] = prec[g]
        mu = np.exp(eta[p])
        d1[p] = y[p] - mu
        w[p] = mu
        pr = expit(eta[b])
        d1[b] = y[b] - pr
        w[b] = pr * (1.0 - pr)
        d1[self.event] = y[self.event]
        w[self.event] = 0.0
        return d1, w


# ---------------------------------------------------------------------------
# Hessian assembly on a fixed symbolic factorization
# ---------------------------------------------------------------------------


@njit(cache=True)
def _accumulate_pairs(out, slot, e1, e2, prow, coef, w):
    for p in range(slot.size):
        out[slot[p]] += coef[e1[p]] * coef[e2[p]] * w[prow[p]]


class HessianPlan:
    """Symbolic Cholesky of Q + A^T W A and the scatter map for its values.

    Each observation row contributes w_r a_r a_r^T; the plan enumerates the
    ordered entry pairs of every row that land in the lower triangle.
    """

    def __init__(self, model: AssembledModel):
        terms = model.terms
        dim = model.index.dim
        perm = np.arange(dim)
        iperm = perm
        e1_all, e2_all = [], []
        counts = np.diff(terms.indptr)
        for k in np.unique(counts):
            if k == 0:
                continue
            rows = np.flatnonzero(counts == k)
            starts = terms.indptr[rows]
            a, b = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
            e1 = (starts[:, None] + a.ravel()[None, :]).ravel()
            e2 = (starts[:, None] + b.ravel()[None, :]).ravel()
            keep = iperm[terms.e_col[e1]] >= iperm[terms.e_col[e2]]
            e1_all.append(e1[keep])
            e2_all.append(e2[keep])
        e1 = np.concatenate(e1_all) if e1_all else np.zeros(0, np.int64)
        e2 = np.concatenate(e2_all) if e2_all else np.zeros(0, np.int64)
        r1, c1 = terms.e_col[e1], terms.e_col[e2]
        pr = np.concatenate([model.q_rows, r1])
        pc = np.concatenate([model.q_cols, c1])
        # deduplicate the pattern before the symbolic analysis
        key = np.unique(np.maximum(pr, pc) * dim + np.minimum(pr, pc))
        self.symbolic = SymbolicCholesky.analyze(dim, key // dim, key % dim, perm=perm)
        self.q_slots = self.symbolic.slots(model.q_rows, model.q_cols)
        slot = self.symbolic.slots(r1, c1)
        order = np.argsort(slot, kind="stable")  # memory locality for the scatter
        self.slot = slot[order].astype(np.int64)
        self.e1 = e1[order].astype(np.int64)
        self.e2 = e2[order].astype(np.int64)
        self.prow = terms.e_row[self.e1].astype(np.int64)
        self.nnz = self.symbolic.nnz
        self.diag_slots = self.symbolic.Lp[:-1]

    def factor(self, q_vals, coef, w):
        vals = np.bincount(self.q_slots, weights=q_vals, minlength=self.nnz)
        _accumulate_pairs(vals, self.slot, self.e1, self.e2, self.prow, coef, w)
        return self.symbolic.factor_slots(vals, max_diag=float(np.max(np.abs(vals[self.diag_slots]))))


# ---------------------------------------------------------------------------
# Inner problem
# ---------------------------------------------------------------------------


@dataclass
class GaussianApprox:
    theta: np.ndarray
    mode: np.ndarray
    factor: object
    loglik: float
    quad: float  # u*^T Q u*
    logdet_q: float
    iterations: int
    grad_norm: float
    _sd: np.ndarray = field(default=None, repr=False)

    @property
    def logdet_h(self):
        return self.factor.logdet

    @property
    def sd(self):
        if self._sd is None:
            self._sd = np.sqrt(self.factor.marginal_variances())
        return self._sd


class LaplaceEngine:
    """Everything that depends on the model but not on theta."""

    def __init__(self, model: AssembledModel, max_newton=100, max_halvings=50, grad_tol=1e-6):
        self.model = model
        self.terms = model.terms
        self.lik = _RowLikelihood(model.terms)
        self.plan = HessianPlan(model)
        self.max_newton = max_newton
        self.max_halvings = max_halvings
        self.grad_tol = grad_tol
        idx = model.index
        self._rw_logdet = 0.0
        if idx.n_causes:
            order = 1 if model.spec.baseline == "rw1" else 2
            D = _difference_matrix(idx.n_bins, order)
            self._rw_logdet = float(np.linalg.slogdet(D.T @ D + RIDGE * np.eye(idx.n_bins))[1])
        self.warm = np.zeros(idx.dim)
        self.n_evals = 0

    def logdet_q(self, theta):
        model, idx, hyp = self.model, self.model.index, self.model.hyper
        total = 0.0
        for e in hyp.entries:
            if e.kind == "re_block":
                d = model.spec.re_blocks[e.key].dim
                total += idx.n_subjects * 2.0 * float(np.sum(theta[e.start : e.start + d]))
            elif e.kind == "rw":
                total += idx.n_bins * theta[e.start] + self._rw_logdet
        n_fixed = idx.dim - idx.gamma_start
        total -= n_fixed * 2.0 * np.log(model.spec.priors.fixed_scale)
        return total

    def inner_newton(self, theta, u0=None):
        """Mode and curvature of p(u | theta, data)."""
        model, terms, lik = self.model, self.terms, self.lik
        theta = np.asarray(theta, dtype=float)
        u = np.array(self.warm if u0 is None else u0, dtype=float)
        phi = model.hyper.phi(theta)
        coef = terms.coefficients(phi)
        A = terms.design(phi)
        At = A.T.tocsr()
        Q = model.prior_precision_scipy(theta)
        q_vals = model.q_values(theta)
        prec = model.residual_precision(theta)

        def objective(u):
            eta = A @ u + terms.offset
            Qu = Q @ u
            return lik.value(eta, prec) - 0.5 * float(u @ Qu), eta, Qu

        f, eta, Qu = objective(u)
        if not np.isfinite(f):
            u = np.zeros_like(u)
            f, eta, Qu = objective(u)
        it = 0
        while True:
            d1, w = lik.derivs(eta, prec)
            g = At @ d1 - Qu
            gn = float(np.max(np.abs(g))) if g.size else 0.0
            try:
                fac = self.plan.factor(q_vals, coef, w)
            except NotPositiveDefinite as e:
                raise InnerDivergence(str(e), {"iterations": it, "grad_norm": gn}) from None
            if gn <= self.grad_tol * (1.0 + float(np.max(np.abs(u), initial=0.0))):
                # one polishing step on the current factor; near the mode
                # Newton converges quadratically so this costs no accuracy
                if gn > 0.0:
                    cand = u + fac.solve(g)
                    fn, eta_n, Qu_n = objective(cand)
                    if np.isfinite(fn) and fn >= f:
                        u, f, eta, Qu = cand, fn, eta_n, Qu_n
                break
            if it >= self.max_newton:
                raise InnerDivergence("Newton iteration limit reached", {"iterations": it, "grad_norm": gn})
            step = fac.solve(g)
            t = 1.0
            for _ in range(self.max_halvings + 1):
                cand = u + t * step
                fn, eta_n, Qu_n = objective(cand)
                if np.isfinite(fn) and fn >= f - 1e-12 * (1.0 + abs(f)):
                    break
                t *= 0.5
            else:
                raise InnerDivergence("line search failed", {"iterations": it, "grad_norm": gn})
            u, f, eta, Qu = cand, fn, eta_n, Qu_n
            it += 1
        self.n_evals += 1
        quad = float(u @ Qu)
        return GaussianApprox(
            theta=theta.copy(),
            mode=u,
            factor=fac,
            loglik=lik.value(eta, prec),
            quad=quad,
            logdet_q=self.logdet_q(theta),
            iterations=it,
            grad_norm=gn,
        )

    def log_hyper_post(self, theta, return_approx=False):
        """Log of the unnormalized Laplace approximation to p(theta | data)."""
        theta = np.asarray(theta, dtype=float)
        try:
            lp = self.model.hyper.log_prior(theta)
            ga = self.inner_newton(theta)
        except (InnerDivergence, SupportError, FloatingPointError, np.linalg.LinAlgError) as e:
            log.debug("infeasible theta %s: %s", theta, e)
            return (-np.inf, None) if return_approx else -np.inf
        self.warm = ga.mode
        val = lp + 0.5 * ga.logdet_q - 0.5 * ga.quad + ga.loglik - 0.5 * ga.logdet_h
        return (val, ga) if return_approx else val


def inner_newton(engine: LaplaceEngine, theta, warm_start=None) -> GaussianApprox:
    return engine.inner_newton(theta, warm_start)


def log_hyper_post(engine: LaplaceEngine, theta) -> float:
    return engine.log_hyper_post(theta)


# ---------------------------------------------------------------------------
# Hyperparameter mode
# ---------------------------------------------------------------------------


@dataclass
class OptimResult:
    theta: np.ndarray
    value: float
    gradient: np.ndarray
    hessian: np.ndarray
    iterations: int
    converged: bool
    message: str
    n_evals: int = 0


def fd_gradient(f, x, h=1e-4, f0=None):
    """Central differences; also returns the diagonal second derivatives."""
    x = np.asarray(x, dtype=float)
    if f0 is None:
        f0 = f(x)
    g = np.empty(x.size)
    d2 = np.empty(x.size)
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = h
        fp, fm = f(x + e), f(x - e)
        g[i] = (fp - fm) / (2 * h)
        d2[i] = (fp - 2 * f0 + fm) / (h * h)
    return g, d2


def fd_hessian(f, x, h=5e-3, f0=None):
    """Central second differences on the diagonal. Off-diagonals average the
    forward and backward mixed differences, reusing the axial values: the
    third-order terms cancel, so the error stays O(h^2) at half the cost of
    the four-point stencil."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if f0 is None:
        f0 = f(x)
    H = np.empty((n, n))
    fp, fm = np.empty(n), np.empty(n)
    E = np.eye(n) * h
    for i in range(n):
        fp[i], fm[i] = f(x + E[i]), f(x - E[i])
        H[i, i] = (fp[i] - 2 * f0 + fm[i]) / (h * h)
    for i in range(n):
        for j in range(i):
            fpp = f(x + E[i] + E[j]) - fp[i] - fp[j] + f0
            fmm = f(x - E[i] - E[j]) - fm[i] - fm[j] + f0
            H[i, j] = H[j, i] = 0.5 * (fpp + fmm) / (h * h)
    return H


def optimize_hyper(
    f, theta0, grad_tol=1e-3, step_tol=1e-4, max_iter=200, fd_step=1e-4, max_step=2.0, f_tol=1e-3, f_window=5
):
    """Quasi-Newton (BFGS) ascent with central finite-difference gradients.

    Stops when the gradient and the step are both small, or when the last
    ``f_window`` accepted steps together gained less than ``f_tol``."""
    x = np.asarray(theta0, dtype=float).copy()
    n = x.size
    evals = [0]

    def F(z):
        evals[0] += 1
        return f(z)

    fx = F(x)
    if not np.isfinite(fx):
        return OptimResult(x, fx, np.full(n, np.nan), None, 0, False, "infeasible start", evals[0])
    if n == 0:
        return OptimResult(x, fx, np.zeros(0), np.zeros((0, 0)), 0, True, "no hyperparameters", evals[0])

    def init_inverse(d2):
        return np.diag(np.where(d2 < -1e-8, -1.0 / np.minimum(d2, -1e-8), 1.0))

    g, d2 = fd_gradient(F, x, fd_step, fx)
    Hinv = init_inverse(d2)
    last_step = np.inf
    gains = []
    converged, msg = False, "iteration limit"
    it = 0
    for it in range(max_iter + 1):
        if not np.all(np.isfinite(g)):
            msg = "non-finite gradient"
            break
        p = Hinv @ g
        if np.max(np.abs(g)) <= grad_tol and (np.max(np.abs(p)) <= step_tol or last_step <= step_tol):
            converged, msg = True, "converged"
            break
        if it == max_iter:
            break
        if g @ p <= 0:  # not an ascent direction: reset curvature
            Hinv = init_inverse(d2)
            p = Hinv @ g
        big = np.max(np.abs(p))
        if big > max_step:
            p *= max_step / big
        t, accepted = 1.0, False
        for _ in range(40):
            fn = F(x + t * p)
            if np.isfinite(fn) and fn >= fx + 1e-4 * t * (g @ p):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            if np.max(np.abs(g)) <= grad_tol:
                converged, msg = True, "converged (no further ascent)"
            else:
                msg = "line search failed"
            break
        s = t * p
        x_new = x + s
        g_new, d2 = fd_gradient(F, x_new, fd_step, fn)
        yv = -(g_new - g)  # gradient change of the minimized function -f
        sy = s @ yv
        if sy > 1e-12:
            rho = 1.0 / sy
            I = np.eye(n)
            Hinv = (I - rho * np.outer(s, yv)) @ Hinv @ (I - rho * np.outer(yv, s)) + rho * np.outer(s, s)
        gains.append(fn - fx)
        x, fx, g = x_new, fn, g_new
        last_step = float(np.max(np.abs(s)))
        if len(gains) >= f_window and sum(gains[-f_window:]) < f_tol:
            # flat ridge: further progress would not move the posterior
            converged, msg = True, "converged (objective stalled)"
            break
    return OptimResult(x, fx, g, None, it, converged, msg, evals[0])


# ---------------------------------------------------------------------------
# Exploration and summaries
# ---------------------------------------------------------------------------


@dataclass
class HyperPoint:
    theta: np.ndarray
    log_post: float
    weight: float
    approx: GaussianApprox = field(default=None, repr=False)


def hyper_covariance(H):
    """-H^-1 with eigenvalue floor; returns (cov, eigenvalues, eigenvectors, ok)."""
    n = H.shape[0]
    if n == 0:
        return np.zeros((0, 0)), np.zeros(0), np.zeros((0, 0)), True
    Hs = -(H + H.T) / 2
    lam, V = np.linalg.eigh(Hs)
    ok = bool(np.all(lam > 0))
    lam_c = np.maximum(lam, 1e-8 * max(np.max(np.abs(lam)), 1.0))
    cov = (V / lam_c) @ V.T
    return cov, lam_c, V, ok


def explore(f_approx, theta_star, H, strategy="EB", z=1.2, mode_value=None, mode_approx=None):
    """Integration points around the mode.

    ``f_approx(theta)`` returns (log_post, GaussianApprox). Returns the points
    and the component covariances used for the hyperparameter mixture.
    """
    theta_star = np.asarray(theta_star, dtype=float)
    if mode_approx is None:
        mode_value, mode_approx = f_approx(theta_star)
    cov, lam, V, ok = hyper_covariance(H)
    if strategy == "EB" or theta_star.size == 0:
        return [HyperPoint(theta_star, mode_value, 1.0, mode_approx)], cov
    if strategy != "FULL":
        raise ValueError(f"unknown strategy {strategy!r}")
    if not ok:
        log.warning("hyperparameter Hessian is not negative definite; falling back to EB")
        return [HyperPoint(theta_star, mode_value, 1.0, mode_approx)], cov
    pts = [HyperPoint(theta_star, mode_value, 1.0, mode_approx)]
    vol = [1.0]
    d = theta_star.size
    for j in range(d):
        for sgn in (1.0, -1.0):
            th = theta_star + sgn * z * V[:, j] / np.sqrt(lam[j])
            lp, ga = f_approx(th)
            pts.append(HyperPoint(th, lp, 0.0, ga))
            vol.append(0.5)
    lps = np.array([p.log_post for p in pts])
    w = np.where(np.isfinite(lps), np.exp(lps - mode_value) * np.array(vol), 0.0)
    w /= w.sum()
    for p, wi in zip(pts, w):
        p.weight = float(wi)
    # the design points carry part of the spread along each axis; the
    # Gaussian components keep the remainder so the mixture matches -H^-1
    frac = np.empty(d)
    for j in range(d):
        frac[j] = (w[1 + 2 * j] + w[2 + 2 * j]) * z * z
    frac = np.clip(1.0 - frac, 0.1, 1.0)
    comp_cov = (V * (frac / lam)) @ V.T
    return pts, comp_cov


@dataclass
class MarginalMixture:
    weights: np.ndarray  # (H,)
    means: np.ndarray  # (H, n)
    sds: np.ndarray  # (H, n)

    def mean(self):
        return self.weights @ self.means

    def var(self):
        m = self.mean()
        return self.weights @ (self.sds**2 + self.means**2) - m * m

    def cdf(self, x):
        return self.weights @ ndtr((np.asarray(x)[None, :] - self.means) / self.sds)

    def quantile(self, q, tol=1e-12):
        """Per-coordinate mixture quantile by bracketed bisection."""
        lo = np.min(self.means + ndtri(q) * self.sds - 1e-9, axis=0)
        hi = np.max(self.means + ndtri(q) * self.sds + 1e-9, axis=0)
        if self.weights.size == 1:
            return self.means[0] + ndtri(q) * self.sds[0]
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            below = self.cdf(mid) < q
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
            if np.max(hi - lo) < tol:
                break
        return 0.5 * (lo + hi)


def latent_marginals(points):
    """Gaussian mixture marginals of every latent coordinate and their summary."""
    w = np.array([p.weight for p in points if p.weight > 0])
    keep = [p for p in points if p.weight > 0]
    mix = MarginalMixture(
        weights=w / w.sum(),
        means=np.array([p.approx.mode for p in keep]),
        sds=np.array([p.approx.sd for p in keep]),
    )
    summary = {
        "mean": mix.mean(),
        "sd": np.sqrt(np.maximum(mix.var(), 0.0)),
        "q025": mix.quantile(0.025),
        "q975": mix.quantile(0.975),
    }
    return mix, summary


def mixture_draws(points, comp_cov, n, rng):
    """theta draws from the mixture of Gaussians centred at the points."""
    w = np.array([p.weight for p in points])
    d = points[0].theta.size
    comp = rng.choice(len(points), size=n, p=w / w.sum())
    centres = np.array([p.theta for p in points])[comp]
    if d == 0:
        return centres, comp
    Lc = np.linalg.cholesky(comp_cov + 1e-300 * np.eye(d)) if np.any(comp_cov) else np.zeros((d, d))
    return centres + rng.standard_normal((n, d)) @ Lc.T, comp


def hyper_summaries(layout, points, comp_cov, rng, n=5000):
    """Natural-scale summaries from Monte Carlo draws of theta."""
    draws, _ = mixture_draws(points, comp_cov, n, rng)
    labels, vals = layout.natural_batch(draws)
    out = {}
    for j, lab in enumerate(labels):
        v = vals[:, j]
        out[lab] = {
            "mean": float(np.mean(v)),
            "sd": float(np.std(v, ddof=1)) if v.size > 1 else 0.0,
            "q025": float(np.quantile(v, 0.025)),
            "q975": float(np.quantile(v, 0.975)),
        }
    return out


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------


@dataclass
class FitResult:
    strategy: str
    converged: bool
    message: str
    theta_labels: list
    theta_mode: np.ndarray
    hessian: np.ndarray
    points: list
    component_cov: np.ndarray
    latent_labels: list
    latent: dict  # mean/sd/q025/q975 arrays
    hyper: dict  # label -> summary
    mlik: float
    timings: dict
    iterations: int
    n_evals: int
    mixture: MarginalMixture = field(default=None, repr=False)
    model: AssembledModel = field(default=None, repr=False)

    def latent_summary(self, label):
        i = self.latent_labels.index(label)
        return {k: float(v[i]) for k, v in self.latent.items()}

    def summary_table(self, include_random=False):
        """(parameter, mean, sd, q025, q975) rows for fixed effects and hyperparameters."""
        rows = []
        for i, lab in enumerate(self.latent_labels):
            if lab.startswith("b[") and not include_random:
                continue
            if lab.startswith("baseline["):
                continue
            rows.append((lab, *(float(self.latent[k][i]) for k in ("mean", "sd", "q025", "q975"))))
        for lab, s in self.hyper.items():
            rows.append((lab, s["mean"], s["sd"], s["q025"], s["q975"]))
        return rows

    def estimates(self):
        """Posterior means and 95% intervals keyed by parameter label."""
        return {r[0]: {"mean": r[1], "sd": r[2], "q025": r[3], "q975": r[4]} for r in self.summary_table()}

    def to_json(self, include_random=False):
        keep = [i for i, lab in enumerate(self.latent_labels) if include_random or not lab.startswith("b[")]
        return {
            "strategy": self.strategy,
            "converged": self.converged,
            "message": self.message,
            "theta": {
                "labels": self.theta_labels,
                "mode": self.theta_mode.tolist(),
                "hessian": None if self.hessian is None else self.hessian.tolist(),
            },
            "hyper_points": [
                {"theta": p.theta.tolist(), "log_post": _finite(p.log_post), "weight": p.weight} for p in self.points
            ],
            "latent": {
                "labels": [self.latent_labels[i] for i in keep],
                **{k: [float(v[i]) for i in keep] for k, v in self.latent.items()},
            },
            "hyper": self.hyper,
            # under EB the hyper intervals come only from the curvature at the mode
            "hyper_interval_method": "curvature at mode (approximate)" if self.strategy == "EB" else "mixture over design points",
            "mlik": _finite(self.mlik),
            "diagnostics": {"iterations": self.iterations, "n_evals": self.n_evals},
            "timings": self.timings,
        }


def _finite(x):
    return float(x) if np.isfinite(x) else None


def fit(
    model: AssembledModel,
    strategy="EB",
    theta0=None,
    z=1.2,
    seed=0,
    n_hyper_samples=5000,
    grad_tol=1e-3,
    step_tol=1e-4,
    max_iter=200,
    f_tol=1e-3,
    hessian_step=5e-3,
):
    """Mode search, exploration and summaries for an assembled model."""
    if strategy not in ("EB", "FULL"):
        raise ValueError(f"unknown strategy {strategy!r}")
    timings = {}
    t0 = time.perf_counter()
    engine = LaplaceEngine(model)
    timings["setup"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    start = model.hyper.default_theta() if theta0 is None else np.asarray(theta0, dtype=float)
    opt = optimize_hyper(
        engine.log_hyper_post, start, grad_tol=grad_tol, step_tol=step_tol, max_iter=max_iter, f_tol=f_tol
    )
    timings["optimize"] = time.perf_counter() - t0
    log.info("hyper mode: %s after %d iterations (%s)", opt.converged, opt.iterations, opt.message)

    t0 = time.perf_counter()
    mode_value, mode_approx = engine.log_hyper_post(opt.theta, return_approx=True)
    converged = opt.converged and mode_approx is not None
    message = opt.message
    if mode_approx is None:
        raise InnerDivergence("inner problem failed at the hyperparameter mode")
    H = fd_hessian(engine.log_hyper_post, opt.theta, h=hessian_step, f0=mode_value) if opt.theta.size else np.zeros((0, 0))
    engine.warm = mode_approx.mode
    timings["hessian"] = time.perf_counter() - t0

    t0 = time.perf_counter()

    def f_approx(th):
        engine.warm = mode_approx.mode
        return engine.log_hyper_post(th, return_approx=True)

    points, comp_cov = explore(f_approx, opt.theta, H, strategy, z, mode_value, mode_approx)
    timings["explore"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    mix, latent = latent_marginals(points)
    rng = np.random.default_rng(seed)
    hyper = hyper_summaries(model.hyper, points, comp_cov, rng, n_hyper_samples) if opt.theta.size else {}
    timings["summaries"] = time.perf_counter() - t0
    timings["total"] = float(sum(timings.values()))

    d = opt.theta.size
    if d:
        _, lam, _, _ = hyper_covariance(H)
        mlik = mode_value + 0.5 * d * LOG2PI - 0.5 * float(np.sum(np.log(lam)))
    else:
        mlik = mode_value
    return FitResult(
        strategy=strategy,
        converged=bool(converged),
        message=message,
        theta_labels=model.hyper.labels(),
        theta_mode=opt.theta,
        hessian=H,
        points=points,
        component_cov=comp_cov,
        latent_labels=model.index.labels(),
        latent=latent,
        hyper=hyper,
        mlik=float(mlik),
        timings=timings,
        iterations=opt.iterations,
        n_evals=opt.n_evals + engine.n_evals,
        mixture=mix,
        model=model,
    )


def sample_joint_posterior(fit_result: FitResult, n_samples, seed=0):
    """Joint draws of (theta, u): pick a point by weight, perturb theta with
    the component covariance and draw u from N(u*, H^-1)."""
    rng = np.random.default_rng(seed)
    pts = fit_result.points
    d = fit_result.theta_mode.size
    dim = pts[0].approx.mode.size
    if n_samples == 0:
        return {"theta": np.zeros((0, d)), "u": np.zeros((0, dim))}
    thetas, comp = mixture_draws(pts, fit_result.component_cov, n_samples, rng)
    U = np.empty((n_samples, dim))
    for i, h in enumerate(comp):
        ga = pts[h].approx
        U[i] = ga.mode + ga.factor.solve_lt(rng.standard_normal(dim))
    return {"theta": thetas, "u": U}
