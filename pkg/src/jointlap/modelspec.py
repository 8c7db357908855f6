"""Declarative model description, time bases, prior densities and the
unconstrained parameterization of hyperparameters."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.interpolate import BSpline
from scipy.special import gammaln, multigammaln

MAX_BLOCK_DIM = 10

CANONICAL_LINKS = {"gaussian": "identity", "poisson": "log", "binomial": "logit"}
ASSOCIATION_KINDS = ("current_value", "current_slope", "shared_random_effect")


class SpecError(ValueError):
    """Invalid model specification; ``path`` locates the offending field."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


class SupportError(ValueError):
    pass


class KnotOrderError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Family:
    kind: str
    link: str = ""

    def __post_init__(self):
        if self.kind not in CANONICAL_LINKS:
            raise SpecError("family", f"unknown family {self.kind!r}")
        if not self.link:
            object.__setattr__(self, "link", CANONICAL_LINKS[self.kind])
        elif self.link != CANONICAL_LINKS[self.kind]:
            raise SpecError("family.link", f"{self.kind} requires link {CANONICAL_LINKS[self.kind]!r}")


@dataclass(frozen=True)
class TimeBasis:
    kind: str = "linear"  # "linear" | "ns"
    interior_knots: tuple = ()
    boundary_knots: tuple = ()

    @property
    def names(self):
        if self.kind == "linear":
            return ("time",)
        return tuple(f"ns{i + 1}" for i in range(len(self.interior_knots) + 1))

    def evaluate(self, t):
        """(values, derivatives) with shape (len(t), n_columns)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if self.kind == "linear":
            return t[:, None].copy(), np.ones((t.size, 1))
        return ns_basis(self.interior_knots, self.boundary_knots, t)


@dataclass(frozen=True)
class LongSubmodelSpec:
    marker_id: str
    family: Family
    fixed_terms: tuple
    random_terms: tuple
    time_basis: TimeBasis = TimeBasis()


@dataclass(frozen=True)
class REBlockSpec:
    members: tuple  # ((marker_id, term), ...)
    nu: Optional[float] = None
    scale: Optional[tuple] = None  # row-major d*d, default identity

    @property
    def dim(self):
        return len(self.members)

    def prior_params(self):
        d = self.dim
        nu = float(self.nu) if self.nu is not None else d + 2.0
        S = np.eye(d) if self.scale is None else np.asarray(self.scale, dtype=float).reshape(d, d)
        return nu, S


@dataclass(frozen=True)
class AssociationTerm:
    marker: str
    kind: str
    term: Optional[str] = None  # for shared_random_effect

    @property
    def label(self):
        if self.kind == "shared_random_effect":
            return f"{self.marker}:{self.term}"
        return f"{self.marker}:{self.kind}"


@dataclass(frozen=True)
class SurvSubmodelSpec:
    cause_id: int
    covariates: tuple = ()
    association: tuple = ()


@dataclass(frozen=True)
class PriorSpec:
    fixed_scale: float = 2.5
    assoc_scale: float = 2.5
    residual_shape: float = 1.0
    residual_rate: float = 5e-5
    pc_u: float = 1.0
    pc_alpha: float = 0.01

    @property
    def pc_lambda(self):
        # P(sigma > u) = alpha with sigma = tau^-1/2
        return -np.log(self.pc_alpha) / self.pc_u


@dataclass(frozen=True)
class ModelSpec:
    markers: tuple
    re_blocks: tuple = ()
    causes: tuple = ()
    n_bins: int = 15
    baseline: str = "rw2"
    priors: PriorSpec = PriorSpec()

    def marker(self, marker_id):
        for m in self.markers:
            if m.marker_id == marker_id:
                return m
        raise KeyError(marker_id)

    @property
    def re_dim(self):
        return sum(b.dim for b in self.re_blocks)

    @property
    def covariate_names(self):
        names = set()
        for m in self.markers:
            for t in m.fixed_terms:
                for f in t.split(":"):
                    if f != "intercept" and f not in m.time_basis.names:
                        names.add(f)
        return sorted(names)

    @property
    def surv_covariate_names(self):
        return sorted({c for cause in self.causes for c in cause.covariates})

    # -- (de)serialization --------------------------------------------------

    @classmethod
    def from_dict(cls, d):
        markers = []
        for i, md in enumerate(d.get("markers", [])):
            path = f"markers[{i}]"
            basis_d = md.get("time_basis", "linear")
            if basis_d == "linear" or basis_d is None:
                basis = TimeBasis()
            elif isinstance(basis_d, dict) and "ns" in basis_d:
                ns = basis_d["ns"]
                basis = TimeBasis("ns", tuple(map(float, ns["knots"])), tuple(map(float, ns["boundary"])))
            else:
                raise SpecError(f"{path}.time_basis", f"unsupported time basis {basis_d!r}")
            if "id" not in md:
                raise SpecError(f"{path}.id", "missing marker id")
            markers.append(
                LongSubmodelSpec(
                    marker_id=str(md["id"]),
                    family=Family(md.get("family", "gaussian")),
                    fixed_terms=tuple(md.get("fixed", ["intercept"])),
                    random_terms=tuple(md.get("random", [])),
                    time_basis=basis,
                )
            )
        blocks = []
        for bd in d.get("re_blocks", []) or []:
            prior = bd.get("prior", {}) or {}
            scale = prior.get("scale")
            blocks.append(
                REBlockSpec(
                    members=tuple((str(m[0]), str(m[1])) for m in bd["members"]),
                    nu=prior.get("nu"),
                    scale=None if scale is None else tuple(np.ravel(scale).tolist()),
                )
            )
        if not blocks:
            members = tuple((m.marker_id, t) for m in markers for t in m.random_terms)
            if members:
                blocks = [REBlockSpec(members)]
        surv = d.get("survival") or {}
        causes = []
        for cd in surv.get("causes", []) or []:
            assoc = []
            for ad in cd.get("association", []) or []:
                assoc.append(AssociationTerm(str(ad["marker"]), ad["kind"], ad.get("term")))
            causes.append(
                SurvSubmodelSpec(int(cd["id"]), tuple(cd.get("covariates", []) or []), tuple(assoc))
            )
        pd_ = d.get("priors", {}) or {}
        priors = PriorSpec(
            fixed_scale=float(pd_.get("fixed_scale", 2.5)),
            assoc_scale=float(pd_.get("assoc_scale", 2.5)),
            residual_shape=float(pd_.get("residual_shape", 1.0)),
            residual_rate=float(pd_.get("residual_rate", 5e-5)),
            pc_u=float(pd_.get("pc_u", 1.0)),
            pc_alpha=float(pd_.get("pc_alpha", 0.01)),
        )
        return cls(
            markers=tuple(markers),
            re_blocks=tuple(blocks),
            causes=tuple(causes),
            n_bins=int(surv.get("bins", 15)),
            baseline=str(surv.get("baseline", "rw2")),
            priors=priors,
        )

    def to_dict(self):
        def basis(b):
            if b.kind == "linear":
                return "linear"
            return {"ns": {"knots": list(b.interior_knots), "boundary": list(b.boundary_knots)}}

        out = {
            "markers": [
                {
                    "id": m.marker_id,
                    "family": m.family.kind,
                    "time_basis": basis(m.time_basis),
                    "fixed": list(m.fixed_terms),
                    "random": list(m.random_terms),
                }
                for m in self.markers
            ],
            "re_blocks": [
                {
                    "members": [list(x) for x in b.members],
                    "prior": {"nu": b.prior_params()[0], "scale": b.prior_params()[1].tolist()},
                }
                for b in self.re_blocks
            ],
            "priors": self.priors.__dict__.copy(),
        }
        if self.causes:
            out["survival"] = {
                "bins": self.n_bins,
                "baseline": self.baseline,
                "causes": [
                    {
                        "id": c.cause_id,
                        "covariates": list(c.covariates),
                        "association": [
                            {k: v for k, v in a.__dict__.items() if v is not None} for a in c.association
                        ],
                    }
                    for c in self.causes
                ],
            }
        return out


def validate(spec: ModelSpec) -> ModelSpec:
    """Check all structural invariants; returns the spec unchanged."""
    if not spec.markers:
        raise SpecError("markers", "at least one longitudinal submodel is required")
    seen = set()
    for i, m in enumerate(spec.markers):
        path = f"markers[{i}]"
        if m.marker_id in seen:
            raise SpecError(f"{path}.id", f"duplicate marker id {m.marker_id!r}")
        seen.add(m.marker_id)
        if "intercept" not in m.fixed_terms:
            raise SpecError(f"{path}.fixed", "intercept must be a fixed term")
        if len(set(m.fixed_terms)) != len(m.fixed_terms):
            raise SpecError(f"{path}.fixed", "duplicate fixed terms")
        extra = set(m.random_terms) - set(m.fixed_terms)
        if extra:
            raise SpecError(f"{path}.random", f"random terms {sorted(extra)} are not fixed terms")
        b = m.time_basis
        if b.kind == "ns":
            _check_knots(b.interior_knots, b.boundary_knots, f"{path}.time_basis")
        for t in m.fixed_terms:
            for f in t.split(":"):
                if not f:
                    raise SpecError(f"{path}.fixed", f"malformed term {t!r}")
                if f.startswith("ns") and f[2:].isdigit() and f not in b.names:
                    raise SpecError(f"{path}.fixed", f"term {f!r} not provided by the time basis")
                if f == "time" and b.kind != "linear":
                    raise SpecError(f"{path}.fixed", "'time' requires a linear time basis")

    all_random = [(m.marker_id, t) for m in spec.markers for t in m.random_terms]
    covered = []
    for j, blk in enumerate(spec.re_blocks):
        path = f"re_blocks[{j}]"
        if blk.dim > MAX_BLOCK_DIM:
            raise SpecError(path, f"block dimension {blk.dim} exceeds the limit of {MAX_BLOCK_DIM}")
        if blk.dim == 0:
            raise SpecError(path, "empty block")
        nu, S = blk.prior_params()
        if nu <= blk.dim - 1:
            raise SpecError(f"{path}.prior.nu", "degrees of freedom must exceed dim - 1")
        if S.shape != (blk.dim, blk.dim) or np.any(np.linalg.eigvalsh((S + S.T) / 2) <= 0):
            raise SpecError(f"{path}.prior.scale", "scale matrix must be positive definite")
        covered.extend(blk.members)
    if sorted(covered) != sorted(all_random) or len(set(covered)) != len(covered):
        raise SpecError("re_blocks", "blocks must partition the random terms exactly")

    if spec.causes:
        if spec.n_bins < 3:
            raise SpecError("survival.bins", "need at least 3 bins")
        if spec.baseline not in ("rw1", "rw2"):
            raise SpecError("survival.baseline", "baseline must be rw1 or rw2")
        ids = [c.cause_id for c in spec.causes]
        if sorted(ids) != list(range(1, len(ids) + 1)):
            raise SpecError("survival.causes", "cause ids must be 1..M")
        for ci, c in enumerate(spec.causes):
            for ai, a in enumerate(c.association):
                path = f"survival.causes[{ci}].association[{ai}]"
                if a.kind not in ASSOCIATION_KINDS:
                    raise SpecError(path, f"unknown association kind {a.kind!r}")
                try:
                    m = spec.marker(a.marker)
                except KeyError:
                    raise SpecError(path, f"unknown marker {a.marker!r}") from None
                if a.kind == "shared_random_effect" and a.term not in m.random_terms:
                    raise SpecError(path, f"{a.term!r} is not a random term of {a.marker!r}")

    p = spec.priors
    for name in ("fixed_scale", "assoc_scale", "residual_shape", "residual_rate", "pc_u"):
        if not getattr(p, name) > 0:
            raise SpecError(f"priors.{name}", "must be positive")
    if not 0 < p.pc_alpha < 1:
        raise SpecError("priors.pc_alpha", "must lie in (0, 1)")
    return spec


def _check_knots(interior, boundary, path="knots"):
    if len(boundary) != 2 or not boundary[0] < boundary[1]:
        raise KnotOrderError(f"{path}: boundary knots must be increasing")
    k = np.asarray(interior, dtype=float)
    if k.size and (np.any(np.diff(k) <= 0) or k[0] <= boundary[0] or k[-1] >= boundary[1]):
        raise KnotOrderError(f"{path}: interior knots must be increasing and inside the boundary")


# ---------------------------------------------------------------------------
# Natural cubic splines
# ---------------------------------------------------------------------------


def ns_basis(interior_knots, boundary_knots, t):
    """Natural cubic spline basis without intercept and its first derivative.

    Same construction as R's ``splines::ns``: cubic B-splines on the augmented
    knot vector, projected onto the null space of the second-derivative
    constraints at the boundary knots. Linear beyond the boundary knots.
    Returns two arrays of shape (len(t), len(interior_knots) + 1).
    """
    _check_knots(interior_knots, boundary_knots)
    a, b = map(float, boundary_knots)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    knots = np.concatenate([[a] * 4, np.asarray(interior_knots, dtype=float), [b] * 4])
    nb = knots.size - 4
    spl = BSpline(knots, np.eye(nb), 3, extrapolate=True)
    d1 = spl.derivative(1)
    const = spl.derivative(2)(np.array([a, b]))[:, 1:]
    q, _ = np.linalg.qr(const.T, mode="complete")
    proj = q[:, 2:]

    inside = np.clip(t, a, b)
    val = spl(inside)[:, 1:] @ proj
    der = d1(inside)[:, 1:] @ proj
    lo, hi = t < a, t > b
    if lo.any() or hi.any():
        edge_val = spl(np.array([a, b]))[:, 1:] @ proj
        edge_der = d1(np.array([a, b]))[:, 1:] @ proj
        val[lo] = edge_val[0] + np.outer(t[lo] - a, edge_der[0])
        val[hi] = edge_val[1] + np.outer(t[hi] - b, edge_der[1])
        der[lo] = edge_der[0]
        der[hi] = edge_der[1]
    return val, der


def term_columns(terms, basis: TimeBasis, t, covariates):
    """Design values and time-derivatives for a list of terms.

    ``covariates`` maps covariate name to an array broadcastable to t.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    bval, bder = basis.evaluate(t)
    names = basis.names
    n = t.size

    def factor(f):
        if f == "intercept":
            return np.ones(n), np.zeros(n)
        if f in names:
            k = names.index(f)
            return bval[:, k], bder[:, k]
        if f not in covariates:
            raise KeyError(f"covariate {f!r} not available")
        return np.broadcast_to(np.asarray(covariates[f], dtype=float), (n,)), np.zeros(n)

    X = np.empty((n, len(terms)))
    dX = np.empty((n, len(terms)))
    for j, term in enumerate(terms):
        v, dv = np.ones(n), np.zeros(n)
        for f in term.split(":"):
            fv, fd = factor(f)
            v, dv = v * fv, dv * fv + v * fd
        X[:, j] = v
        dX[:, j] = dv
    return X, dX


# ---------------------------------------------------------------------------
# Prior densities
# ---------------------------------------------------------------------------


def prior_logdensity(kind, value, **params):
    """Log density of a prior at ``value``.

    kinds: ``gaussian`` (mean, scale), ``pc_prec`` (lam) on a precision,
    ``gamma`` (shape, rate) on a precision, ``inv_wishart`` (nu, S) on a
    covariance matrix.
    """
    if kind == "gaussian":
        mean, scale = params.get("mean", 0.0), params["scale"]
        z = (np.asarray(value, dtype=float) - mean) / scale
        return float(np.sum(-0.5 * z * z - np.log(scale) - 0.5 * np.log(2 * np.pi)))
    if kind == "pc_prec":
        tau = float(value)
        if not tau > 0:
            raise SupportError("precision must be positive")
        lam = params["lam"]
        return np.log(lam / 2.0) - 1.5 * np.log(tau) - lam / np.sqrt(tau)
    if kind == "gamma":
        tau = float(value)
        if not tau > 0:
            raise SupportError("precision must be positive")
        a, b = params["shape"], params["rate"]
        return a * np.log(b) - gammaln(a) + (a - 1) * np.log(tau) - b * tau
    if kind == "inv_wishart":
        sigma = np.asarray(value, dtype=float)
        nu, S = params["nu"], np.asarray(params["S"], dtype=float)
        d = sigma.shape[0]
        try:
            c = np.linalg.cholesky(sigma)
        except np.linalg.LinAlgError:
            raise SupportError("covariance must be positive definite") from None
        logdet_sigma = 2 * np.sum(np.log(np.diag(c)))
        _, logdet_s = np.linalg.slogdet(S)
        inv = np.linalg.solve(sigma, S)
        return (
            0.5 * nu * logdet_s
            - 0.5 * nu * d * np.log(2.0)
            - multigammaln(0.5 * nu, d)
            - 0.5 * (nu + d + 1) * logdet_sigma
            - 0.5 * np.trace(inv)
        )
    raise ValueError(f"unknown prior kind {kind!r}")


# ---------------------------------------------------------------------------
# Unconstrained parameterization
# ---------------------------------------------------------------------------


def precision_to_theta(tau):
    """log precision; also returns log|d tau / d theta|."""
    if not tau > 0:
        raise SupportError("precision must be positive")
    theta = float(np.log(tau))
    return theta, theta


def theta_to_precision(theta):
    return float(np.exp(theta))


def chol_to_theta(L):
    d = L.shape[0]
    return np.concatenate([np.log(np.diag(L)), L[np.tril_indices(d, -1)]])


def theta_to_chol(theta, d):
    theta = np.asarray(theta, dtype=float)
    L = np.zeros((d, d))
    L[np.diag_indices(d)] = np.exp(theta[:d])
    L[np.tril_indices(d, -1)] = theta[d:]
    return L


def block_dim_from_theta(n):
    d = int(round((np.sqrt(8 * n + 1) - 1) / 2))
    if d * (d + 1) // 2 != n:
        raise ValueError(f"{n} is not a triangular number")
    return d


def re_precision_to_theta(P):
    """Log-Cholesky coordinates of a precision matrix.

    theta = (log L_11, ..., log L_dd, L_21, L_31, L_32, ...) with P = L L^T.
    Also returns log|d vech(P) / d theta|.
    """
    P = np.atleast_2d(np.asarray(P, dtype=float))
    try:
        L = np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        raise SupportError("precision block must be positive definite") from None
    theta = chol_to_theta(L)
    return theta, re_log_jacobian(theta)


def theta_to_re_precision(theta):
    theta = np.asarray(theta, dtype=float)
    d = block_dim_from_theta(theta.size)
    L = theta_to_chol(theta, d)
    return L @ L.T


def re_log_jacobian(theta):
    """log|d vech(L L^T) / d theta| for the log-Cholesky coordinates."""
    theta = np.asarray(theta, dtype=float)
    d = block_dim_from_theta(theta.size)
    powers = d - np.arange(d) + 1  # d - i + 2 for 1-based i
    return d * np.log(2.0) + float(np.sum(powers * theta[:d]))


def vech(M):
    return M[np.tril_indices(M.shape[0])]
