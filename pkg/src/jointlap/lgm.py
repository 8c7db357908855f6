"""Latent Gaussian model assembly: latent layout, prior precision Q(theta)
and the observation terms linking data to linear functionals of u."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import modelspec as ms
from .augment import (
    BinPartition,
    LongDataset,
    SurvDataset,
    ValidationError,
    check_family_support,
    partition_time,
    poisson_augment,
)
from .numkernel import SymSparse

RIDGE = 1e-5

# observation family codes
# HAZARD rows integrate the hazard over an exposure piece; EVENT rows add
# log h(T) at an observed event time
GAUSSIAN, POISSON, BINOMIAL, HAZARD, EVENT = 0, 1, 2, 3, 4
FAMILY_CODES = {"gaussian": GAUSSIAN, "poisson": POISSON, "binomial": BINOMIAL}


# ---------------------------------------------------------------------------
# Prior precision pieces
# ---------------------------------------------------------------------------


def _difference_matrix(B, order):
    D = np.eye(B)
    for _ in range(order):
        D = np.diff(D, axis=0)
    return D


def rw_precision(B, tau, order=2):
    if B < order + 1 or not tau > 0:
        raise ValueError("need B > order and tau > 0")
    D = _difference_matrix(B, order)
    return SymSparse.from_dense(tau * D.T @ D)


def rw2_precision(B, tau):
    """tau * D^T D with D the (B-2) x B second-difference matrix."""
    return rw_precision(B, tau, 2)


def rw1_precision(B, tau):
    return rw_precision(B, tau, 1)


def re_precision(theta):
    """Dense precision block L L^T from log-Cholesky coordinates."""
    return ms.theta_to_re_precision(theta)


# ---------------------------------------------------------------------------
# Layouts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LatentIndex:
    subjects: tuple
    re_terms: tuple  # ((marker, term), ...) in block order
    n_causes: int
    n_bins: int
    gamma_terms: tuple  # per cause: tuple of covariate names
    beta_terms: tuple  # per marker: tuple of fixed terms
    marker_ids: tuple

    @property
    def n_subjects(self):
        return len(self.subjects)

    @property
    def re_dim(self):
        return len(self.re_terms)

    @property
    def spline_start(self):
        return self.n_subjects * self.re_dim

    @property
    def gamma_start(self):
        return self.spline_start + self.n_causes * self.n_bins

    @property
    def beta_start(self):
        return self.gamma_start + sum(len(g) for g in self.gamma_terms)

    @property
    def dim(self):
        return self.beta_start + sum(len(b) for b in self.beta_terms)

    def re(self, subject, marker, term):
        return subject * self.re_dim + self.re_terms.index((marker, term))

    def spline(self, cause, b):
        return self.spline_start + (cause - 1) * self.n_bins + b

    def gamma(self, cause, j=0):
        return self.gamma_start + sum(len(g) for g in self.gamma_terms[: cause - 1]) + j

    def beta(self, marker, j=0):
        k = self.marker_ids.index(marker)
        return self.beta_start + sum(len(b) for b in self.beta_terms[:k]) + j

    def labels(self):
        out = []
        for s in self.subjects:
            out.extend(f"b[{s},{m}:{t}]" for m, t in self.re_terms)
        for c in range(1, self.n_causes + 1):
            out.extend(f"baseline[{c},{b}]" for b in range(self.n_bins))
        for c, g in enumerate(self.gamma_terms, start=1):
            out.extend(f"gamma[{c}:{x}]" for x in g)
        for m, b in zip(self.marker_ids, self.beta_terms):
            out.extend(f"beta[{m}:{t}]" for t in b)
        return out

    def fixed_slice(self):
        """Coordinates of the population-level effects (gamma and beta)."""
        return slice(self.gamma_start, self.dim)


@dataclass(frozen=True)
class HyperEntry:
    kind: str  # resid | re_block | rw | phi
    key: object
    start: int
    size: int

    @property
    def slice(self):
        return slice(self.start, self.start + self.size)


@dataclass(frozen=True)
class HyperLayout:
    """Unconstrained hyperparameter vector theta and its prior."""

    entries: tuple
    spec: ms.ModelSpec

    @classmethod
    def from_spec(cls, spec):
        entries = []
        pos = 0

        def add(kind, key, size):
            nonlocal pos
            entries.append(HyperEntry(kind, key, pos, size))
            pos += size

        for m in spec.markers:
            if m.family.kind == "gaussian":
                add("resid", m.marker_id, 1)
        for j, blk in enumerate(spec.re_blocks):
            add("re_block", j, blk.dim * (blk.dim + 1) // 2)
        for c in spec.causes:
            add("rw", c.cause_id, 1)
        for c in spec.causes:
            for a in c.association:
                add("phi", (c.cause_id, a.label), 1)
        return cls(tuple(entries), spec)

    @property
    def dim(self):
        return sum(e.size for e in self.entries)

    def find(self, kind, key):
        for e in self.entries:
            if e.kind == kind and e.key == key:
                return e
        raise KeyError((kind, key))

    @property
    def phi_entries(self):
        return [e for e in self.entries if e.kind == "phi"]

    def phi(self, theta):
        return np.array([theta[e.start] for e in self.phi_entries])

    def labels(self):
        out = []
        for e in self.entries:
            if e.kind == "resid":
                out.append(f"log_prec[{e.key}]")
            elif e.kind == "re_block":
                mem = self.spec.re_blocks[e.key].members
                d = len(mem)
                out.extend(f"log_L[{mem[i][0]}:{mem[i][1]}]" for i in range(d))
                out.extend(
                    f"L[{mem[i][0]}:{mem[i][1]},{mem[j][0]}:{mem[j][1]}]" for i, j in zip(*np.tril_indices(d, -1))
                )
            elif e.kind == "rw":
                out.append(f"log_tau_baseline[{e.key}]")
            else:
                out.append(f"phi[{e.key[0]},{e.key[1]}]")
        return out

    def default_theta(self):
        return np.zeros(self.dim)

    def log_prior(self, theta):
        """Log prior density of theta, including the Jacobians of the maps."""
        p = self.spec.priors
        lam = p.pc_lambda
        total = 0.0
        for e in self.entries:
            th = theta[e.slice]
            if e.kind == "resid":
                tau = np.exp(th[0])
                total += ms.prior_logdensity("gamma", tau, shape=p.residual_shape, rate=p.residual_rate) + th[0]
            elif e.kind == "re_block":
                blk = self.spec.re_blocks[e.key]
                nu, S = blk.prior_params()
                L = ms.theta_to_chol(th, blk.dim)
                Linv = np.linalg.inv(L)
                sigma = Linv.T @ Linv
                logdet_p = 2.0 * np.sum(th[: blk.dim])
                total += (
                    ms.prior_logdensity("inv_wishart", sigma, nu=nu, S=S)
                    - (blk.dim + 1) * logdet_p
                    + ms.re_log_jacobian(th)
                )
            elif e.kind == "rw":
                tau = np.exp(th[0])
                total += ms.prior_logdensity("pc_prec", tau, lam=lam) + th[0]
            else:
                total += ms.prior_logdensity("gaussian", th[0], scale=p.assoc_scale)
        return float(total)

    def natural(self, theta):
        """Natural-scale quantities reported in summaries (ordered dict)."""
        out = {}
        for e in self.entries:
            th = theta[e.slice]
            if e.kind == "resid":
                out[f"sigma_eps[{e.key}]"] = float(np.exp(-0.5 * th[0]))
            elif e.kind == "re_block":
                mem = self.spec.re_blocks[e.key].members
                d = len(mem)
                L = ms.theta_to_chol(th, d)
                Linv = np.linalg.inv(L)
                sigma = Linv.T @ Linv
                for i in range(d):
                    out[f"var[{mem[i][0]}:{mem[i][1]}]"] = float(sigma[i, i])
                for i, j in zip(*np.tril_indices(d, -1)):
                    out[f"cov[{mem[j][0]}:{mem[j][1]},{mem[i][0]}:{mem[i][1]}]"] = float(sigma[i, j])
            elif e.kind == "rw":
                out[f"tau_baseline[{e.key}]"] = float(np.exp(th[0]))
            else:
                out[f"phi[{e.key[0]},{e.key[1]}]"] = float(th[0])
        return out

    def natural_batch(self, thetas):
        """natural() over the rows of a 2-d array; returns (labels, values)."""
        thetas = np.atleast_2d(thetas)
        labels = list(self.natural(thetas[0]).keys()) if len(thetas) else list(self.natural(self.default_theta()))
        vals = np.empty((len(thetas), len(labels)))
        col = 0
        for e in self.entries:
            th = thetas[:, e.slice]
            if e.kind == "resid":
                vals[:, col] = np.exp(-0.5 * th[:, 0])
                col += 1
            elif e.kind == "re_block":
                d = self.spec.re_blocks[e.key].dim
                tri = np.tril_indices(d, -1)
                for r in range(len(thetas)):
                    L = ms.theta_to_chol(th[r], d)
                    Linv = np.linalg.inv(L)
                    sigma = Linv.T @ Linv
                    vals[r, col : col + d] = np.diag(sigma)
                    vals[r, col + d : col + d + len(tri[0])] = sigma[tri]
                col += d + len(tri[0])
            elif e.kind == "rw":
                vals[:, col] = np.exp(th[:, 0])
                col += 1
            else:
                vals[:, col] = th[:, 0]
                col += 1
        return labels, vals

    def theta_from_natural(self, resid_sd=None, re_cov=None, rw_tau=None, phi=None):
        """Build theta from natural-scale values; missing pieces stay 0."""
        theta = self.default_theta()
        for e in self.entries:
            if e.kind == "resid" and resid_sd and e.key in resid_sd:
                theta[e.start] = -2.0 * np.log(resid_sd[e.key])
            elif e.kind == "re_block" and re_cov is not None and e.key < len(re_cov):
                theta[e.slice] = ms.re_precision_to_theta(np.linalg.inv(re_cov[e.key]))[0]
            elif e.kind == "rw" and rw_tau and e.key in rw_tau:
                theta[e.start] = np.log(rw_tau[e.key])
            elif e.kind == "phi" and phi and e.key in phi:
                theta[e.start] = phi[e.key]
        return theta


# ---------------------------------------------------------------------------
# Observation terms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ObservationTerm:
    """Single-row view: eta = a.u + sum_j phi_j (sub_j.u) + offset."""

    family: int
    y: float
    a: dict
    offset: float
    phi_weights: list

    def eta(self, u, phi):
        out = self.offset + sum(c * u[k] for k, c in self.a.items())
        for j, sub in self.phi_weights:
            out += phi[j] * sum(c * u[k] for k, c in sub.items())
        return out


@dataclass
class ObservationTerms:
    """All observation rows in struct-of-arrays form.

    Entries (row, col, coef, phi) with phi = -1 for plain coefficients and
    phi = j for entries scaled by the j-th association parameter. Entries
    are sorted by row.
    """

    family: np.ndarray
    y: np.ndarray
    offset: np.ndarray
    prec_index: np.ndarray  # theta index of the residual log precision, -1 otherwise
    subject: np.ndarray
    e_row: np.ndarray
    e_col: np.ndarray
    e_coef: np.ndarray
    e_phi: np.ndarray
    dim: int
    indptr: np.ndarray = field(init=False)

    def __post_init__(self):
        order = np.argsort(self.e_row, kind="stable")
        for name in ("e_row", "e_col", "e_coef", "e_phi"):
            setattr(self, name, np.ascontiguousarray(getattr(self, name)[order]))
        self.indptr = np.concatenate([[0], np.cumsum(np.bincount(self.e_row, minlength=self.n_rows))]).astype(np.int64)

    @property
    def n_rows(self):
        return self.y.size

    def coefficients(self, phi):
        phi_ext = np.append(np.asarray(phi, dtype=float), 1.0)
        return self.e_coef * phi_ext[self.e_phi]

    def design(self, phi):
        """Sparse matrix A(phi) with eta = A u + offset."""
        return sp.csr_matrix((self.coefficients(phi), self.e_col, self.indptr), shape=(self.n_rows, self.dim))

    def eta(self, u, phi):
        return self.design(phi) @ u + self.offset

    def term(self, r):
        lo, hi = self.indptr[r], self.indptr[r + 1]
        a, subs = {}, {}
        for col, c, j in zip(self.e_col[lo:hi], self.e_coef[lo:hi], self.e_phi[lo:hi]):
            target = a if j < 0 else subs.setdefault(int(j), {})
            target[int(col)] = target.get(int(col), 0.0) + float(c)
        return ObservationTerm(
            int(self.family[r]), float(self.y[r]), a, float(self.offset[r]), sorted(subs.items())
        )


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------


def _subject_covariates(names, subjects, long, surv, subj_of_long):
    """Baseline covariate values per subject: survival column first, else the
    subject's first longitudinal record."""
    n = len(subjects)
    out = {}
    first = np.full(n, -1)
    if len(long):
        idx = np.arange(len(long))[::-1]
        first[subj_of_long[idx]] = idx
    for name in names:
        if surv is not None and name in surv.covariates:
            out[name] = np.asarray(surv.covariates[name], dtype=float)
            continue
        if name not in long.covariates:
            raise ValidationError(f"covariate {name!r} not found in the data")
        vals = np.full(n, np.nan)
        have = first >= 0
        vals[have] = long.covariates[name][first[have]]
        out[name] = vals
    return out


@dataclass
class AssembledModel:
    spec: ms.ModelSpec
    index: LatentIndex
    hyper: HyperLayout
    terms: ObservationTerms
    partition: BinPartition = None
    pseudo: object = None
    subject_covariates: dict = None
    q_rows: np.ndarray = None
    q_cols: np.ndarray = None

    def __post_init__(self):
        self._build_q_pattern()

    # -- prior precision ------------------------------------------------------

    def _build_q_pattern(self):
        idx, spec = self.index, self.spec
        rows, cols = [], []
        r = idx.re_dim
        off = 0
        self._block_local = []
        for blk in spec.re_blocks:
            d = blk.dim
            li, lj = np.tril_indices(d)
            pos = np.array([idx.re_terms.index(m) for m in blk.members])
            self._block_local.append((li, lj))
            base = np.arange(idx.n_subjects)[:, None] * r
            rows.append((base + pos[li]).ravel())
            cols.append((base + pos[lj]).ravel())
            off += d
        B = idx.n_bins
        self._rw_local = None
        if idx.n_causes:
            li = np.concatenate([np.arange(B), np.arange(1, B), np.arange(2, B)])
            lj = np.concatenate([np.arange(B), np.arange(B - 1), np.arange(B - 2)])
            self._rw_local = (li, lj)
            for c in range(1, idx.n_causes + 1):
                s = idx.spline(c, 0)
                rows.append(s + li)
                cols.append(s + lj)
        fixed = np.arange(idx.gamma_start, idx.dim)
        rows.append(fixed)
        cols.append(fixed)
        self.q_rows = np.concatenate(rows).astype(np.int64) if rows else np.zeros(0, np.int64)
        self.q_cols = np.concatenate(cols).astype(np.int64) if cols else np.zeros(0, np.int64)

    def q_values(self, theta):
        """Values of Q(theta) on the fixed lower-triangular pattern."""
        idx, spec, hyp = self.index, self.spec, self.hyper
        vals = []
        for j, blk in enumerate(spec.re_blocks):
            P = re_precision(theta[hyp.find("re_block", j).slice])
            li, lj = self._block_local[j]
            vals.append(np.tile(P[li, lj], idx.n_subjects))
        if idx.n_causes:
            order = 1 if spec.baseline == "rw1" else 2
            D = _difference_matrix(idx.n_bins, order)
            R = D.T @ D + RIDGE * np.eye(idx.n_bins)
            li, lj = self._rw_local
            for c in range(1, idx.n_causes + 1):
                tau = np.exp(theta[hyp.find("rw", c).start])
                vals.append(tau * R[li, lj])
        vals.append(np.full(idx.dim - idx.gamma_start, 1.0 / spec.priors.fixed_scale**2))
        return np.concatenate(vals)

    def prior_precision(self, theta):
        return SymSparse(self.index.dim, self.q_rows, self.q_cols, self.q_values(theta))

    def prior_precision_scipy(self, theta):
        """Full symmetric scipy matrix (both triangles)."""
        v = self.q_values(theta)
        off = self.q_rows != self.q_cols
        r = np.concatenate([self.q_rows, self.q_cols[off]])
        c = np.concatenate([self.q_cols, self.q_rows[off]])
        return sp.csr_matrix((np.concatenate([v, v[off]]), (r, c)), shape=(self.index.dim,) * 2)

    def residual_precision(self, theta):
        """Per-row residual precision (1 for non-Gaussian rows)."""
        out = np.ones(self.terms.n_rows)
        g = self.terms.prec_index >= 0
        out[g] = np.exp(theta[self.terms.prec_index[g]])
        return out


def assemble(spec: ms.ModelSpec, long: LongDataset, surv: SurvDataset = None, partition=None) -> AssembledModel:
    """Latent layout, hyper layout and observation terms for a dataset."""
    ms.validate(spec)
    check_family_support(long, spec)
    M = len(spec.causes)
    if M and surv is None:
        raise ValidationError("the model has survival causes but no survival data was given")
    if surv is not None and M and surv.n_causes > M:
        raise ValidationError(f"event codes up to {surv.n_causes} but the model has {M} causes")

    if surv is not None:
        subjects = tuple(str(s) for s in surv.subject)
    else:
        subjects = tuple(dict.fromkeys(str(s) for s in long.subject))
    pos = {s: i for i, s in enumerate(subjects)}
    subj_of_long = np.array([pos[str(s)] for s in long.subject], dtype=np.int64)

    re_terms = tuple(m for blk in spec.re_blocks for m in blk.members)
    index = LatentIndex(
        subjects=subjects,
        re_terms=re_terms,
        n_causes=M,
        n_bins=spec.n_bins if M else 0,
        gamma_terms=tuple(tuple(c.covariates) for c in spec.causes),
        beta_terms=tuple(tuple(m.fixed_terms) for m in spec.markers),
        marker_ids=tuple(m.marker_id for m in spec.markers),
    )
    hyper = HyperLayout.from_spec(spec)

    rows_family, rows_y, rows_off, rows_prec, rows_subj = [], [], [], [], []
    E_row, E_col, E_coef, E_phi = [], [], [], []
    n_rows = 0

    def marker_entries(k, subj, X, dX_or_X, phi_j, row_ids):
        """Entries for beta_k and b_ik design columns of each row."""
        m = spec.markers[k]
        n = len(row_ids)
        cols_b = index.beta(m.marker_id) + np.arange(X.shape[1])
        E_row.append(np.repeat(row_ids, X.shape[1]))
        E_col.append(np.tile(cols_b, n))
        E_coef.append(dX_or_X.ravel())
        E_phi.append(np.full(n * X.shape[1], phi_j))
        for term in m.random_terms:
            j = m.fixed_terms.index(term)
            E_row.append(row_ids)
            E_col.append(subj * index.re_dim + re_terms.index((m.marker_id, term)))
            E_coef.append(dX_or_X[:, j])
            E_phi.append(np.full(n, phi_j))

    # longitudinal rows
    marker_col = long.marker.astype(str)
    for k, m in enumerate(spec.markers):
        sel = np.flatnonzero(marker_col == m.marker_id)
        if sel.size == 0:
            continue
        covs = {name: v[sel] for name, v in long.covariates.items()}
        try:
            X, _ = ms.term_columns(m.fixed_terms, m.time_basis, long.time[sel], covs)
        except KeyError as e:
            raise ValidationError(f"marker {m.marker_id}: {e.args[0]}") from None
        row_ids = n_rows + np.arange(sel.size)
        n_rows += sel.size
        fam = FAMILY_CODES[m.family.kind]
        rows_family.append(np.full(sel.size, fam))
        rows_y.append(long.value[sel])
        rows_off.append(np.zeros(sel.size))
        prec = hyper.find("resid", m.marker_id).start if fam == GAUSSIAN else -1
        rows_prec.append(np.full(sel.size, prec))
        rows_subj.append(subj_of_long[sel])
        marker_entries(k, subj_of_long[sel], X, X, -1, row_ids)

    # hazard pseudo-observation rows
    pseudo = None
    subj_covs = None
    if M:
        if partition is None:
            partition = partition_time(surv, spec.n_bins)
        pseudo = poisson_augment(surv, partition, M)
        needed = set(spec.surv_covariate_names)
        for c in spec.causes:
            for a in c.association:
                if a.kind != "shared_random_effect":
                    needed |= set(_marker_covariates(spec.marker(a.marker)))
        subj_covs = _subject_covariates(sorted(needed), subjects, long, surv, subj_of_long)
        for name, v in subj_covs.items():
            if np.any(np.isnan(v)):
                raise ValidationError(f"covariate {name!r} unavailable for some subjects")

        phi_pos = {e.key: i for i, e in enumerate(hyper.phi_entries)}

        def hazard_rows(c, subj, bins, t, y, offset, family):
            nonlocal n_rows
            n = subj.size
            row_ids = n_rows + np.arange(n)
            n_rows += n
            rows_family.append(np.full(n, family))
            rows_y.append(y)
            rows_off.append(offset)
            rows_prec.append(np.full(n, -1))
            rows_subj.append(subj)
            E_row.append(row_ids)
            E_col.append(index.spline(c.cause_id, 0) + bins)
            E_coef.append(np.ones(n))
            E_phi.append(np.full(n, -1))
            for j, name in enumerate(c.covariates):
                E_row.append(row_ids)
                E_col.append(np.full(n, index.gamma(c.cause_id, j)))
                E_coef.append(subj_covs[name][subj])
                E_phi.append(np.full(n, -1))
            for a in c.association:
                pj = phi_pos[(c.cause_id, a.label)]
                m = spec.marker(a.marker)
                k = spec.markers.index(m)
                if a.kind == "shared_random_effect":
                    E_row.append(row_ids)
                    E_col.append(subj * index.re_dim + re_terms.index((m.marker_id, a.term)))
                    E_coef.append(np.ones(n))
                    E_phi.append(np.full(n, pj))
                    continue
                covs = {name: subj_covs[name][subj] for name in _marker_covariates(m)}
                X, dX = ms.term_columns(m.fixed_terms, m.time_basis, t, covs)
                marker_entries(k, subj, X, X if a.kind == "current_value" else dX, pj, row_ids)

        T_obs = np.asarray(surv.time, dtype=float)
        for c in spec.causes:
            sel = np.flatnonzero(pseudo.cause == c.cause_id)
            ev = sel[pseudo.y[sel] > 0]
            # cumulative hazard by the midpoint rule on each piece; the event
            # term is evaluated at the event time itself
            hazard_rows(
                c, pseudo.subject[sel], pseudo.bin[sel], pseudo.t_eval[sel],
                np.zeros(sel.size), np.log(pseudo.exposure[sel]), HAZARD,
            )  # fmt: skip
            hazard_rows(
                c, pseudo.subject[ev], pseudo.bin[ev], T_obs[pseudo.subject[ev]],
                np.ones(ev.size), np.zeros(ev.size), EVENT,
            )  # fmt: skip

    cat = lambda xs, dt=float: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dt)
    terms = ObservationTerms(
        family=cat(rows_family, np.int64),
        y=cat(rows_y),
        offset=cat(rows_off),
        prec_index=cat(rows_prec, np.int64),
        subject=cat(rows_subj, np.int64),
        e_row=cat(E_row, np.int64),
        e_col=cat(E_col, np.int64),
        e_coef=cat(E_coef),
        e_phi=cat(E_phi, np.int64),
        dim=index.dim,
    )
    return AssembledModel(
        spec=spec,
        index=index,
        hyper=hyper,
        terms=terms,
        partition=partition,
        pseudo=pseudo,
        subject_covariates=subj_covs,
    )


def _marker_covariates(m):
    names = set()
    for t in m.fixed_terms:
        for f in t.split(":"):
            if f != "intercept" and f not in m.time_basis.names:
                names.add(f)
    return sorted(names)


def assemble_prior(model: AssembledModel, theta) -> SymSparse:
    return model.prior_precision(theta)


def observation_terms(model: AssembledModel) -> ObservationTerms:
    return model.terms
