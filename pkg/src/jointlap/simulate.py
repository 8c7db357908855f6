"""Benchmark data generation: linear marker trajectories and event times
assigned by the permutational algorithm."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import modelspec as ms
from .augment import LongDataset, SurvDataset


class UnknownScenario(KeyError):
    pass


class RiskSetExhausted(RuntimeError):
    pass


class CalibrationFailure(RuntimeError):
    pass


RE_TERMS = ("intercept", "time")
FIXED_TERMS = ("intercept", "time", "x1", "x2")


@dataclass(frozen=True)
class MarkerTruth:
    family: str
    beta: tuple  # (intercept, time, x1, x2)
    random: tuple = RE_TERMS
    sigma_eps: float = None


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: int
    markers: tuple
    sigma: np.ndarray  # covariance of the stacked random effects
    phi: tuple  # (M, K) association with the current value
    n: int = 500
    visit_step: float = 0.5
    horizon: float = 8.0
    dropout_max: float = 8.0
    target_event: float = 0.40
    calib_seed: int = 20240
    name: str = ""

    def __post_init__(self):
        sig = np.asarray(self.sigma, dtype=float)
        if sig.shape != (self.re_dim, self.re_dim):
            raise ValueError("covariance does not match the random-effect layout")
        if sig.size and np.min(np.linalg.eigvalsh(sig)) < -1e-12:
            raise ValueError("random-effect covariance must be positive semi-definite")
        if not 0 < self.target_event < 1:
            raise ValueError("event fraction must lie in (0, 1)")
        object.__setattr__(self, "sigma", sig)
        object.__setattr__(self, "phi", tuple(tuple(map(float, p)) for p in np.atleast_2d(self.phi)))

    @property
    def K(self):
        return len(self.markers)

    @property
    def M(self):
        return len(self.phi)

    @property
    def marker_ids(self):
        return tuple(f"y{k + 1}" for k in range(self.K))

    @property
    def re_layout(self):
        return tuple((mid, t) for mid, m in zip(self.marker_ids, self.markers) for t in m.random)

    @property
    def re_dim(self):
        return sum(len(m.random) for m in self.markers)

    @property
    def has_binary(self):
        return any(m.family == "binomial" for m in self.markers)

    def model_spec(self, n_bins=15):
        """Fitting model matching the generating design."""
        markers = [
            {"id": mid, "family": m.family, "fixed": list(FIXED_TERMS), "random": list(m.random)}
            for mid, m in zip(self.marker_ids, self.markers)
        ]
        causes = [
            {
                "id": c + 1,
                "association": [{"marker": mid, "kind": "current_value"} for mid in self.marker_ids],
            }
            for c in range(self.M)
        ]
        return ms.validate(
            ms.ModelSpec.from_dict({"markers": markers, "survival": {"bins": n_bins, "causes": causes}})
        )

    def truth(self):
        """Generating values keyed by the labels used in fit summaries."""
        out = {}
        for mid, m in zip(self.marker_ids, self.markers):
            for t, b in zip(FIXED_TERMS, m.beta):
                out[f"beta[{mid}:{t}]"] = float(b)
            if m.sigma_eps is not None:
                out[f"sigma_eps[{mid}]"] = float(m.sigma_eps)
        lay = self.re_layout
        for i, (mid, t) in enumerate(lay):
            out[f"var[{mid}:{t}]"] = float(self.sigma[i, i])
        for i in range(len(lay)):
            for j in range(i):
                out[f"cov[{lay[j][0]}:{lay[j][1]},{lay[i][0]}:{lay[i][1]}]"] = float(self.sigma[i, j])
        for c, row in enumerate(self.phi):
            for mid, p in zip(self.marker_ids, row):
                out[f"phi[{c + 1},{mid}:current_value]"] = p
        return out


def _cov(names, var, cov):
    """Covariance matrix from variances and pairwise covariances keyed by name."""
    idx = {n: i for i, n in enumerate(names)}
    S = np.diag([var[n] for n in names]).astype(float)
    for (a, b), v in cov.items():
        if a in idx and b in idx:
            S[idx[a], idx[b]] = S[idx[b], idx[a]] = v
    return S


_G = (0.2, -0.1, 0.1, -0.2)
_B = (1.0, -1.0, 1.0, -1.0)

_COV_GAUSS = {
    ("b10", "b11"): 0.08, ("b10", "b20"): 0.02, ("b10", "b21"): 0.04, ("b11", "b20"): 0.04,
    ("b11", "b21"): 0.0, ("b20", "b21"): 0.1, ("b10", "b30"): 0.0, ("b10", "b31"): -0.04,
    ("b11", "b30"): -0.08, ("b11", "b31"): -0.08, ("b20", "b30"): 0.05, ("b20", "b31"): 0.02,
    ("b21", "b30"): 0.05, ("b21", "b31"): -0.04, ("b30", "b31"): 0.1,
}  # fmt: skip
_VAR_GAUSS = {"b10": 0.16, "b11": 0.16, "b20": 0.25, "b21": 0.25, "b30": 0.25, "b31": 0.16}

_COV_POIS = {
    ("b10", "b11"): 0.06, ("b10", "b20"): 0.02, ("b10", "b21"): 0.04, ("b11", "b20"): 0.03,
    ("b11", "b21"): 0.0, ("b20", "b21"): 0.08, ("b10", "b30"): 0.0, ("b10", "b31"): -0.04,
    ("b11", "b30"): -0.06, ("b11", "b31"): 0.0, ("b20", "b30"): 0.05, ("b20", "b31"): 0.04,
    ("b21", "b30"): 0.04, ("b21", "b31"): -0.04, ("b30", "b31"): 0.12,
}  # fmt: skip
_VAR_POIS = {"b10": 0.16, "b11": 0.09, "b20": 0.25, "b21": 0.16, "b30": 0.25, "b31": 0.16}

_RS = ("b{k}0", "b{k}1")


def _names(K, slope=True):
    out = []
    for k in range(1, K + 1):
        out.append(f"b{k}0")
        if slope:
            out.append(f"b{k}1")
    return out


def scenario_presets(sid) -> ScenarioConfig:
    """Generating configuration of benchmark scenario ``sid`` (1..11)."""
    try:
        sid = int(sid)
    except (TypeError, ValueError):
        raise UnknownScenario(sid) from None
    if sid in (1, 2, 3):
        K = sid
        markers = tuple(MarkerTruth("gaussian", _G, sigma_eps=0.4) for _ in range(K))
        sigma = _cov(_names(K), _VAR_GAUSS, _COV_GAUSS)
        phi = [(0.5, -0.5, 0.5)[:K]]
        return ScenarioConfig(sid, markers, sigma, phi, name=f"K={K} gaussian")
    if sid in (4, 5, 6):
        K = sid - 3
        betas = [(4.0, -0.1, 0.1, -0.2), (2.0, -0.1, 0.1, -0.2), (2.0, -0.1, 0.1, -0.2)]
        markers = tuple(MarkerTruth("poisson", betas[k]) for k in range(K))
        sigma = _cov(_names(K), _VAR_POIS, _COV_POIS)
        phi = [(0.2, -0.2, 0.2)[:K]]
        return ScenarioConfig(sid, markers, sigma, phi, name=f"K={K} poisson")
    if sid in (7, 8, 9):
        K = sid - 6
        markers = tuple(MarkerTruth("binomial", _B, random=("intercept",)) for _ in range(K))
        if K == 1:
            var, cov = {"b10": 0.25}, {}
        elif K == 2:
            var, cov = {"b10": 0.25, "b20": 0.25}, {("b10", "b20"): 0.15}
        else:
            var = {"b10": 0.16, "b20": 0.25, "b30": 0.25}
            cov = {("b10", "b20"): 0.02, ("b10", "b30"): 0.12, ("b20", "b30"): 0.05}
        sigma = _cov(_names(K, slope=False), var, cov)
        phi = [(0.3, -0.3, 0.3)[:K]]
        return _binary_visits(ScenarioConfig(sid, markers, sigma, phi, name=f"K={K} binary"))
    if sid == 10:
        markers = (
            MarkerTruth("gaussian", _G, sigma_eps=0.4),
            MarkerTruth("poisson", (3.0, -0.1, 0.1, -0.2)),
            MarkerTruth("binomial", _B, random=("intercept",)),
        )
        var = {"b10": 0.16, "b11": 0.09, "b20": 0.25, "b21": 0.16, "b30": 0.25}
        cov = {
            ("b10", "b11"): 0.03, ("b10", "b20"): 0.02, ("b10", "b21"): 0.04, ("b10", "b30"): 0.0,
            ("b11", "b20"): 0.03, ("b11", "b21"): 0.0, ("b11", "b30"): -0.06, ("b20", "b21"): 0.08,
            ("b20", "b30"): 0.05, ("b21", "b30"): 0.04,
        }  # fmt: skip
        sigma = _cov(["b10", "b11", "b20", "b21", "b30"], var, cov)
        return _binary_visits(ScenarioConfig(10, markers, sigma, [(0.5, -0.2, 0.3)], name="mixed"))
    if sid == 11:
        # two-cause smoke scenario with independent exponential cause margins
        markers = (MarkerTruth("gaussian", _G, sigma_eps=0.4),)
        sigma = _cov(_names(1), _VAR_GAUSS, _COV_GAUSS)
        return ScenarioConfig(11, markers, sigma, [(0.5,), (-0.3,)], name="competing risks")
    raise UnknownScenario(sid)


def _binary_visits(cfg):
    return replace(cfg, visit_step=cfg.visit_step / 3.0)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


@dataclass
class Trajectories:
    """Subject covariates and random effects; eta is linear in time."""

    cfg: ScenarioConfig
    x1: np.ndarray
    x2: np.ndarray
    b: np.ndarray  # (n, re_dim)

    def __post_init__(self):
        n, K = self.x1.size, self.cfg.K
        self.level = np.empty((n, K))
        self.slope = np.empty((n, K))
        col = 0
        for k, m in enumerate(self.cfg.markers):
            beta = np.asarray(m.beta, dtype=float)
            self.level[:, k] = beta[0] + beta[2] * self.x1 + beta[3] * self.x2
            self.slope[:, k] = beta[1]
            for t in m.random:
                if t == "intercept":
                    self.level[:, k] += self.b[:, col]
                else:
                    self.slope[:, k] += self.b[:, col]
                col += 1

    def eta(self, t, subjects=None):
        """(len(subjects), K) linear predictors at time t."""
        if subjects is None:
            return self.level + self.slope * t
        return self.level[subjects] + self.slope[subjects] * t


def gen_covariates_and_trajectories(cfg: ScenarioConfig, rng, obs_times=None):
    """Covariates, random effects and trajectories for n subjects.

    With ``obs_times`` (observed T* per subject) also returns the
    longitudinal records at the scheduled visits up to T*.
    """
    n = cfg.n
    x1 = rng.standard_normal(n)
    x2 = (rng.random(n) < 0.5).astype(float)
    if cfg.re_dim:
        pd = np.min(np.linalg.eigvalsh(cfg.sigma)) > 0
        b = rng.multivariate_normal(np.zeros(cfg.re_dim), cfg.sigma, size=n, method="cholesky" if pd else "eigh")
    else:
        b = np.zeros((n, 0))
    traj = Trajectories(cfg, x1, x2, b)
    if obs_times is None:
        return traj
    return traj, observe(cfg, traj, obs_times, rng)


def observe(cfg: ScenarioConfig, traj: Trajectories, obs_times, rng) -> LongDataset:
    grid = np.arange(0.0, cfg.horizon + 1e-9, cfg.visit_step)
    subj, times = [], []
    for i, T in enumerate(obs_times):
        t = grid[grid <= T]
        subj.append(np.full(t.size, i))
        times.append(t)
    subj = np.concatenate(subj)
    times = np.concatenate(times)
    recs_s, recs_m, recs_t, recs_v = [], [], [], []
    for k, (mid, m) in enumerate(zip(cfg.marker_ids, cfg.markers)):
        eta = traj.level[subj, k] + traj.slope[subj, k] * times
        if m.family == "gaussian":
            y = eta + m.sigma_eps * rng.standard_normal(eta.size)
        elif m.family == "poisson":
            y = rng.poisson(np.exp(eta)).astype(float)
        else:
            y = (rng.random(eta.size) < expit(eta)).astype(float)
        recs_s.append(subj)
        recs_m.append(np.full(subj.size, mid, dtype=object))
        recs_t.append(times)
        recs_v.append(y)
    s = np.concatenate(recs_s)
    order = np.lexsort((np.concatenate(recs_t), s))
    s = s[order]
    return LongDataset(
        subject=np.array([str(i + 1) for i in s], dtype=object),
        marker=np.concatenate(recs_m)[order],
        time=np.concatenate(recs_t)[order],
        value=np.concatenate(recs_v)[order],
        covariates={"x1": traj.x1[s], "x2": traj.x2[s]},
    )


def permalgo(event_times, censor_times, eta_fn, phi, rng, gamma=None, w=None, event_causes=None):
    """Permutational algorithm.

    Observed times min(T, C) are processed in ascending order; an event is
    given to a subject of the current risk set with probability proportional
    to exp(phi_m . eta(t) + gamma_m . w), a censoring to a uniformly chosen
    one. ``eta_fn(t, subjects)`` returns the (len(subjects), K) predictors.
    Returns (time, event) arrays indexed by subject.
    """
    T = np.asarray(event_times, dtype=float)
    C = np.asarray(censor_times, dtype=float)
    n = T.size
    if C.size != n:
        raise ValueError("need one censoring time per event time")
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    causes = np.ones(n, dtype=int) if event_causes is None else np.asarray(event_causes, dtype=int)
    obs = np.minimum(T, C)
    is_event = T <= C
    order = np.argsort(obs, kind="stable")
    at_risk = np.ones(n, dtype=bool)
    time = np.empty(n)
    event = np.zeros(n, dtype=int)
    for j in order:
        risk = np.flatnonzero(at_risk)
        if risk.size == 0:
            raise RiskSetExhausted("more observed times than subjects")
        if is_event[j]:
            m = causes[j] - 1
            score = eta_fn(obs[j], risk) @ phi[m]
            if gamma is not None and w is not None:
                score = score + w[risk] @ np.atleast_2d(gamma)[m]
            p = np.exp(score - np.max(score))
            i = risk[np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right").clip(0, risk.size - 1)]
            event[i] = causes[j]
        else:
            i = risk[rng.integers(risk.size)]
        time[i] = obs[j]
        at_risk[i] = False
    return time, event


def _censoring(cfg, rng, n):
    if not np.isfinite(cfg.dropout_max):
        return np.full(n, float(cfg.horizon))
    return np.minimum(cfg.horizon, rng.uniform(0.0, cfg.dropout_max, n))


def _event_fraction(cfg, rate, n_pilots=20):
    rng = np.random.default_rng(cfg.calib_seed)  # common random numbers across rates
    fr = []
    for _ in range(n_pilots):
        E = rng.exponential(1.0, cfg.n)
        C = _censoring(cfg, rng, cfg.n)
        fr.append(np.mean(E / rate <= C))
    return float(np.mean(fr))


def calibrate_event_rate(cfg: ScenarioConfig, target=None, tol=0.02, max_steps=40):
    """Exponential rate whose pilot event fraction is within tol of target."""
    target = cfg.target_event if target is None else target
    if not 0 < target < 1:
        raise CalibrationFailure("target event fraction must lie in (0, 1)")
    lo, hi = np.log(1e-6), np.log(1e3)
    f_lo, f_hi = _event_fraction(cfg, np.exp(lo)), _event_fraction(cfg, np.exp(hi))
    if f_hi - f_lo < 2 * tol:
        raise CalibrationFailure("event fraction does not respond to the rate")
    if not f_lo - tol <= target <= f_hi + tol:
        raise CalibrationFailure(f"target {target} outside attainable range [{f_lo}, {f_hi}]")
    for _ in range(max_steps):
        mid = 0.5 * (lo + hi)
        f = _event_fraction(cfg, np.exp(mid))
        if abs(f - target) <= tol / 4:
            return float(np.exp(mid))
        if f < target:
            lo = mid
        else:
            hi = mid
    f = _event_fraction(cfg, np.exp(0.5 * (lo + hi)))
    if abs(f - target) <= tol:
        return float(np.exp(0.5 * (lo + hi)))
    raise CalibrationFailure("bisection did not reach the target fraction")


_RATE_CACHE = {}


def _calibrated_rate(cfg):
    # the event fraction depends on the censoring design only
    key = (cfg.n, cfg.horizon, cfg.dropout_max, cfg.target_event, cfg.calib_seed)
    if key not in _RATE_CACHE:
        _RATE_CACHE[key] = calibrate_event_rate(cfg)
    return _RATE_CACHE[key]


def simulate(cfg: ScenarioConfig, seed):
    """One dataset: (LongDataset, SurvDataset, truth dict)."""
    if isinstance(cfg, (int, np.integer)):
        cfg = scenario_presets(cfg)
    rate = _calibrated_rate(cfg)
    rng = np.random.default_rng(seed)
    traj = gen_covariates_and_trajectories(cfg, rng)
    n = cfg.n
    if cfg.M == 1:
        T = rng.exponential(1.0 / rate, n)
        causes = None
    else:
        # independent cause-specific exponential margins sharing the total rate
        Tm = rng.exponential(cfg.M / rate, (cfg.M, n))
        T = Tm.min(axis=0)
        causes = Tm.argmin(axis=0) + 1
    C = _censoring(cfg, rng, n)
    time_, event = permalgo(T, C, traj.eta, cfg.phi, rng, event_causes=causes)
    long = observe(cfg, traj, time_, rng)
    ids = np.array([str(i + 1) for i in range(n)], dtype=object)
    surv = SurvDataset(ids, time_, event, {"x1": traj.x1, "x2": traj.x2})
    truth = {
        "scenario": cfg.scenario,
        "name": cfg.name,
        "seed": int(seed),
        "n": n,
        "event_rate": rate,
        "event_fraction": float(np.mean(event > 0)),
        "params": cfg.truth(),
        "metadata": {
            "reconstruction": (
                "covariates x1 ~ N(0,1) and x2 ~ Bernoulli(0.5), visit grid, exponential event margins and "
                "censoring min(horizon, U(0, dropout_max)) are reconstructed choices"
            ),
            "visit_step": cfg.visit_step,
            "horizon": cfg.horizon,
            "dropout_max": cfg.dropout_max,
        },
    }
    return long, surv, truth


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------


def write_long_csv(path, long: LongDataset):
    covs = list(long.covariates)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "marker", "time", "value", *covs])
        for r in range(len(long)):
            w.writerow(
                [long.subject[r], long.marker[r], repr(float(long.time[r])), _num(long.value[r])]
                + [_num(long.covariates[c][r]) for c in covs]
            )


def write_surv_csv(path, surv: SurvDataset):
    covs = list(surv.covariates)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "time", "event", *covs])
        for r in range(len(surv)):
            w.writerow(
                [surv.subject[r], repr(float(surv.time[r])), int(surv.event[r])]
                + [_num(surv.covariates[c][r]) for c in covs]
            )


def _num(v):
    v = float(v)
    return str(int(v)) if v.is_integer() and abs(v) < 1e15 else repr(v)


def write_dataset(out_dir, long, surv, truth):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_long_csv(out / "long.csv", long)
    write_surv_csv(out / "surv.csv", surv)
    (out / "truth.json").write_text(json.dumps(truth, indent=2, sort_keys=True))
    return out
