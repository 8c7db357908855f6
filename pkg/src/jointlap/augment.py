"""Data ingestion and the Poisson augmentation of the survival likelihood."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class SchemaError(ValueError):
    pass


class ValidationError(ValueError):
    pass


class OrphanSubjectError(ValidationError):
    pass


class NegativeTimeError(ValidationError):
    pass


LONG_COLUMNS = ("id", "marker", "time", "value")
SURV_COLUMNS = ("id", "time", "event")


@dataclass(frozen=True)
class LongDataset:
    subject: np.ndarray  # subject labels (str)
    marker: np.ndarray  # marker ids (str)
    time: np.ndarray
    value: np.ndarray
    covariates: dict = field(default_factory=dict)

    def __len__(self):
        return self.time.size

    def subset(self, mask):
        return LongDataset(
            self.subject[mask],
            self.marker[mask],
            self.time[mask],
            self.value[mask],
            {k: v[mask] for k, v in self.covariates.items()},
        )


@dataclass(frozen=True)
class SurvDataset:
    subject: np.ndarray
    time: np.ndarray
    event: np.ndarray  # 0 censored, 1..M cause
    covariates: dict = field(default_factory=dict)

    def __len__(self):
        return self.time.size

    @property
    def n_causes(self):
        return int(self.event.max()) if self.event.size else 0


@dataclass(frozen=True)
class BinPartition:
    cuts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.cuts, dtype=float)
        if c.ndim != 1 or c.size < 2 or c[0] != 0 or np.any(np.diff(c) <= 0):
            raise ValueError("cuts must start at 0 and increase strictly")
        object.__setattr__(self, "cuts", c)

    @property
    def n_bins(self):
        return self.cuts.size - 1

    @property
    def widths(self):
        return np.diff(self.cuts)

    def bin_of(self, t):
        """Index of the right-closed bin (c_b, c_{b+1}] containing t."""
        b = np.searchsorted(self.cuts, np.asarray(t, dtype=float), side="left") - 1
        return np.clip(b, 0, self.n_bins - 1)


@dataclass(frozen=True)
class PseudoObservations:
    """Struct of arrays; one row per (subject, cause, bin) overlapped by (0, T*]."""

    subject: np.ndarray  # row index into the SurvDataset
    cause: np.ndarray  # 1..M
    bin: np.ndarray
    y: np.ndarray
    exposure: np.ndarray
    t_eval: np.ndarray

    def __len__(self):
        return self.y.size


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------


def _read_csv(path, required, kind):
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = [h.strip() for h in next(reader)]
            except StopIteration:
                raise SchemaError(f"{kind} CSV {path} is empty") from None
            rows = [r for r in reader if r and any(x.strip() for x in r)]
    except UnicodeDecodeError as e:
        raise SchemaError(f"{kind} CSV {path} is not UTF-8: {e}") from None
    if tuple(header[: len(required)]) != required:
        raise SchemaError(f"{kind} CSV must start with columns {','.join(required)}; got {','.join(header)}")
    if len(set(header)) != len(header):
        raise SchemaError(f"{kind} CSV has duplicate column names")
    for i, r in enumerate(rows):
        if len(r) != len(header):
            raise SchemaError(f"{kind} CSV line {i + 2}: expected {len(header)} fields, got {len(r)}")
    cols = {h: [r[j].strip() for r in rows] for j, h in enumerate(header)}
    return header, cols


def _floats(values, name, kind):
    try:
        return np.array([float(v) for v in values], dtype=float)
    except ValueError as e:
        raise SchemaError(f"{kind} CSV column {name!r}: {e}") from None


def read_long_csv(path):
    header, cols = _read_csv(path, LONG_COLUMNS, "long")
    covs = {h: _floats(cols[h], h, "long") for h in header[len(LONG_COLUMNS):]}
    return LongDataset(
        subject=np.array(cols["id"], dtype=object),
        marker=np.array(cols["marker"], dtype=object),
        time=_floats(cols["time"], "time", "long"),
        value=_floats(cols["value"], "value", "long"),
        covariates=covs,
    )


def read_surv_csv(path):
    header, cols = _read_csv(path, SURV_COLUMNS, "surv")
    ev = _floats(cols["event"], "event", "surv")
    if np.any(ev != np.round(ev)) or np.any(ev < 0):
        raise SchemaError("surv CSV column 'event' must hold non-negative integer codes")
    covs = {h: _floats(cols[h], h, "surv") for h in header[len(SURV_COLUMNS):]}
    return SurvDataset(
        subject=np.array(cols["id"], dtype=object),
        time=_floats(cols["time"], "time", "surv"),
        event=ev.astype(int),
        covariates=covs,
    )


def check_datasets(long, surv):
    """Cross-file invariants shared by all ingestion paths."""
    if np.any(long.time < 0):
        raise NegativeTimeError("longitudinal times must be non-negative")
    if not np.all(np.isfinite(long.value)):
        raise ValidationError("longitudinal values must be finite")
    if surv is None:
        return
    if np.any(surv.time <= 0):
        bad = surv.subject[surv.time <= 0][0]
        raise NegativeTimeError(f"subject {bad}: observed time must be positive")
    labels, counts = np.unique(surv.subject.astype(str), return_counts=True)
    if np.any(counts > 1):
        raise ValidationError(f"subject {labels[counts > 1][0]} has more than one survival record")
    tmax = dict(zip(surv.subject.astype(str), surv.time))
    for s, t in zip(long.subject.astype(str), long.time):
        if s not in tmax:
            raise OrphanSubjectError(f"subject {s} has longitudinal data but no survival record")
        if t > tmax[s] * (1 + 1e-12):
            raise ValidationError(f"subject {s}: measurement at t={t} after observed time {tmax[s]}")


def ingest(long_csv, surv_csv=None):
    """Read and validate the long (and optional survival) CSV files."""
    long = read_long_csv(long_csv)
    surv = read_surv_csv(surv_csv) if surv_csv is not None else None
    check_datasets(long, surv)
    return long, surv


def check_family_support(long, spec):
    """Poisson values must be counts and binomial values 0/1."""
    for m in spec.markers:
        sel = long.marker.astype(str) == m.marker_id
        y = long.value[sel]
        if m.family.kind == "poisson" and (np.any(y < 0) or np.any(y != np.round(y))):
            raise ValidationError(f"marker {m.marker_id}: poisson values must be non-negative integers")
        if m.family.kind == "binomial" and np.any((y != 0) & (y != 1)):
            raise ValidationError(f"marker {m.marker_id}: binomial values must be 0 or 1")
    known = {m.marker_id for m in spec.markers}
    unknown = set(long.marker.astype(str)) - known
    if unknown:
        raise ValidationError(f"long data contains markers not in the model: {sorted(unknown)}")


PBC2_MARKERS = {
    "bili": ("serBilir", np.log),
    "sgot": ("SGOT", np.log),
    "albumin": ("albumin", None),
    "platelets": ("platelets", None),
    "spiders": ("spiders", None),
}


def read_pbc2(path):
    """Long and survival datasets from a pbc2-style CSV (one row per visit).

    Columns used: id, years, status, drug, year and the marker columns in
    ``PBC2_MARKERS``. Status alive/transplanted/dead becomes event codes
    0/2/1 (death is cause 1). Missing marker values are dropped per marker.
    """
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise SchemaError("pbc2 CSV is empty")
    need = {"id", "years", "status", "drug", "year"} | {c for c, _ in PBC2_MARKERS.values()}
    missing = need - set(rows[0])
    if missing:
        raise SchemaError(f"pbc2 CSV lacks columns {sorted(missing)}")
    status = {"alive": 0, "dead": 1, "transplanted": 2}

    def num(v):
        v = v.strip().strip('"')
        if v in ("", "NA"):
            return np.nan
        if v in ("Yes", "No"):
            return 1.0 if v == "Yes" else 0.0
        return float(v)

    surv = {}
    recs = []
    for r in rows:
        sid = r["id"].strip().strip('"')
        drug = 1.0 if "penicil" in r["drug"] else 0.0
        st = r["status"].strip().strip('"')
        if st not in status:
            raise SchemaError(f"unknown pbc2 status {st!r}")
        surv.setdefault(sid, (float(r["years"]), status[st], drug))
        t = float(r["year"])
        for name, (col, fn) in PBC2_MARKERS.items():
            v = num(r[col])
            if np.isnan(v):
                continue
            recs.append((sid, name, t, fn(v) if fn else v, drug))
    ids = list(surv)
    sv = SurvDataset(
        subject=np.array(ids, dtype=object),
        time=np.array([surv[i][0] for i in ids]),
        event=np.array([surv[i][1] for i in ids], dtype=int),
        covariates={"X": np.array([surv[i][2] for i in ids])},
    )
    lg = LongDataset(
        subject=np.array([r[0] for r in recs], dtype=object),
        marker=np.array([r[1] for r in recs], dtype=object),
        time=np.array([r[2] for r in recs]),
        value=np.array([r[3] for r in recs]),
        covariates={"X": np.array([r[4] for r in recs])},
    )
    # visits recorded after the observed time are clipped out
    keep = lg.time <= np.array([surv[s][0] for s in lg.subject])
    lg = lg.subset(keep)
    check_datasets(lg, sv)
    return lg, sv


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


def partition_time(surv: SurvDataset, B: int) -> BinPartition:
    """Equal-width bins from 0 to the largest observed time."""
    if B < 3:
        raise ValueError("need at least 3 bins")
    return BinPartition(np.linspace(0.0, float(np.max(surv.time)), B + 1))


def poisson_augment(surv: SurvDataset, part: BinPartition, M: int) -> PseudoObservations:
    T = np.asarray(surv.time, dtype=float)
    if np.any(T > part.cuts[-1] * (1 + 1e-12)):
        raise ValueError("partition does not cover all observed times")
    last = part.bin_of(T)
    nb = last + 1
    subj1 = np.repeat(np.arange(T.size), nb)
    start = np.repeat(np.cumsum(nb) - nb, nb)
    b1 = np.arange(subj1.size) - start
    lo = part.cuts[b1]
    hi = np.minimum(part.cuts[b1 + 1], T[subj1])
    is_last = b1 == last[subj1]
    exposure = hi - lo
    t_eval = 0.5 * (lo + hi)
    n1 = subj1.size

    subject = np.tile(subj1, M)
    cause = np.repeat(np.arange(1, M + 1), n1)
    ev = np.asarray(surv.event)[subject]
    y = ((ev == cause) & np.tile(is_last, M)).astype(float)
    return PseudoObservations(
        subject=subject,
        cause=cause,
        bin=np.tile(b1, M),
        y=y,
        exposure=np.tile(exposure, M),
        t_eval=np.tile(t_eval, M),
    )


def exact_surv_loglik(T, delta, cuts, levels):
    """Exact log-likelihood of one record under piecewise-constant hazards.

    ``levels`` has shape (M, B): hazard of cause m on bin (c_b, c_{b+1}].
    """
    cuts = np.asarray(cuts, dtype=float)
    levels = np.atleast_2d(np.asarray(levels, dtype=float))
    overlap = np.clip(np.minimum(cuts[1:], T) - cuts[:-1], 0.0, None)
    cum = levels @ overlap
    out = -float(np.sum(cum))
    if delta > 0:
        b = int(np.clip(np.searchsorted(cuts, T, side="left") - 1, 0, cuts.size - 2))
        out += float(np.log(levels[delta - 1, b]))
    return out


def pseudo_loglik(pseudo: PseudoObservations, log_levels):
    """Poisson log-likelihood of the pseudo-observations with log-exposure offsets.

    ``log_levels`` has shape (M, B). The parameter-free terms y*log(e) and
    log y! are dropped, which makes the sum equal the survival log-likelihood.
    """
    log_levels = np.atleast_2d(np.asarray(log_levels, dtype=float))
    offset = np.log(pseudo.exposure)
    eta = log_levels[pseudo.cause - 1, pseudo.bin] + offset
    return float(np.sum(pseudo.y * (eta - offset) - np.exp(eta)))
