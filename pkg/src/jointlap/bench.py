"""Replicate fits on simulated scenarios and the bias / SD / coverage tables."""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import infer, lgm
from . import simulate as sim

log = logging.getLogger(__name__)


class NoConvergedReplicates(RuntimeError):
    pass


@dataclass
class ReplicateResult:
    index: int
    seed: int
    converged: bool
    estimates: dict  # label -> {mean, sd, q025, q975}
    truth: dict
    wall_time: float
    message: str = ""


@dataclass
class MetricRow:
    parameter: str
    truth: float
    bias: float
    sd: float
    cp: float
    estimates: list = field(default_factory=list)


@dataclass
class MetricTable:
    rows: list
    n_replicates: int
    n_converged: int
    time_mean: float
    time_sd: float
    scenario: int = None
    strategy: str = ""

    @property
    def convergence_rate(self):
        return self.n_converged / self.n_replicates if self.n_replicates else 0.0

    def row(self, parameter):
        for r in self.rows:
            if r.parameter == parameter:
                return r
        raise KeyError(parameter)

    def to_json(self):
        d = asdict(self)
        d["convergence_rate"] = self.convergence_rate
        return d

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        d.pop("convergence_rate", None)
        d["rows"] = [MetricRow(**r) for r in d["rows"]]
        return cls(**d)


def replicate_seed(master_seed, index):
    """Independent per-replicate seed derived from (master seed, index)."""
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1)[0])


def run_one(scenario, index, strategy="EB", master_seed=0, out_dir=None):
    cfg = sim.scenario_presets(scenario)
    seed = replicate_seed(master_seed, index)
    t0 = time.perf_counter()
    long, surv, truth = sim.simulate(cfg, seed)
    try:
        model = lgm.assemble(cfg.model_spec(), long, surv)
        res = infer.fit(model, strategy=strategy, seed=seed)
        converged, msg, est = res.converged, res.message, res.estimates()
        payload = res.to_json()
    except Exception as e:  # failures are data, not fatal
        log.warning("replicate %d failed: %s", index, e)
        converged, msg, est, payload = False, f"{type(e).__name__}: {e}", {}, None
    wall = time.perf_counter() - t0
    if out_dir is not None:
        d = Path(out_dir) / "replicates" / str(index)
        d.mkdir(parents=True, exist_ok=True)
        (d / "truth.json").write_text(json.dumps(truth, indent=2, sort_keys=True))
        fit_json = payload if payload is not None else {"converged": False, "message": msg}
        (d / "fit.json").write_text(json.dumps(fit_json, indent=1))
    return ReplicateResult(index, seed, bool(converged), est, truth["params"], wall, msg)


def _run_one_args(args):
    return run_one(*args)


def run_replicates(scenario, R, strategy="EB", seed=0, workers=1, out_dir=None):
    """Simulate and fit R replicates; results ordered by replicate index."""
    if R < 1:
        raise ValueError("need at least one replicate")
    sim.scenario_presets(scenario)  # fail fast on unknown ids
    jobs = [(scenario, i, strategy, seed, out_dir) for i in range(R)]
    if workers <= 1:
        return [run_one(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one_args, jobs))


def metrics(results, truth=None, scenario=None, strategy=""):
    """Bias, SD and coverage over converged replicates."""
    results = sorted(results, key=lambda r: r.index)
    ok = [r for r in results if r.converged]
    if not ok:
        raise NoConvergedReplicates("no replicate converged")
    truth = truth if truth is not None else ok[0].truth
    rows = []
    for name, tv in truth.items():
        have = [r for r in ok if name in r.estimates]
        if not have:
            continue
        est = np.array([r.estimates[name]["mean"] for r in have])
        lo = np.array([r.estimates[name]["q025"] for r in have])
        hi = np.array([r.estimates[name]["q975"] for r in have])
        err = est - tv
        rows.append(
            MetricRow(
                parameter=name,
                truth=float(tv),
                bias=float(np.mean(err)),
                sd=float(np.std(err, ddof=1)) if err.size > 1 else 0.0,
                cp=float(np.mean((lo <= tv) & (tv <= hi))),
                estimates=est.tolist(),
            )
        )
    times = np.array([r.wall_time for r in ok])
    return MetricTable(
        rows=rows,
        n_replicates=len(results),
        n_converged=len(ok),
        time_mean=float(times.mean()),
        time_sd=float(times.std(ddof=1)) if times.size > 1 else 0.0,
        scenario=scenario,
        strategy=strategy,
    )


COLUMNS = ("parameter", "truth", "bias", "sd", "cp")


def emit_report(table: MetricTable, out_dir, formats=("csv", "md", "json")):
    """Write report.{csv,md,json}; returns the written paths."""
    if table is None or not table.rows:
        raise ValueError("empty metric table")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    r3 = lambda x: f"{x:.3f}"
    if "csv" in formats:
        p = out / "report.csv"
        with p.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(COLUMNS)
            for r in table.rows:
                w.writerow([r.parameter, r3(r.truth), r3(r.bias), r3(r.sd), r3(r.cp)])
        paths.append(p)
    if "md" in formats:
        p = out / "report.md"
        lines = [
            f"Scenario {table.scenario}, strategy {table.strategy}: "
            f"{table.n_converged}/{table.n_replicates} replicates converged.",
            "Bias, SD and CP use converged replicates only.",
            "",
            "| " + " | ".join(COLUMNS) + " |",
            "|" + "---|" * len(COLUMNS),
        ]
        for r in table.rows:
            lines.append(f"| {r.parameter} | {r3(r.truth)} | {r3(r.bias)} | ({r3(r.sd)}) | {r3(r.cp)} |")
        lines += [
            "",
            f"Conv. rate: {r3(table.convergence_rate)}",
            f"Comp. time (sec.): {table.time_mean:.2f} ({table.time_sd:.2f})",
            "",
        ]
        p.write_text("\n".join(lines))
        paths.append(p)
    if "json" in formats:
        p = out / "report.json"
        p.write_text(json.dumps(table.to_json(), indent=1))
        paths.append(p)
    return paths
