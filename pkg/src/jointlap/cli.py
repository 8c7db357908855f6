"""Command-line entry points: fit, simulate and bench.

Exit codes: 0 success, 1 error, 2 fit finished without hyperparameter
convergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import augment, bench, infer, lgm
from . import modelspec as ms
from . import simulate as sim

log = logging.getLogger("jointlap")

EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED = 0, 1, 2


def load_config(path):
    """YAML (or JSON) config; a bare name resolves to a bundled config."""
    p = Path(path)
    if not p.exists():
        bundled = resources.files("jointlap") / "configs" / f"{p.stem}.yaml"
        if not bundled.is_file():
            raise FileNotFoundError(f"config {path} not found")
        text = bundled.read_text()
    else:
        text = p.read_text()
    cfg = yaml.safe_load(text) or {}
    if not isinstance(cfg, dict) or "model" not in cfg:
        raise ms.SpecError("model", "config must contain a 'model' section")
    return cfg


def resolve_auto_boundaries(model_dict, max_time):
    """Replace ``boundary: auto`` of spline bases with [0, max observed time]."""
    for m in model_dict.get("markers", []):
        tb = m.get("time_basis")
        if isinstance(tb, dict) and "ns" in tb and tb["ns"].get("boundary") == "auto":
            tb["ns"]["boundary"] = [0.0, float(max_time)]
    return model_dict


def load_data(cfg, long_path=None, surv_path=None):
    data = cfg.get("data", {}) or {}
    if data.get("format") == "pbc2" and long_path is None:
        return augment.read_pbc2(data["path"])
    long_path = long_path or data.get("long")
    surv_path = surv_path or data.get("surv")
    if long_path is None:
        raise FileNotFoundError("no longitudinal data given")
    return augment.ingest(long_path, surv_path)


def trajectory_bands(res: infer.FitResult, n_samples=1000, seed=0, n_grid=50):
    """Quantiles of population-average linear predictors and baseline hazards
    over joint posterior draws. Returns CSV rows."""
    model = res.model
    spec, idx = model.spec, model.index
    draws = infer.sample_joint_posterior(res, n_samples, seed=seed)["u"]
    tmax = float(model.partition.cuts[-1]) if model.partition is not None else 1.0
    grid = np.linspace(0.0, tmax, n_grid)
    rows = []
    qs = (0.025, 0.5, 0.975)
    for m in spec.markers:
        covs = ms.ModelSpec(markers=(m,)).covariate_names
        profiles = [("reference", {c: 0.0 for c in covs})]
        profiles += [(f"{c}=1", {**{d: 0.0 for d in covs}, c: 1.0}) for c in covs]
        beta = draws[:, idx.beta(m.marker_id) : idx.beta(m.marker_id) + len(m.fixed_terms)]
        for name, prof in profiles:
            X, _ = ms.term_columns(m.fixed_terms, m.time_basis, grid, prof)
            eta = beta @ X.T
            q = np.quantile(eta, qs, axis=0)
            for j, t in enumerate(grid):
                rows.append([m.marker_id, name, t, eta[:, j].mean(), *q[:, j]])
    if idx.n_causes:
        mid = 0.5 * (model.partition.cuts[:-1] + model.partition.cuts[1:])
        for c in range(1, idx.n_causes + 1):
            h = np.exp(draws[:, idx.spline(c, 0) : idx.spline(c, 0) + idx.n_bins])
            q = np.quantile(h, qs, axis=0)
            for j, t in enumerate(mid):
                rows.append([f"baseline_hazard[{c}]", "reference", t, h[:, j].mean(), *q[:, j]])
    return rows


def write_summary(res: infer.FitResult, out):
    rows = res.summary_table()
    with (out / "summary.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["parameter", "mean", "sd", "q025", "q975"])
        w.writerows([[r[0], *(f"{x:.6g}" for x in r[1:])] for r in rows])
    lines = ["| parameter | mean | (sd) | 95% CI |", "|---|---|---|---|"]
    for r in rows:
        lines.append(f"| {r[0]} | {r[1]:.2f} | ({r[2]:.2f}) | [{r[3]:.2f} ; {r[4]:.2f}] |")
    (out / "summary.md").write_text("\n".join(lines) + "\n")


def cmd_fit(args):
    cfg = load_config(args.config)
    long, surv = load_data(cfg, args.long, args.surv)
    model_dict = cfg["model"]
    if surv is not None:
        resolve_auto_boundaries(model_dict, float(np.max(surv.time)))
    else:
        resolve_auto_boundaries(model_dict, float(np.max(long.time)))
    spec = ms.validate(ms.ModelSpec.from_dict(model_dict))
    inf = cfg.get("inference", {}) or {}
    seed = int(inf.get("seed", args.seed if args.seed is not None else 0))
    model = lgm.assemble(spec, long, surv)
    res = infer.fit(
        model,
        strategy=str(inf.get("strategy", "EB")).upper(),
        z=float(inf.get("ccd_radius", 1.2)),
        seed=seed,
        grad_tol=float(inf.get("grad_tol", 1e-3)),
        step_tol=float(inf.get("step_tol", 1e-4)),
        max_iter=int(inf.get("max_iter", 200)),
        f_tol=float(inf.get("f_tol", 1e-3)),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "fit.json").write_text(json.dumps(res.to_json(), indent=1))
    write_summary(res, out)
    n_bands = int(inf.get("band_samples", 1000))
    if n_bands > 0:
        with (out / "bands.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["series", "profile", "time", "mean", "q025", "q500", "q975"])
            w.writerows(trajectory_bands(res, n_bands, seed=seed))
    log.info("fit finished in %.2f s (converged=%s)", res.timings["total"], res.converged)
    return EXIT_OK if res.converged else EXIT_NOT_CONVERGED


def cmd_simulate(args):
    cfg = sim.scenario_presets(args.scenario)
    long, surv, truth = sim.simulate(cfg, args.seed)
    sim.write_dataset(args.out, long, surv, truth)
    return EXIT_OK


def cmd_bench(args):
    out = Path(args.out)
    strategy = args.strategy.upper()
    results = bench.run_replicates(args.scenario, args.replicates, strategy, args.seed, args.workers, out)
    table = bench.metrics(results, scenario=int(args.scenario), strategy=strategy)
    bench.emit_report(table, out)
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="jointlap", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a joint model to CSV data")
    f.add_argument("--config", required=True, help="YAML config or bundled config name (e.g. pbc_model)")
    f.add_argument("--long", help="longitudinal CSV (id,marker,time,value[,covariates])")
    f.add_argument("--surv", help="survival CSV (id,time,event[,covariates])")
    f.add_argument("--out", required=True, help="output directory")
    f.add_argument("--seed", type=int, default=None)
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="simulate one benchmark dataset")
    s.add_argument("--scenario", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    b = sub.add_parser("bench", help="replicate fits on a simulated scenario")
    b.add_argument("--scenario", required=True)
    b.add_argument("--replicates", type=int, default=10)
    b.add_argument("--strategy", default="EB", choices=["EB", "FULL", "eb", "full"])
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--workers", type=int, default=1)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    level = os.environ.get("JOINTLAP_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except sim.UnknownScenario as e:
        print(f"error: UnknownScenario: {e.args[0]}", file=sys.stderr)
    except (augment.SchemaError, augment.ValidationError, ms.SpecError, ms.KnotOrderError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
    except (OSError, ValueError, RuntimeError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
