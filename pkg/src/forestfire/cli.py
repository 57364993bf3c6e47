"""Command-line front end.

Subcommands write UTF-8 JSON artifacts stamped with a configuration hash,
the seed and package versions.  ``report`` compares artifacts and writes
CSV tables; ``pipeline`` runs every stage from one JSON configuration.

Exit codes: 0 pass, 1 tolerance failure, 2 usage or input error,
3 internal invariant violation or numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import platform
import sys
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np
import scipy

from . import __version__
from .characteristics import (CurveFamily, default_horizons, noncrossing_violations, pregel_constancy,
                              resolved_at_gel, residual_stats, solve_family,
                              upper_bound_violations)
from .core import ForestFireError, MassDistribution, dumps
from .coupling import CouplingConfig, failure_stats
from .finite_model import SimConfig, mean_snapshot, run_replicas, snapshot_sigma
from .kinetics import (Environment, SchemaMismatch, borel_vk, burn_rate_integral_check, make_grid,
                       running_average_phi, solve_cffe)
from .limit_process import LimitSampler, explosion_count_stats, explosion_prob_check, law_from_states
from .stats import binomial_z, chi2_gof

EXIT_OK, EXIT_TOLERANCE, EXIT_USAGE, EXIT_INTERNAL = 0, 1, 2, 3
STAGES = ("solve", "characteristics", "simulate", "sample-limit", "couple", "report")


class UsageError(ForestFireError):
    pass


class ToleranceFailure(ForestFireError):
    def __init__(self, items):
        super().__init__("; ".join(items))
        self.items = list(items)


class StageFailure(ForestFireError):
    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------------------
# artifacts

def versions():
    return {"forestfire": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "numba": numba.__version__, "python": platform.python_version()}


def config_hash(cfg) -> str:
    return hashlib.sha256(dumps(cfg).encode()).hexdigest()[:16]


def stamp(cfg, seed=None):
    return {"config": cfg, "config_hash": config_hash(cfg), "seed": seed, "versions": versions()}


def write_json(path, doc):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(doc), encoding="utf-8")
    return path


def read_json(path, kind):
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise SchemaMismatch(f"cannot read {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("kind") != kind:
        raise SchemaMismatch(f"{path} is not a '{kind}' artifact")
    return doc


def _floats(s):
    return [float(x) for x in str(s).split(",") if x.strip()]


def _ints(s):
    return [int(float(x)) for x in str(s).split(",") if x.strip()]


def _load_init(path):
    if path is None:
        return MassDistribution.point_mass(1)
    doc = json.loads(Path(path).read_text())
    if "masses" in doc:
        return MassDistribution.from_json(doc)
    return MassDistribution.from_dict({int(k): float(v) for k, v in doc.items()})


# ---------------------------------------------------------------------------
# stages

def do_solve(init, K, T, grid_step, tol, out, cfg, workers=None):
    grid = make_grid(T, 1.0 / init.first_moment(), step_pre=grid_step, step_gel=grid_step / 2,
                     step_post=grid_step)
    env = solve_cffe(init, K, grid, tol=tol)
    env.save(out, extra={"stamp": stamp(cfg)})
    return env


def do_characteristics(env_path, horizons, out, cfg, workers=None, also=()):
    """Curve family; an int asks for that many geometric horizons, ``also`` adds exact ones."""
    env = Environment.load(env_path)
    if isinstance(horizons, int):
        horizons = default_horizons(env, horizons)
    horizons = np.unique(np.concatenate([np.asarray(horizons, dtype=float), np.asarray(also, dtype=float)]))
    fam = solve_family(env, horizons, workers=workers)
    checks = []
    for c in fam.curves:
        ub, app = upper_bound_violations(c)
        checks.append({"y": c.y, "residual": residual_stats(env, c), "pregel_constancy": pregel_constancy(env, c),
                       "resolved_at_gel": resolved_at_gel(env, c),
                       "upper_bound_violations": ub, "upper_bound_nodes": app})
    doc = fam.to_json()
    doc.update({"stamp": stamp(cfg), "env": str(env_path), "checks": checks,
                "noncrossing_violations": noncrossing_violations(fam)})
    write_json(out, doc)
    return fam


def do_simulate(n, lam, horizon, snapshots, replicas, seed, dagger, init, out, cfg, workers=None):
    sc = SimConfig(n, lam, dagger, horizon, init, seed)
    snaps, paths = run_replicas(sc, snapshots, replicas, workers)
    snapshots = sorted(snapshots)
    doc = {"kind": "simulation", "stamp": stamp(cfg, seed), "n": n, "lambda": lam, "dagger": dagger,
           "horizon": horizon, "replicas": replicas, "init": init.to_json() if init is not None else None,
           "snapshots": [{"t": t, "mean": mean_snapshot([s[i] for s in snaps]).tolist(),
                          "replica": [s[i].to_json()["masses"] for s in snaps]}
                         for i, t in enumerate(snapshots)],
           "tagged": [p.to_json() for p in paths]}
    write_json(out, doc)
    return doc


def do_sample_limit(env_path, curves_path, ts, n_paths, threshold, seed, T, prob_horizons, exact, out, cfg,
                    workers=None):
    env = Environment.load(env_path)
    T = env.T if T is None else T
    laws = []
    if exact:
        for t in ts:
            laws.append({"t": t, "n_paths": n_paths, "counts": (n_paths * env.masses_at(t)[:50]).tolist(),
                         "overflow": 0, "exact": True})
        doc = {"kind": "law", "stamp": stamp(cfg, seed), "env": str(env_path), "laws": laws}
        write_json(out, doc)
        return doc
    sampler = LimitSampler(env, threshold)
    obs, *_ = sampler.batch(n_paths, seed, max(max(ts), env.times[1]), tobs=ts, workers=workers)
    for j, t in enumerate(sorted(ts)):
        law = law_from_states(obs[:, j], env.K, t)
        laws.append({"t": t, "n_paths": n_paths, "counts": law.counts[:50].tolist(),
                     "overflow": int(n_paths - law.counts[:50].sum())})
    st = explosion_count_stats(env, T, n_paths, seed + 1, sampler=sampler, workers=workers)
    probs = []
    if prob_horizons:
        fam = CurveFamily.from_json(read_json(curves_path, "curves")) if curves_path else None
        for y in prob_horizons:
            emp, pred, z = explosion_prob_check(env, fam, 0.0, y, n_paths, seed + 2, sampler=sampler,
                                                workers=workers)
            probs.append({"s": 0.0, "y": y, "empirical": emp, "predicted": pred, "z": z})
    doc = {"kind": "law", "stamp": stamp(cfg, seed), "env": str(env_path), "threshold": threshold,
           "laws": laws, "explosions": st.to_json(), "explosion_prob": probs}
    write_json(out, doc)
    return doc


def do_couple(env_path, ns, lam, lam_exp, K, T, replicas, seed, eps, out, cfg, workers=None):
    env = Environment.load(env_path)
    sampler = LimitSampler(env)
    runs = []
    for n in ns:
        lam_n = lam if lam_exp is None else n ** (-lam_exp)
        cc = CouplingConfig(n, lam_n, K, T, seed, replicas, env.init, tobs=(T,))
        fs = failure_stats(cc, env, eps, sampler=sampler, workers=workers)
        d = fs.to_json()
        d["ct_at_T"] = [int(tr.obs_ct[0]) for tr in fs.traces]
        d["replica"] = [{"tau": tr.tau, "cause": tr.cause, "sup_dE": tr.sup_dE, "occupation": tr.occupation}
                        for tr in fs.traces]
        runs.append(d)
    doc = {"kind": "coupling", "stamp": stamp(cfg, seed), "env": str(env_path), "runs": runs}
    write_json(out, doc)
    return doc


# ---------------------------------------------------------------------------
# report

@dataclass
class Check:
    name: str
    passed: bool
    detail: str


def _write_csv(path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _reference(env, sim, t, K):
    if env is not None:
        v = env.masses_at(t)[:K]
        return np.pad(v, (0, max(0, K - len(v))))
    init = sim.get("init")
    if sim["lambda"] == 0 and (init is None or init["masses"] == [1.0]):
        return np.array([borel_vk(k, t) for k in range(1, K + 1)])
    raise UsageError("simulation report needs --env unless lambda=0 with monodisperse start")


def build_report(env_path=None, sim_paths=(), law_path=None, coupling_path=None, out_dir="report",
                 z_max=3.0, sup_tol=0.01, alpha=0.01, burn_tol=5e-3):
    """Compare artifacts, write CSV/JSON tables and return the list of checks."""
    if not (env_path or sim_paths or law_path or coupling_path):
        raise UsageError("report needs at least one artifact")
    out = Path(out_dir)
    checks = []
    summary = {}
    env = Environment.load(env_path) if env_path else None
    env_doc = json.loads(Path(env_path).read_text()) if env_path else {}
    env_seed = env_doc.get("stamp", {}).get("seed")

    if env is not None:
        rows = []
        for t in np.unique(np.concatenate([np.arange(0.0, env.T + 1e-9, 0.25), [env.T]])):
            ra = running_average_phi(env, t) if t > env.t_gel + 1e-9 else float("nan")
            rows.append([env_path, env_seed, t, env.phi_at(t), env.int_phi(t), ra,
                         burn_rate_integral_check(env, t), float(np.interp(t, env.times, env.defect))])
        _write_csv(out / "phi.csv", ["artifact", "seed", "t", "phi", "int_phi", "running_avg_phi",
                                     "burn_rate_residual", "conservation_defect"], rows)
        pre = env.phi[env.times < env.t_gel]
        checks.append(Check("phi zero before gelation", bool(np.all(pre == 0)), f"max {pre.max(initial=0)}"))
        dmax = float(np.max(np.abs(env.defect)))
        checks.append(Check("conservation defect", dmax <= env.tol_cons, f"{dmax:.3g} <= {env.tol_cons}"))
        tb = min(2.0, env.T)
        br = burn_rate_integral_check(env, tb)
        checks.append(Check(f"burn-rate identity at t={tb}", br <= burn_tol, f"{br:.3g} <= {burn_tol}"))
        summary["env"] = {"artifact": env_path, "max_defect": dmax, "burn_residual": br}

    sim_rows, sup_rows = [], []
    for sp in sim_paths:
        sim = read_json(sp, "simulation")
        seed = sim["stamp"]["seed"]
        n, R = sim["n"], sim["replicas"]
        sup = 0.0
        for snap in sim["snapshots"]:
            t = snap["t"]
            m = np.asarray(snap["mean"])
            Kc = max(len(m), 10)
            ref = _reference(env, sim, t, Kc)
            m = np.pad(m, (0, Kc - len(m)))
            sup = max(sup, float(np.max(np.abs(m - ref))))
            sd = snapshot_sigma(ref, n, R)
            for k in range(1, 11):
                z = (m[k - 1] - ref[k - 1]) / sd[k - 1] if sd[k - 1] > 0 else 0.0
                sim_rows.append([sp, seed, n, t, k, m[k - 1], ref[k - 1], z])
                ok = abs(m[k - 1] - ref[k - 1]) <= z_max * sd[k - 1] + 1.0 / n
                if not ok:
                    checks.append(Check(f"sim n={n} t={t} k={k}", False, f"z={z:.2f}"))
        sup_rows.append([sp, seed, n, sup])
        checks.append(Check(f"sup |v^n - v| n={n}", sup <= sup_tol, f"{sup:.3g} <= {sup_tol}"))
    if sim_paths:
        _write_csv(out / "sim_buckets.csv", ["artifact", "seed", "n", "t", "k", "mean_vn", "v", "z"], sim_rows)
        _write_csv(out / "sim_sup.csv", ["artifact", "seed", "n", "sup_dev"], sup_rows)

    if law_path:
        if env is None:
            raise UsageError("law comparison needs --env")
        law = read_json(law_path, "law")
        seed = law["stamp"]["seed"]
        rows = []
        for L in law["laws"]:
            t, N = L["t"], L["n_paths"]
            counts = np.asarray(L["counts"], dtype=float)[:20]
            p = env.masses_at(t)[:20]
            z = binomial_z(counts, N, p)
            rows += [[law_path, seed, t, k + 1, counts[k] / N, p[k], z[k]] for k in range(20)]
            stat, dof, pv = chi2_gof(counts, N, p)
            checks.append(Check(f"law chi2 t={t}", pv >= alpha, f"chi2={stat:.2f} dof={dof} p={pv:.3g}"))
        _write_csv(out / "law_z.csv", ["artifact", "seed", "t", "k", "empirical", "v", "z"], rows)
        ex = law.get("explosions")
        if ex:
            checks.append(Check("explosion count vs int phi", abs(ex["z"]) <= z_max, f"z={ex['z']:.2f}"))
            checks.append(Check("no explosions before gelation", ex["pre_gel_explosions"] == 0,
                                str(ex["pre_gel_explosions"])))
        for pr in law.get("explosion_prob", []):
            checks.append(Check(f"no-explosion probability y={pr['y']}", abs(pr["z"]) <= z_max,
                                f"z={pr['z']:.2f}"))

    if coupling_path:
        cp = read_json(coupling_path, "coupling")
        seed = cp["stamp"]["seed"]
        rows = []
        runs = sorted(cp["runs"], key=lambda r: r["n"])
        for r in runs:
            rows.append([coupling_path, seed, r["n"], r["lam"], r["K"], r["T"], r["replicas"], r["p_fail"],
                         r["p_sup"], r["p_sup_ci"][0], r["p_sup_ci"][1]] + [r["causes"][c] for c in sorted(r["causes"])])
            checks.append(Check(f"coupling invariants n={r['n']}",
                                r["cycle_violations"] == 0 and r["distance_violations"] == 0,
                                f"cycle {r['cycle_violations']}, distance {r['distance_violations']}"))
        for a, b in zip(runs[:-1], runs[1:]):
            ok = b["p_sup"] <= a["p_sup"] or b["p_sup_ci"][0] <= a["p_sup_ci"][1]
            checks.append(Check(f"P[sup d_E > eps] non-increasing n={a['n']}->{b['n']}", ok,
                                f"{a['p_sup']:.3g} -> {b['p_sup']:.3g}"))
        causes = sorted(runs[0]["causes"]) if runs else []
        _write_csv(out / "coupling.csv", ["artifact", "seed", "n", "lambda", "K", "T", "replicas", "p_fail",
                                          "p_sup", "p_sup_lo", "p_sup_hi"] + [f"cause_{c}" for c in causes], rows)

    summary["checks"] = [c.__dict__ for c in checks]
    summary["passed"] = all(c.passed for c in checks)
    write_json(out / "report.json", {"kind": "report", "inputs": {
        "env": env_path, "sim": list(sim_paths), "law": law_path, "coupling": coupling_path}, **summary})
    return checks


# ---------------------------------------------------------------------------
# pipeline

DEFAULT_CONFIG = {
    "seed": 1,
    "model": {"n": 100000, "lambda": 0.0, "replicas": 50, "snapshots": [0.25, 0.5, 0.75], "dagger": False},
    "solver": {"K": 4096, "T": 3.0, "grid_step": 1e-3, "tol": 1e-5, "init": None},
    "curves": {"horizons": 64},
    "sampler": {"t": [0.5, 2.0], "n_paths": 100000, "threshold": 100000, "prob_horizons": [1.5, 2.5]},
    "coupling": {"n": [1000, 10000, 100000], "lambda_exponent": 0.3, "K": 16, "T": 2.0, "replicas": 1000,
                 "eps": 0.1},
    "report": {"z_max": 3.0, "sup_tol": 0.01, "alpha": 0.01},
}
CONFIG_KEYS = set(DEFAULT_CONFIG)


def load_config(path):
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    unknown = set(cfg) - CONFIG_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    full = json.loads(json.dumps(DEFAULT_CONFIG))
    for k, v in cfg.items():
        if isinstance(v, dict):
            full[k].update(v)
        else:
            full[k] = v
    return full


def pipeline_plan(cfg, out_dir):
    out = Path(out_dir)
    return [("solve", out / "env.json"), ("characteristics", out / "curves.json"),
            ("simulate", out / "sim.json"), ("sample-limit", out / "law.json"),
            ("couple", out / "coupling.json"), ("report", out / "report")]


def run_pipeline(cfg, out_dir, start="solve", workers=None, log=print):
    """Run the stages from ``start`` on; returns the report checks."""
    plan = pipeline_plan(cfg, out_dir)
    names = [s for s, _ in plan]
    if start not in names:
        raise UsageError(f"unknown stage {start}")
    paths = dict(plan)
    seed = int(cfg["seed"])
    checks = []
    for stage, path in plan[names.index(start):]:
        log(f"[{stage}] -> {path}")
        try:
            if stage == "solve":
                s = cfg["solver"]
                init = MassDistribution.from_json(s["init"]) if s.get("init") else MassDistribution.point_mass(1)
                do_solve(init, int(s["K"]), float(s["T"]), float(s["grid_step"]), float(s["tol"]), path, cfg)
            elif stage == "characteristics":
                do_characteristics(paths["solve"], int(cfg["curves"]["horizons"]), path, cfg, workers,
                                   also=[float(y) for y in cfg["sampler"]["prob_horizons"]])
            elif stage == "simulate":
                m = cfg["model"]
                snaps = [float(t) for t in m["snapshots"]]
                do_simulate(int(m["n"]), float(m["lambda"]), max(snaps), snaps, int(m["replicas"]), seed,
                            bool(m["dagger"]), None, path, cfg, workers)
            elif stage == "sample-limit":
                s = cfg["sampler"]
                do_sample_limit(paths["solve"], paths["characteristics"], [float(t) for t in s["t"]],
                                int(s["n_paths"]), int(s["threshold"]), seed, None,
                                [float(y) for y in s["prob_horizons"]], False, path, cfg, workers)
            elif stage == "couple":
                c = cfg["coupling"]
                do_couple(paths["solve"], [int(n) for n in c["n"]], float(c.get("lambda", 0.0)),
                          c.get("lambda_exponent"), int(c["K"]), float(c["T"]), int(c["replicas"]), seed,
                          float(c["eps"]), path, cfg, workers)
            elif stage == "report":
                r = cfg["report"]
                checks = build_report(str(paths["solve"]), [str(paths["simulate"])], str(paths["sample-limit"]),
                                      str(paths["couple"]), path, r["z_max"], r["sup_tol"], r["alpha"])
        except Exception as exc:  # noqa: BLE001 - every cause is wrapped with the stage name
            raise StageFailure(stage, exc) from exc
    return checks


# ---------------------------------------------------------------------------
# argument parsing

def build_parser():
    ap = argparse.ArgumentParser(prog="forestfire", description="Mean-field forest-fire toolkit")
    ap.add_argument("--workers", type=int, default=None, help="worker processes (default: $WORKERS or 1)")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("simulate", help="finite-n simulation")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=0.0)
    p.add_argument("--horizon", type=float, required=True)
    p.add_argument("--snapshots", type=_floats, required=True)
    p.add_argument("--replicas", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dagger", action="store_true")
    p.add_argument("--init", default=None, help="JSON mass distribution (default: all singletons)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("solve", help="solve the critical forest-fire equations")
    p.add_argument("--init", default=None)
    p.add_argument("--K", type=int, default=4096)
    p.add_argument("--grid-step", type=float, default=1e-3)
    p.add_argument("--horizon", type=float, default=3.0)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--out", required=True)

    p = sub.add_parser("characteristics", help="family of characteristic curves")
    p.add_argument("--env", required=True)
    p.add_argument("--horizons", type=int, default=64, help="number of geometrically spaced horizons")
    p.add_argument("--at", type=_floats, default=None, help="explicit comma-separated horizons")
    p.add_argument("--out", required=True)

    p = sub.add_parser("sample-limit", help="Monte Carlo of the limiting tagged process")
    p.add_argument("--env", required=True)
    p.add_argument("--curves", default=None)
    p.add_argument("--t", type=_floats, required=True)
    p.add_argument("--n-paths", type=int, default=100000)
    p.add_argument("--threshold", type=int, default=100000)
    p.add_argument("--horizon", type=float, default=None, help="explosion-count horizon (default: env end)")
    p.add_argument("--prob-horizons", type=_floats, default=[])
    p.add_argument("--exact", action="store_true", help="write expected counts instead of sampling")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("couple", help="coupled finite/limit replicas")
    p.add_argument("--n", type=_ints, required=True, help="one or more comma-separated sizes")
    p.add_argument("--lambda", dest="lam", type=float, default=0.0)
    p.add_argument("--lambda-exponent", type=float, default=None, help="use lambda_n = n^-a")
    p.add_argument("--K", type=int, default=16)
    p.add_argument("--T", type=float, default=2.0)
    p.add_argument("--replicas", type=int, default=100)
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--env", required=True)
    p.add_argument("--curves", default=None, help="accepted for symmetry; explosion times use the env")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="cross-validation report")
    p.add_argument("--env", default=None)
    p.add_argument("--sim", action="append", default=[])
    p.add_argument("--law", default=None)
    p.add_argument("--coupling", default=None)
    p.add_argument("--out-dir", default="report")
    p.add_argument("--z-max", type=float, default=3.0)

    p = sub.add_parser("pipeline", help="run every stage from a JSON config")
    p.add_argument("config", nargs="?", default=None, help="config file (default settings when omitted)")
    p.add_argument("--out-dir", default="artifacts")
    p.add_argument("--from", dest="start", default="solve", choices=STAGES)
    p.add_argument("--dry-run", action="store_true")
    return ap


def _args_cfg(args):
    # output locations do not change results, so they stay out of the stamp
    d = {k: v for k, v in vars(args).items() if k not in ("workers", "cmd", "out", "out_dir")}
    return {"command": args.cmd, **d}


def _dispatch(args):
    cfg = _args_cfg(args)
    w = args.workers
    if args.cmd == "simulate":
        init = _load_init(args.init) if args.init else None
        if any(t > args.horizon for t in args.snapshots):
            raise UsageError("snapshot beyond horizon")
        do_simulate(args.n, args.lam, args.horizon, args.snapshots, args.replicas, args.seed, args.dagger,
                    init, args.out, cfg, w)
    elif args.cmd == "solve":
        do_solve(_load_init(args.init), args.K, args.horizon, args.grid_step, args.tol, args.out, cfg, w)
    elif args.cmd == "characteristics":
        do_characteristics(args.env, args.at if args.at else args.horizons, args.out, cfg, w)
    elif args.cmd == "sample-limit":
        do_sample_limit(args.env, args.curves, args.t, args.n_paths, args.threshold, args.seed, args.horizon,
                        args.prob_horizons, args.exact, args.out, cfg, w)
    elif args.cmd == "couple":
        do_couple(args.env, args.n, args.lam, args.lambda_exponent, args.K, args.T, args.replicas, args.seed,
                  args.eps, args.out, cfg, w)
    elif args.cmd == "report":
        checks = build_report(args.env, args.sim, args.law, args.coupling, args.out_dir, args.z_max)
        for c in checks:
            print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}: {c.detail}")
        bad = [c.name for c in checks if not c.passed]
        if bad:
            raise ToleranceFailure(bad)
    elif args.cmd == "pipeline":
        cfg = load_config(args.config) if args.config else json.loads(json.dumps(DEFAULT_CONFIG))
        plan = pipeline_plan(cfg, args.out_dir)
        names = [s for s, _ in plan]
        if args.dry_run:
            print(f"config hash {config_hash(cfg)}")
            for s, p in plan[names.index(args.start):]:
                print(f"{s:16s} -> {p}")
            return
        checks = run_pipeline(cfg, args.out_dir, args.start, w)
        bad = [c.name for c in checks if not c.passed]
        if bad:
            raise ToleranceFailure(bad)


def exit_code(exc) -> int:
    if isinstance(exc, StageFailure):
        return exit_code(exc.cause)
    if isinstance(exc, ToleranceFailure):
        return EXIT_TOLERANCE
    if isinstance(exc, (UsageError, SchemaMismatch, ValueError, FileNotFoundError)):
        return EXIT_USAGE
    return EXIT_INTERNAL


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _dispatch(args)
    except (ForestFireError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
