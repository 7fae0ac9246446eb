"""Command-line entry point: gen, im, ood, oracle and pac subcommands.

Every subcommand accepts ``--config file.json`` whose keys are the long flag
names (dashes or underscores); explicit flags override the file and unknown
keys are rejected. Exit codes: 0 success, 1 runtime failure, 2 bad config.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .dataset import DataError, GeneratorConfig, Task, VARIANTS, generate, load_csv, save_csv
from .downstream import (METHODS, aggregate, agreement, config_hash, hidden_variable_scenario, run_on_data,
                         run_table, selection_bias_scenario, spurious_label_scenario, write_raw_csv,
                         write_summary_csv, write_table_csv)
from .families import FamilySpec, FitOptions
from .im_optimizer import IMConfig, harden, run_im, sweep_k, write_trace_csv
from .oracles import (ReferenceScenario, compare_to_approximation, hidden_variable_approximation,
                      selection_bias_approximation, reference_dataset)
from .pac_bound import BoundInputs, bound_value, empirical_rademacher

log = logging.getLogger("predhet")


class ConfigError(ValueError):
    pass


class _config_phase:
    """Turn validation errors raised while building configs into ConfigError."""

    def __enter__(self):
        return self

    def __exit__(self, tp, exc, tb):
        if tp is not None and issubclass(tp, ValueError) and not issubclass(tp, ConfigError):
            raise ConfigError(str(exc)) from exc
        return False


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _floats(s: str) -> tuple:
    return tuple(float(v) for v in str(s).split(",") if v.strip())


def _ints(s: str) -> tuple:
    s = str(s)
    if ".." in s:
        lo, hi = s.split("..")
        return tuple(range(int(lo), int(hi) + 1))
    return tuple(int(v) for v in s.split(",") if v.strip())


def _ratios(s: str) -> tuple:
    out = []
    for part in str(s).split(","):
        a, b = part.split(":")
        a, b = float(a), float(b)
        out.append((a / (a + b), b / (a + b)))
    return tuple(out)


def _merge_config(args, parser):
    """Fill flags left at None from the JSON config; reject unknown keys."""
    if not args.config:
        return args
    path = Path(args.config)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    known = {a.dest for a in parser._actions} - {"help", "config", "command", "func"}
    for key, val in cfg.items():
        dest = key.replace("-", "_")
        if dest not in known:
            raise ConfigError(f"unknown config key {key!r}")
        if getattr(args, dest) is None:
            setattr(args, dest, val if not isinstance(val, list) else ",".join(str(v) for v in val))
    return args


def _default(args, name, value):
    if getattr(args, name) is None:
        setattr(args, name, value)


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _task(spec: str) -> Task:
    if spec in (None, "regression"):
        return Task.regression()
    if spec.startswith("classification"):
        classes = int(spec.split(":")[1]) if ":" in spec else 2
        return Task.classification(classes)
    raise ConfigError(f"task must be 'regression' or 'classification[:C]', got {spec!r}")


def _family(args, task: Task) -> FamilySpec:
    kind = args.family or ("V2" if task.is_classification else "V1")
    if kind == "V1":
        return FamilySpec.v1(sigma=args.sigma or 1.0, model=args.model or "linear", intercept=not args.no_intercept)
    return FamilySpec.v2(classes=task.classes or 2, model=args.model or "linear", intercept=not args.no_intercept)


def _add_common(p):
    p.add_argument("--config", help="JSON file with default values for any flag")
    p.add_argument("--seed", type=int)
    p.add_argument("-o", "--out", help="output directory")


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------

def _gen_config(args) -> GeneratorConfig:
    _default(args, "variant", "selection-bias")
    _default(args, "seed", 0)
    kw = {"variant": args.variant}
    if args.n is not None:
        kw["n"] = int(args.n)
    for name in ("beta", "sigma", "noise_var", "v_noise_var", "flip", "agreement", "core_shift"):
        v = getattr(args, name)
        if v is not None:
            kw[name] = float(v)
    for name in ("fractions", "r", "theta_v"):
        v = getattr(args, name)
        if v is not None:
            kw[name] = _floats(v)
    if args.counts is not None:
        kw["counts"] = _ints(args.counts)
    if args.d_core is not None:
        kw["d_core"] = int(args.d_core)
    if args.variant == "hidden-variable" and "n" not in kw:
        kw["n"] = sum(kw.get("counts", GeneratorConfig("hidden-variable", n=11000).counts))
    return GeneratorConfig(**kw)


def cmd_gen(args) -> int:
    with _config_phase():
        cfg = _gen_config(args)
    out = _out_dir(args)
    data = generate(cfg, args.seed)
    h = config_hash({"generator": cfg, "seed": args.seed})
    save_csv(data, out / "data.csv")
    meta = dict(data.meta)
    meta.update({"config": asdict(cfg), "config_hash": h, "task": data.task.kind, "classes": data.task.classes})
    _write_json(out / "meta.json", meta)
    print(f"wrote {data.n} rows to {out / 'data.csv'} (config {h})")
    return 0


# ---------------------------------------------------------------------------
# im
# ---------------------------------------------------------------------------

def _im_config(args, K) -> IMConfig:
    inner = FitOptions("gradient_descent", steps=int(args.inner_steps or 1),
                       lr=None if args.inner_lr is None else float(args.inner_lr))
    if args.inner == "closed_form":
        inner = FitOptions("closed_form")
    return IMConfig(K=K, outer_lr=float(args.outer_lr or 0.05), outer_iters=int(args.outer_iters or 200),
                    inner=inner, seed=args.seed, restarts=int(args.restarts or 1),
                    omit_step_factor=bool(args.omit_step_factor))


def _load(args) -> tuple:
    if not args.data:
        raise ConfigError("--data is required")
    path = Path(args.data)
    if not path.is_file():
        raise ConfigError(f"dataset not found: {path}")
    task = _task(args.task)
    return load_csv(path, task), task


def cmd_im(args) -> int:
    _default(args, "seed", 0)
    with _config_phase():
        data, task = _load(args)
        spec = _family(args, task)
        Ks = _ints(args.sweep_k) if args.sweep_k else (int(args.K if args.K is not None else 2),)
        if any(k < 2 for k in Ks):
            raise ConfigError("K must be >= 2")
        cfgs = {K: _im_config(args, K) for K in Ks}
    out = _out_dir(args)
    h = config_hash({"spec": spec, "im": cfgs[Ks[0]], "Ks": Ks, "data": str(args.data)})
    if len(Ks) > 1:
        res = sweep_k(spec, data, Ks, cfgs[Ks[0]], elbow_ratio=float(args.elbow_ratio or 0.5))
        reports = []
        for K, rep in res:
            d = rep.to_json()
            d["envs_agreement"] = (agreement(harden(res.assignments[K]), data.true_envs)
                                   if data.true_envs is not None else None)
            reports.append(d)
        _write_json(out / "sweep.json", {"config_hash": h, "elbow": res.elbow, "reports": reports})
        for K, rep in res:
            print(f"K={K}: heterogeneity {rep.heterogeneity:.6f} nats")
        print(f"elbow: {res.elbow}")
        return 0
    K = Ks[0]
    W, rep, trace = run_im(spec, data, cfgs[K])
    envs = harden(W)
    report = rep.to_json()
    report["config_hash"] = h
    report["envs_agreement"] = agreement(envs, data.true_envs) if data.true_envs is not None else None
    _write_json(out / "report.json", report)
    np.savetxt(out / "W.csv", W, delimiter=",", fmt="%.17g", header=",".join(f"w{k}" for k in range(K)), comments="")
    write_trace_csv(trace, out / "trace.csv")
    (out / "envs.csv").write_text("env\n" + "".join(f"{e}\n" for e in envs))
    msg = f"heterogeneity {rep.heterogeneity:.6f} nats"
    if report["envs_agreement"] is not None:
        msg += f", agreement with ground truth {report['envs_agreement']:.4f}"
    print(msg)
    return 0


# ---------------------------------------------------------------------------
# ood
# ---------------------------------------------------------------------------

SCENARIOS = {
    "selection-bias": selection_bias_scenario,
    "hidden-variable": hidden_variable_scenario,
    "spurious-label": spurious_label_scenario,
}


def _method_list(s) -> list:
    names = {m.lower(): m for m in METHODS}
    out = []
    for m in str(s).split(","):
        key = m.strip().lower()
        if key not in names:
            raise ConfigError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
        out.append(names[key])
    return out


def _source_list(s) -> list:
    names = {"ours": "Ours", "kmeans": "KMeans", "oracle": "Oracle"}
    out = []
    for m in str(s).split(","):
        key = m.strip().lower()
        if key not in names:
            raise ConfigError(f"unknown environment source {m!r}")
        out.append(names[key])
    return out


def cmd_ood(args) -> int:
    with _config_phase():
        setup = _ood_setup(args)
    return _run_ood(*setup, args)


def _ood_setup(args):
    _default(args, "scenario", "selection-bias")
    if args.scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {args.scenario!r}; choose from {', '.join(SCENARIOS)}")
    kw = {}
    if args.irm_lambda is not None:
        kw["irm_lambda"] = float(args.irm_lambda)
    if args.iga_lambda is not None:
        kw["iga_lambda"] = float(args.iga_lambda)
    sc = SCENARIOS[args.scenario](**kw)
    if args.K is not None:
        sc.im = sc.im.with_(K=int(args.K))
    if args.n is not None:
        sc.train = sc.train.with_(n=int(args.n))
    methods = _method_list(args.methods or "erm,balance,irm,iga")
    sources = _source_list(args.env_sources or "kmeans,ours")
    seeds = _ints(args.seeds) if args.seeds else tuple(range(args.seed or 0, (args.seed or 0) + 5))
    if args.data or args.test:
        if not args.data or not args.test:
            raise ConfigError("--data and --test must be given together")
        task = Task.regression() if sc.spec.kind == "V1" else Task.classification(sc.spec.classes)
        path = Path(args.data)
        if not path.is_file():
            raise ConfigError(f"dataset not found: {path}")
        tests = {}
        for item in str(args.test).split(","):
            name, _, tpath = item.partition("=")
            if not Path(tpath).is_file():
                raise ConfigError(f"test dataset not found: {tpath}")
            tests[name] = load_csv(tpath, task)
        return sc, methods, sources, seeds, (load_csv(path, task), tests)
    return sc, methods, sources, seeds, None


def _run_ood(sc, methods, sources, seeds, given, args) -> int:
    if given is not None:
        results = run_on_data(sc, given[0], given[1], methods, sources, seeds[0])
    else:
        results = run_table(sc, methods, sources, seeds)
    out = _out_dir(args)
    rows = aggregate(results)
    write_table_csv(rows, out / "table.csv")
    write_summary_csv(rows, out / "summary.csv")
    write_raw_csv(results, out / "raw.csv")
    _write_json(out / "manifest.json", {"config_hash": config_hash({"scenario": sc, "seeds": seeds}),
                                        "scenario": args.scenario, "seeds": list(seeds),
                                        "methods": methods, "env_sources": sources})
    for r in rows:
        print(f"{r['label']:16s} {r['condition']:16s} {r['mean']:.4f} +- {r['sd']:.4f}")
    return 0


# ---------------------------------------------------------------------------
# oracle
# ---------------------------------------------------------------------------

def cmd_oracle(args) -> int:
    _default(args, "kind", "homogeneous")
    _default(args, "seed", 0)
    out = _out_dir(args)
    spec_noint = FamilySpec.v1(intercept=False)
    if args.kind == "homogeneous":
        with _config_phase():
            ns = _ints(args.ns or "100,1000,10000")
            seeds = _ints(args.seeds) if args.seeds else (args.seed,)
            cfg = IMConfig(K=int(args.K or 2), restarts=int(args.restarts or 2))
        rows = []
        for seed in seeds:
            for n in ns:
                data = generate(GeneratorConfig("homogeneous", n=n, sigma=float(args.sigma_y or 0.5)), seed)
                h = run_im(FamilySpec.v1(), data, cfg.with_(seed=seed))[1].heterogeneity
                rows.append({"n": n, "seed": seed, "estimate": h})
                print(f"N={n} seed={seed}: {h:.6f} nats")
        with open(out / "sweep.csv", "w") as fh:
            fh.write("n,seed,estimate\n")
            for r in rows:
                fh.write(f"{r['n']},{r['seed']},{r['estimate']!r}\n")
        _write_json(out / "comparison.json", {"kind": "homogeneous", "config_hash": config_hash(
            {"ns": ns, "seeds": seeds, "im": cfg}), "rows": rows})
        return 0
    if args.kind not in ("selection-bias", "hidden-variable"):
        raise ConfigError(f"unknown oracle kind {args.kind!r}")
    variant = args.kind.replace("-", "_")
    with _config_phase():
        ratios = _ratios(args.ratios or "4:1,2:1,1:1")
        r = _floats(args.r or "1,-1")
        sig = float(args.sigma_e if args.sigma_e is not None else 0.05)
        sy = float(args.sigma_y if args.sigma_y is not None else 0.5)
        n = int(args.n or 5000)
        cfg = IMConfig(K=2, seed=args.seed, restarts=int(args.restarts or 1))
        scenarios = [ReferenceScenario(variant, m, r, (sig,) * len(r), float(args.ef2 or 1.0), sy) for m in ratios]
    approx_fn = selection_bias_approximation if variant == "selection_bias" else hidden_variable_approximation
    rows = []
    for masses, s in zip(ratios, scenarios):
        approx = approx_fn(s)
        data = reference_dataset(s, n, args.seed)
        est = run_im(spec_noint, data, cfg)[1].heterogeneity * 2.0 * spec_noint.sigma ** 2
        row = compare_to_approximation(approx, est)
        row["masses"] = list(masses)
        if not approx.reliable:
            log.warning("%s", approx.note)
            row["within_bound"] = None
        rows.append(row)
        print(f"masses {masses[0]:.3f}/{masses[1]:.3f}: analytical {approx.value:.4f} "
              f"empirical {est:.4f} bound {approx.error_bound:.4f} within {row['within_bound']}")
    _write_json(out / "comparison.json", {"kind": args.kind, "config_hash": config_hash(
        {"kind": args.kind, "ratios": ratios, "r": r, "sigma_e": sig, "sigma_y": sy, "n": n, "seed": args.seed}),
        "units": "squared target (2 sigma^2 nats)", "rows": rows})
    return 0


# ---------------------------------------------------------------------------
# pac
# ---------------------------------------------------------------------------

def cmd_pac(args) -> int:
    _default(args, "seed", 0)
    K = int(args.K if args.K is not None else 2)
    delta = float(args.delta if args.delta is not None else 0.05)
    B = float(args.B if args.B is not None else 1.0)
    result = {}
    if args.estimate_rademacher:
        with _config_phase():
            data, task = _load(args)
            spec = _family(args, task)
            N = data.n
            BoundInputs(B, K, delta, N, 0.0)  # validate before the expensive part
        est = empirical_rademacher(spec, data, draws=int(args.draws or 20), seed=args.seed, B=B)
        rad = max(est.mean, 0.0)
        result.update(est.to_json())
    else:
        N = int(args.N if args.N is not None else 10000)
        rad = float(args.rademacher if args.rademacher is not None else 0.0)
    with _config_phase():
        inputs = BoundInputs(B, K, delta, N, rad)
    value = bound_value(inputs)
    result.update({"bound": value, "rademacher": rad, "inputs": asdict(inputs),
                   "confidence": inputs.confidence})
    result["config_hash"] = config_hash(result["inputs"])
    out = _out_dir(args)
    _write_json(out / "bound.json", result)
    print(f"bound {value:.6f} nats at confidence {inputs.confidence:.4f}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="predhet", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    _add_common(g)
    g.add_argument("--variant", choices=VARIANTS)
    g.add_argument("--n", type=int)
    for name in ("beta", "sigma", "noise-var", "v-noise-var", "flip", "agreement", "core-shift"):
        g.add_argument(f"--{name}", type=float)
    g.add_argument("--fractions", help="comma-separated group fractions")
    g.add_argument("--r", help="comma-separated per-group r values")
    g.add_argument("--counts", help="comma-separated group sizes")
    g.add_argument("--theta-v", help="comma-separated per-group theta_V")
    g.add_argument("--d-core", type=int)
    g.set_defaults(func=cmd_gen)

    def family_flags(p):
        p.add_argument("--data", help="dataset CSV")
        p.add_argument("--task", help="regression | classification[:C]")
        p.add_argument("--family", choices=("V1", "V2"))
        p.add_argument("--sigma", type=float)
        p.add_argument("--model", choices=("linear", "mlp"))
        p.add_argument("--no-intercept", action="store_true", default=None)

    m = sub.add_parser("im", help="search for environments maximizing heterogeneity")
    _add_common(m)
    family_flags(m)
    m.add_argument("--K", type=int)
    m.add_argument("--sweep-k", help="e.g. 2..6 or 2,3,4")
    m.add_argument("--elbow-ratio", type=float)
    m.add_argument("--outer-lr", type=float)
    m.add_argument("--outer-iters", type=int)
    m.add_argument("--inner", choices=("gradient_descent", "closed_form"))
    m.add_argument("--inner-steps", type=int)
    m.add_argument("--inner-lr", type=float)
    m.add_argument("--restarts", type=int)
    m.add_argument("--omit-step-factor", action="store_true", default=None)
    m.set_defaults(func=cmd_im)

    o = sub.add_parser("ood", help="out-of-distribution comparison table")
    _add_common(o)
    o.add_argument("--scenario")
    o.add_argument("--methods", help="comma list of erm,balance,irm,iga")
    o.add_argument("--env-sources", help="comma list of ours,kmeans,oracle")
    o.add_argument("--seeds", help="e.g. 0..4")
    o.add_argument("--K", type=int)
    o.add_argument("--n", type=int)
    o.add_argument("--irm-lambda", type=float)
    o.add_argument("--iga-lambda", type=float)
    o.add_argument("--data", help="training CSV (instead of generating)")
    o.add_argument("--test", help="name=path[,name=path] test CSVs")
    o.set_defaults(func=cmd_ood)

    c = sub.add_parser("oracle", help="compare estimates with analytic references")
    _add_common(c)
    c.add_argument("--kind", help="homogeneous | selection-bias | hidden-variable")
    c.add_argument("--ns", help="sample sizes for the homogeneous sweep")
    c.add_argument("--seeds")
    c.add_argument("--K", type=int)
    c.add_argument("--restarts", type=int)
    c.add_argument("--ratios", help="e.g. 4:1,2:1,1:1")
    c.add_argument("--r", help="per-group r values")
    c.add_argument("--sigma-e", type=float)
    c.add_argument("--sigma-y", type=float)
    c.add_argument("--ef2", type=float)
    c.add_argument("--n", type=int)
    c.set_defaults(func=cmd_oracle)

    p = sub.add_parser("pac", help="evaluate the finite-sample bound")
    _add_common(p)
    family_flags(p)
    p.add_argument("--B", type=float)
    p.add_argument("--K", type=int)
    p.add_argument("--delta", type=float)
    p.add_argument("--N", type=int)
    p.add_argument("--rademacher", type=float)
    p.add_argument("--estimate-rademacher", action="store_true", default=None)
    p.add_argument("--draws", type=int)
    p.set_defaults(func=cmd_pac)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # argparse exits with 2 on bad flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    try:
        _merge_config(args, sub)
        return args.func(args)
    except (ConfigError, DataError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
