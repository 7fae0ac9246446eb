"""Environment-aware training on top of discovered (or baseline) environments.

Trainers: ERM, sub-population balancing, IRMv1 and IGA. The two penalty
methods use linear models only and are optimized with L-BFGS from the ERM
solution. Penalties, with R_e the mean loss in environment e:

    IRMv1: sum_e (d/ds R_e(s * f) at s=1)^2
    IGA:   (1/E) sum_e || grad R_e - mean_e grad R_e ||^2
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, is_dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import optimize
from scipy.special import softmax

from .dataset import Dataset, GeneratorConfig, generate
from .families import (FamilySpec, FitError, FitOptions, ModelParams, _dloss_dout, _loss_from_outputs,
                       converged_options, design, fit_arrays, predict)
from .im_optimizer import IMConfig, harden, run_im

METHODS = ("ERM", "Balance", "IRM", "IGA")
ENV_SOURCES = ("Ours", "KMeans", "Oracle")


def config_hash(obj) -> str:
    """Short stable hash of a JSON-able (or dataclass) configuration."""
    def norm(o):
        if is_dataclass(o):
            return {k: norm(v) for k, v in asdict(o).items()}
        if isinstance(o, dict):
            return {str(k): norm(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [norm(v) for v in o]
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.integer, np.floating)):
            return o.item()
        return o
    blob = json.dumps(norm(obj), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# trainers
# ---------------------------------------------------------------------------

def _env_groups(envs, n: int) -> list:
    envs = np.asarray(envs)
    if envs.shape != (n,):
        raise ValueError(f"need one environment label per row ({n}), got shape {envs.shape}")
    return [np.flatnonzero(envs == e) for e in np.unique(envs)]


def train_erm(spec: FamilySpec, data: Dataset, opts: Optional[FitOptions] = None) -> ModelParams:
    return fit_arrays(spec, data.features, data.targets, np.ones(data.n), opts or converged_options(spec))


def balanced_weights(envs, K: Optional[int] = None) -> np.ndarray:
    """Weight N / (K * n_env) per sample, so every environment has equal total mass."""
    envs = np.asarray(envs, dtype=np.int64)
    labels, counts = np.unique(envs, return_counts=True)
    K = labels.size if K is None else K
    if K != labels.size:
        raise ValueError(f"{K - labels.size} environment(s) are empty")
    per = dict(zip(labels.tolist(), (envs.size / (K * counts)).tolist()))
    return np.array([per[e] for e in envs.tolist()])


def train_balanced(spec: FamilySpec, data: Dataset, envs, opts: Optional[FitOptions] = None,
                   K: Optional[int] = None) -> ModelParams:
    w = balanced_weights(envs, K)
    if w.size != data.n:
        raise ValueError("envs length does not match data")
    return fit_arrays(spec, data.features, data.targets, w, opts or converged_options(spec))


def _linear_only(spec: FamilySpec):
    if spec.model != "linear":
        raise ValueError("penalty trainers support linear models only")


def _irm_terms(spec, Z, G, y):
    """Per-env IRMv1 scalar gradient s and ds/dZ (unnormalized)."""
    if spec.kind == "V1":
        s = float(np.sum(G[:, 0] * Z[:, 0]))
        D = (2.0 * Z - np.asarray(y, dtype=float)[:, None]) / spec.sigma ** 2
        return s, D
    P = softmax(Z, axis=1)
    s = float(np.sum(G * Z))
    D = G + P * (Z - np.sum(P * Z, axis=1, keepdims=True))
    return s, D


def _hvp(spec, Xd, Z, Vmat):
    """Hessian-vector product of the summed loss of rows Xd, direction Vmat."""
    A = Xd @ Vmat
    if spec.kind == "V1":
        return Xd.T @ A / spec.sigma ** 2
    P = softmax(Z, axis=1)
    HA = P * A - P * np.sum(P * A, axis=1, keepdims=True)
    return Xd.T @ HA


def penalized_objective(spec: FamilySpec, theta: np.ndarray, data: Dataset, groups: list, lam: float,
                        kind: str, ridge: float = 0.0) -> tuple[float, np.ndarray]:
    """Pooled mean loss + lam * penalty (+ ridge), with its gradient."""
    _linear_only(spec)
    Xd = design(data.features, spec.intercept)
    y = data.targets
    n, p = Xd.shape
    m = spec.out_dim
    B = theta.reshape(p, m)
    Z = Xd @ B
    G = _dloss_dout(spec, Z, y)
    val = float(np.mean(_loss_from_outputs(spec, Z, y)))
    grad = Xd.T @ G / n
    if lam > 0:
        if kind == "irm":
            for idx in groups:
                ne = idx.size
                s, D = _irm_terms(spec, Z[idx], G[idx], y[idx])
                s /= ne
                val += lam * s * s
                grad += lam * 2.0 * s * (Xd[idx].T @ D) / ne
        elif kind == "iga":
            E = len(groups)
            gs = [Xd[idx].T @ G[idx] / idx.size for idx in groups]
            gbar = sum(gs) / E
            for idx, ge in zip(groups, gs):
                dev = ge - gbar
                val += lam * float(np.sum(dev * dev)) / E
                grad += lam * (2.0 / E) * _hvp(spec, Xd[idx], Z[idx], dev) / idx.size
        else:
            raise ValueError(f"unknown penalty {kind!r}")
    mask = spec.penalty_mask(data.d).reshape(p, m)
    val += 0.5 * ridge * float(np.sum(mask * B * B))
    grad = grad + ridge * mask * B
    return val, grad.ravel()


def _train_penalized(spec, data, envs, lam, kind, opts):
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    _linear_only(spec)
    opts = opts or FitOptions("lbfgs", max_iter=500)
    groups = _env_groups(envs, data.n)
    start = train_erm(spec, data, converged_options(spec, ridge=opts.ridge))
    if lam == 0:
        return start

    def fun(t):
        val, g = penalized_objective(spec, t, data, groups, lam, kind, opts.ridge)
        if not math.isfinite(val):
            raise FitError(f"{kind.upper()} objective diverged")
        return val, g

    res = optimize.minimize(fun, start.theta, jac=True, method="L-BFGS-B",
                            options={"maxiter": opts.max_iter, "ftol": 1e-15, "gtol": 1e-10})
    if not np.all(np.isfinite(res.x)):
        raise FitError(f"{kind.upper()} produced non-finite parameters")
    return ModelParams(spec, data.d, res.x)


def train_irm(spec: FamilySpec, data: Dataset, envs, lam: float, opts: Optional[FitOptions] = None) -> ModelParams:
    return _train_penalized(spec, data, envs, lam, "irm", opts)


def train_iga(spec: FamilySpec, data: Dataset, envs, lam: float, opts: Optional[FitOptions] = None) -> ModelParams:
    return _train_penalized(spec, data, envs, lam, "iga", opts)


# ---------------------------------------------------------------------------
# baseline environments and evaluation
# ---------------------------------------------------------------------------

def kmeans_envs(data: Dataset, K: int, seed: int, max_iter: int = 300) -> np.ndarray:
    """Lloyd's k-means on standardized features (targets excluded)."""
    from sklearn.cluster import KMeans
    from sklearn.preprocessing import StandardScaler

    if K < 1:
        raise ValueError("K must be >= 1")
    if K > data.n:
        raise ValueError(f"K={K} exceeds the number of rows {data.n}")
    if K == 1:
        return np.zeros(data.n, dtype=np.int64)
    Xs = StandardScaler().fit_transform(data.features)
    km = KMeans(n_clusters=K, n_init=1, max_iter=max_iter, random_state=seed, algorithm="lloyd")
    return km.fit_predict(Xs).astype(np.int64)


def agreement(labels, truth) -> float:
    """Best fraction of matching rows over relabellings of ``labels``."""
    from itertools import permutations

    labels, truth = np.asarray(labels), np.asarray(truth)
    K = int(max(labels.max(), truth.max())) + 1
    best = 0.0
    for perm in permutations(range(K)):
        best = max(best, float(np.mean(np.asarray(perm)[labels] == truth)))
    return best


def evaluate(spec: FamilySpec, params: ModelParams, test: Dataset) -> dict:
    out = predict(spec, params, test.features)
    if spec.kind == "V1":
        return {"mse": float(np.mean((out - test.targets) ** 2))}
    return {"accuracy": float(np.mean(np.argmax(out, axis=1) == test.targets))}


# ---------------------------------------------------------------------------
# the comparison table
# ---------------------------------------------------------------------------

@dataclass
class OODResult:
    method: str
    env_source: str
    seed: int
    metric: str
    values: dict  # condition -> metric value
    config_hash: str = ""

    def __post_init__(self):
        for k, v in self.values.items():
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"metric {k} is not a finite nonnegative number: {v}")
            if self.metric == "accuracy" and v > 1:
                raise ValueError(f"accuracy {k}={v} exceeds 1")

    @property
    def label(self) -> str:
        return self.method if self.method == "ERM" else f"{self.env_source}/{self.method}"


@dataclass
class Scenario:
    """A training distribution, its shifted test conditions and method settings.

    ``tests`` maps a condition name to GeneratorConfig overrides; the test set
    reuses the training coefficient vector. ``group_names`` labels the true
    training groups whose in-sample errors are also reported.
    """

    name: str
    train: GeneratorConfig
    tests: dict
    spec: FamilySpec
    im: IMConfig
    group_names: tuple = ()
    irm_lambda: float = 10.0
    iga_lambda: float = 0.1
    test_n: int = 5000
    penalty_opts: FitOptions = field(default_factory=lambda: FitOptions("lbfgs", max_iter=500))

    @property
    def K(self) -> int:
        return self.im.K


def selection_bias_scenario(**kw) -> Scenario:
    base = dict(
        name="selection-bias",
        train=GeneratorConfig("selection-bias"),
        tests={"r=-2.3": {"fractions": (1.0,), "r": (-2.3,)}, "r=-2.7": {"fractions": (1.0,), "r": (-2.7,)}},
        spec=FamilySpec.v1(),
        im=IMConfig(K=2),
        group_names=("Major (r=1.9)", "Minor (r=-1.9)"),
    )
    base.update(kw)
    return Scenario(**base)


def hidden_variable_scenario(K: int = 4, **kw) -> Scenario:
    base = dict(
        name="hidden-variable",
        train=GeneratorConfig("hidden-variable", n=11000),
        tests={"theta_V=-3": {"counts": (5000,), "theta_v": (-3.0,), "n": 5000}},
        spec=FamilySpec.v1(),
        # per-sample losses here are ~25 nats, so the step is much smaller and
        # the inner fit is exact (one descent step is too ill-conditioned)
        im=IMConfig(K=K, outer_lr=0.004, outer_iters=600, noise_scale=0.45, restarts=2,
                    inner=FitOptions("closed_form"), eval_every=10),
    )
    base.update(kw)
    return Scenario(**base)


def spurious_label_scenario(**kw) -> Scenario:
    base = dict(
        name="spurious-label",
        train=GeneratorConfig("spurious-label", agreement=0.85),
        tests={"r=0": {"agreement": 0.0}},
        spec=FamilySpec.v2(),
        im=IMConfig(K=2),
    )
    base.update(kw)
    return Scenario(**base)


def make_test_sets(sc: Scenario, train: Dataset, seed: int) -> dict:
    out = {}
    ss = np.random.SeedSequence([seed, 7919])
    for (name, overrides), child in zip(sc.tests.items(), ss.spawn(len(sc.tests))):
        kw = {"n": sc.test_n}
        if "theta_s" in train.meta:
            kw["theta_s"] = tuple(train.meta["theta_s"])
        kw.update(overrides)
        cfg = sc.train.with_(**kw)
        out[name] = generate(cfg, int(child.generate_state(1)[0]))
    return out


def environments(sc: Scenario, train: Dataset, source: str, seed: int) -> np.ndarray:
    if source == "Ours":
        W, _, _ = run_im(sc.spec, train, sc.im.with_(seed=seed))
        return harden(W, sc.im.tie_break)
    if source == "KMeans":
        return kmeans_envs(train, sc.K, seed)
    if source == "Oracle":
        if train.true_envs is None:
            raise ValueError("data carry no ground-truth environments")
        return train.true_envs
    raise ValueError(f"unknown environment source {source!r}")


def _train(sc: Scenario, method: str, train: Dataset, envs):
    spec = sc.spec
    if method == "ERM":
        return train_erm(spec, train)
    if method == "Balance":
        return train_balanced(spec, train, envs)
    if method == "IRM":
        return train_irm(spec, train, envs, sc.irm_lambda, sc.penalty_opts)
    if method == "IGA":
        return train_iga(spec, train, envs, sc.iga_lambda, sc.penalty_opts)
    raise ValueError(f"unknown method {method!r}")


def run_on_data(sc: Scenario, train: Dataset, tests: dict, methods: Sequence[str],
                env_sources: Sequence[str], seed: int) -> list:
    """All (method, env source) cells on given train/test data; ERM is run once."""
    metric = "mse" if sc.spec.kind == "V1" else "accuracy"
    h = config_hash({"scenario": sc, "seed": seed})
    results = []
    env_cache = {}
    for method in methods:
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}")
        sources = ["-"] if method == "ERM" else list(env_sources)
        for source in sources:
            envs = None
            if method != "ERM":
                if source not in env_cache:
                    env_cache[source] = environments(sc, train, source, seed)
                envs = env_cache[source]
            params = _train(sc, method, train, envs)
            vals = {name: evaluate(sc.spec, params, t)[metric] for name, t in tests.items()}
            if sc.group_names and train.true_envs is not None:
                for g, gname in enumerate(sc.group_names):
                    rows = np.flatnonzero(train.true_envs == g)
                    vals[gname] = evaluate(sc.spec, params, train.subset(rows))[metric]
            results.append(OODResult(method, source, seed, metric, vals, h))
    return results


def run_seed(sc: Scenario, methods: Sequence[str], env_sources: Sequence[str], seed: int) -> list:
    train = generate(sc.train, seed)
    return run_on_data(sc, train, make_test_sets(sc, train, seed), methods, env_sources, seed)


def run_table(sc: Scenario, methods: Sequence[str] = METHODS, env_sources: Sequence[str] = ("KMeans", "Ours"),
              seeds: Sequence[int] = range(5)) -> list:
    if not methods:
        raise ValueError("methods must be nonempty")
    out = []
    for seed in seeds:
        out.extend(run_seed(sc, methods, env_sources, int(seed)))
    return out


def aggregate(results: Sequence[OODResult]) -> list:
    """Rows (label, method, env_source, condition, mean, sd, n_seeds) in first-seen order."""
    cells: dict = {}
    for r in results:
        for cond, v in r.values.items():
            cells.setdefault((r.label, r.method, r.env_source, cond), []).append(v)
    rows = []
    for (label, method, source, cond), vals in cells.items():
        a = np.asarray(vals)
        sd = float(a.std(ddof=1)) if a.size > 1 else 0.0
        rows.append({"label": label, "method": method, "env_source": source, "condition": cond,
                     "mean": float(a.mean()), "sd": sd, "n_seeds": int(a.size)})
    return rows


def cell(rows: list, label: str, condition: str) -> dict:
    for r in rows:
        if r["label"] == label and r["condition"] == condition:
            return r
    raise KeyError((label, condition))


def write_summary_csv(rows: list, path) -> None:
    """Long format: one line per (method, env source, condition)."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["method", "env_source", "condition", "mean", "sd"])
        for r in rows:
            wr.writerow([r["method"], r["env_source"], r["condition"], repr(r["mean"]), repr(r["sd"])])


def write_table_csv(rows: list, path) -> None:
    """Wide format: one line per method cell, a mean and sd column per condition."""
    conds, cells = [], {}
    for r in rows:
        if r["condition"] not in conds:
            conds.append(r["condition"])
        cells.setdefault((r["method"], r["env_source"]), {})[r["condition"]] = r
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["method", "env_source"] + [f"{c} {k}" for c in conds for k in ("mean", "sd")])
        for (method, source), by_cond in cells.items():
            line = [method, source]
            for c in conds:
                r = by_cond.get(c)
                line += ["", ""] if r is None else [repr(r["mean"]), repr(r["sd"])]
            wr.writerow(line)


def write_raw_csv(results: Sequence[OODResult], path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["method", "env_source", "seed", "metric", "condition", "value", "config_hash"])
        for r in results:
            for cond, v in r.values.items():
                wr.writerow([r.method, r.env_source, r.seed, r.metric, cond, repr(v), r.config_hash])
