"""Projected-gradient search over soft environment assignments.

The outer variable is a row-stochastic N x K matrix W. For each column the
inner problem fits a family member to the column-weighted data; the outer
objective (to be minimized, in nats) is

    R(W) = (1/N) sum_ij w_ij loss_i(theta_j) + U(W)

where U is the family regularizer expressed in nats. At converged inner fits,
-R equals the heterogeneity attained by W up to terms that do not depend on W.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .dataset import Dataset
from .families import (FamilySpec, FitError, FitOptions, ModelParams, converged_options, fit_arrays,
                       loss_vector, per_sample_grads, weighted_loss_and_grad)
from .vinformation import (DEFAULT_MASS_FLOOR, HeterogeneityReport, empirical_conditional_entropy,
                           evaluate_heterogeneity, validate_assignment)

P_CLIP = 1e-12


class IMError(RuntimeError):
    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace or []


# ---------------------------------------------------------------------------
# regularizer
# ---------------------------------------------------------------------------

def _active(W: np.ndarray, mass_floor: Optional[float]) -> np.ndarray:
    masses = W.sum(axis=0)
    floor = (mass_floor or 0.0) * W.shape[0]
    return (masses > 0) & (masses >= floor)


def _class_counts(W: np.ndarray, y: np.ndarray, classes: int) -> np.ndarray:
    """K x C matrix of weighted label counts."""
    Y = np.zeros((y.size, classes))
    Y[np.arange(y.size), np.asarray(y, dtype=np.int64)] = 1.0
    return W.T @ Y


def regularizer(spec: FamilySpec, W, targets, mass_floor: Optional[float] = DEFAULT_MASS_FLOOR) -> float:
    """U(W) in raw units: squared-target units for V1, nats for V2.

    V1: sum_j S_j^2 / (N m_j) - ybar^2, with S_j and m_j the weighted target
    sum and mass of column j. V2: -(1/N) sum_j m_j H(label distribution of j).
    """
    W = np.asarray(W, dtype=float)
    y = np.asarray(targets, dtype=float)
    n = W.shape[0]
    act = _active(W, mass_floor)
    m = W.sum(axis=0)[act]
    if spec.kind == "V1":
        S = (W.T @ y)[act]
        return float(np.sum(S * S / m)) / n - float(y.mean()) ** 2
    C = _class_counts(W, y, spec.classes)[act]
    P = C / m[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(C > 0, C * np.log(P), 0.0)
    return float(terms.sum()) / n


def regularizer_grad(spec: FamilySpec, W, targets, mass_floor: Optional[float] = DEFAULT_MASS_FLOOR) -> np.ndarray:
    W = np.asarray(W, dtype=float)
    y = np.asarray(targets, dtype=float)
    n, K = W.shape
    act = _active(W, mass_floor)
    m = np.where(act, W.sum(axis=0), 1.0)
    G = np.zeros((n, K))
    if spec.kind == "V1":
        ybar = (W.T @ y) / m
        G = (2.0 * np.outer(y, ybar) - ybar[None, :] ** 2) / n
    else:
        P = np.clip(_class_counts(W, y, spec.classes) / m[:, None], P_CLIP, None)
        G = np.log(P).T[np.asarray(y, dtype=np.int64)] / n
    G[:, ~act] = 0.0
    return G


def regularizer_scale(spec: FamilySpec) -> float:
    """Factor converting U to nats."""
    return 1.0 / (2.0 * spec.sigma ** 2) if spec.kind == "V1" else 1.0


def objective(spec: FamilySpec, W, per_env_params: Sequence, data: Dataset,
              mass_floor: Optional[float] = DEFAULT_MASS_FLOOR) -> float:
    """R(W, theta) in nats; columns with no parameters contribute no loss."""
    W = np.asarray(W, dtype=float)
    X, y = data.features, data.targets
    total = 0.0
    for j, p in enumerate(per_env_params):
        if p is not None:
            total += float(W[:, j] @ loss_vector(spec, p.theta, X, y))
    return total / data.n + regularizer_scale(spec) * regularizer(spec, W, y, mass_floor)


# ---------------------------------------------------------------------------
# hypergradient
# ---------------------------------------------------------------------------

def loss_matrix(spec: FamilySpec, per_env_params: Sequence, data: Dataset) -> np.ndarray:
    L = np.zeros((data.n, len(per_env_params)))
    for j, p in enumerate(per_env_params):
        if p is not None:
            L[:, j] = loss_vector(spec, p.theta, data.features, data.targets)
    return L


def hypergradient(spec: FamilySpec, W, per_env_params: Sequence, data: Dataset, inner_opts: FitOptions,
                  mass_floor: Optional[float] = DEFAULT_MASS_FLOOR, omit_step_factor: bool = False) -> np.ndarray:
    """dR/dW with one unrolled inner step.

    Each column's parameters are treated as theta_t = theta_{t-1} - a * grad L_j,
    with L_j the weighted inner objective. Since d^2 L_j / (d theta d w_ij)
    is the per-sample gradient at theta_{t-1} (plus the ridge tie), the
    indirect term for entry (i, j) is -a * <dR/dtheta_j, that gradient>.
    Parameters without ``prev_theta`` (closed form / converged) add no
    indirect term. ``omit_step_factor`` drops the -a factor.
    """
    W = np.asarray(W, dtype=float)
    n, K = W.shape
    if data.n != n:
        raise ValueError(f"W has {n} rows, data has {data.n}")
    if len(per_env_params) != K:
        raise ValueError(f"got {len(per_env_params)} parameter sets for K={K}")
    X, y = data.features, data.targets
    G = regularizer_scale(spec) * regularizer_grad(spec, W, y, mass_floor)
    G += loss_matrix(spec, per_env_params, data) / n
    mask = spec.penalty_mask(data.d)
    for j, p in enumerate(per_env_params):
        if p is None or p.prev_theta is None:
            continue
        w = W[:, j]
        _, gR = weighted_loss_and_grad(spec, p.theta, X, y, w)
        gR /= n
        prev = p.prev_theta
        inner = per_sample_grads(spec, prev, X, y) @ gR + inner_opts.ridge * float((mask * prev) @ gR)
        if omit_step_factor:
            G[:, j] += inner
        else:
            G[:, j] -= p.step_size * inner
    return G


# ---------------------------------------------------------------------------
# simplex projection and hardening
# ---------------------------------------------------------------------------

def project_simplex_rows(M) -> np.ndarray:
    """Euclidean projection of every row onto the probability simplex."""
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        return project_simplex_rows(M[None, :])[0]
    if not np.all(np.isfinite(M)):
        raise ValueError("cannot project non-finite entries")
    K = M.shape[1]
    U = -np.sort(-M, axis=1)
    css = np.cumsum(U, axis=1) - 1.0
    idx = np.arange(1, K + 1)
    cond = U - css / idx > 0
    rho = K - 1 - np.argmax(cond[:, ::-1], axis=1)
    tau = css[np.arange(M.shape[0]), rho] / (rho + 1)
    return np.maximum(M - tau[:, None], 0.0)


def harden(W, tie_break: str = "lowest") -> np.ndarray:
    """Row-wise argmax; ties go to the lowest (or highest) column index."""
    W = validate_assignment(W)
    if tie_break == "lowest":
        return np.argmax(W, axis=1)
    if tie_break == "highest":
        K = W.shape[1]
        return K - 1 - np.argmax(W[:, ::-1], axis=1)
    raise ValueError(f"unknown tie_break {tie_break!r}")


def one_hot(labels, K: Optional[int] = None) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    K = int(labels.max()) + 1 if K is None else K
    if labels.min() < 0 or labels.max() >= K:
        raise ValueError("labels out of range")
    W = np.zeros((labels.size, K))
    W[np.arange(labels.size), labels] = 1.0
    return W


# ---------------------------------------------------------------------------
# the outer loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IMConfig:
    """Settings for run_im.

    ``outer_lr`` is a per-sample step: the update is W - outer_lr * N * grad,
    since every entry of dR/dW carries a 1/N factor.
    ``init`` is "uniform_noise" (1/K plus ``noise_scale`` times a Dirichlet
    draw) or "labels" (one-hot of ``init_labels``).
    """

    K: int = 2
    outer_lr: float = 0.05
    outer_iters: int = 200
    inner: FitOptions = field(default_factory=lambda: FitOptions("gradient_descent", steps=1))
    init: str = "uniform_noise"
    noise_scale: float = 0.1
    init_labels: Optional[tuple] = None
    seed: int = 0
    tie_break: str = "lowest"
    mass_floor: Optional[float] = DEFAULT_MASS_FLOOR
    omit_step_factor: bool = False
    restarts: int = 1
    eval_every: Optional[int] = None
    report_opts: Optional[FitOptions] = None

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if not self.outer_lr > 0:
            raise ValueError("outer_lr must be > 0")
        if self.outer_iters < 1:
            raise ValueError("outer_iters must be >= 1")
        if self.init not in ("uniform_noise", "labels"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.init == "uniform_noise" and not 0 < self.noise_scale < 0.5:
            raise ValueError("noise_scale must lie in (0, 0.5)")
        if self.init == "labels" and self.init_labels is None:
            raise ValueError("init='labels' needs init_labels")
        if self.tie_break not in ("lowest", "highest"):
            raise ValueError(f"unknown tie_break {self.tie_break!r}")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.eval_every is not None and self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")

    def with_(self, **kw) -> "IMConfig":
        return replace(self, **kw)


def initial_assignment(n: int, cfg: IMConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.init == "labels":
        labels = np.asarray(cfg.init_labels, dtype=np.int64)
        if labels.size != n:
            raise ValueError(f"init_labels has {labels.size} entries, data has {n}")
        return one_hot(labels, cfg.K)
    s = cfg.noise_scale
    return (1.0 - s) / cfg.K + s * rng.dirichlet(np.ones(cfg.K), size=n)


def _inner_fits(spec, data, W, opts, warm, mass_floor):
    params = []
    for j in range(W.shape[1]):
        w = W[:, j]
        if not w.sum() > 0:
            params.append(None)
            continue
        o = opts if warm[j] is None or opts.method == "closed_form" else opts.with_(init_theta=warm[j])
        params.append(fit_arrays(spec, data.features, data.targets, w, o))
    return params


def _trace_row(it, obj, het, W):
    return {"iter": it, "objective": obj, "heterogeneity": het,
            "env_masses": (W.sum(axis=0) / W.shape[0]).tolist()}


def _single_run(spec, data, cfg, rng, report_opts, pooled, eval_every):
    n = data.n
    W = initial_assignment(n, cfg, rng)
    K = cfg.K
    trace = []
    # start the truncated inner iterates from converged fits of the initial W
    warm = [p.theta if p is not None else None
            for p in _inner_fits(spec, data, W, report_opts, [None] * K, cfg.mass_floor)]

    def report(Wc):
        return evaluate_heterogeneity(spec, data, Wc, report_opts, cfg.mass_floor, pooled)

    # the uniform assignment attains exactly zero, so it seeds the best-seen record
    best_W = np.full((n, K), 1.0 / K)
    best = report(best_W)
    for it in range(cfg.outer_iters):
        try:
            params = _inner_fits(spec, data, W, cfg.inner, warm, cfg.mass_floor)
            obj = objective(spec, W, params, data, cfg.mass_floor)
        except FitError as exc:
            raise IMError(f"inner fit failed at outer iteration {it}: {exc}", trace) from exc
        if not math.isfinite(obj):
            trace.append(_trace_row(it, obj, float("nan"), W))
            raise IMError(f"non-finite objective at outer iteration {it}", trace)
        het = float("nan")
        if it % eval_every == 0:
            rep = report(W)
            het = rep.heterogeneity
            if het > best.heterogeneity:
                best, best_W = rep, W.copy()
        trace.append(_trace_row(it, obj, het, W))
        G = hypergradient(spec, W, params, data, cfg.inner, cfg.mass_floor, cfg.omit_step_factor)
        W = project_simplex_rows(W - cfg.outer_lr * n * G)
        warm = [p.theta if p is not None else w for p, w in zip(params, warm)]
    rep = report(W)
    trace.append(_trace_row(cfg.outer_iters, float("nan"), rep.heterogeneity, W))
    if rep.heterogeneity > best.heterogeneity:
        best, best_W = rep, W
    return best_W, best, trace


def run_im(spec: FamilySpec, data: Dataset, cfg: IMConfig) -> tuple[np.ndarray, HeterogeneityReport, list]:
    """Search for the assignment maximizing empirical heterogeneity.

    Returns the best assignment seen (over all restarts and evaluated
    iterates), its report with converged per-environment fits, and the trace
    of the restart that produced it. The reported value is >= 0 because the
    uniform assignment is always among the candidates.
    """
    if data.n < cfg.K:
        raise ValueError(f"need N >= K, got N={data.n}, K={cfg.K}")
    report_opts = cfg.report_opts or converged_options(spec)
    eval_every = cfg.eval_every or (1 if report_opts.method == "closed_form" else 10)
    pooled = empirical_conditional_entropy(spec, data, report_opts)
    best = None
    for r in range(cfg.restarts):
        rng = np.random.default_rng([cfg.seed, r])
        out = _single_run(spec, data, cfg, rng, report_opts, pooled, eval_every)
        if best is None or out[1].heterogeneity > best[1].heterogeneity:
            best = out
    return best


def write_trace_csv(trace: list, path) -> None:
    K = len(trace[0]["env_masses"]) if trace else 0
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["iter", "objective", "heterogeneity"] + [f"mass_{k}" for k in range(K)])
        for row in trace:
            wr.writerow([row["iter"], repr(row["objective"]), repr(row["heterogeneity"])]
                        + [repr(m) for m in row["env_masses"]])


# ---------------------------------------------------------------------------
# choosing K
# ---------------------------------------------------------------------------

@dataclass
class SweepResult:
    reports: list  # [(K, HeterogeneityReport)] in increasing K
    assignments: dict
    elbow: Optional[int]

    def __iter__(self):
        return iter(self.reports)

    def __len__(self):
        return len(self.reports)

    def __getitem__(self, i):
        return self.reports[i]


def find_elbow(Ks: Sequence[int], values: Sequence[float], ratio: float = 0.5) -> Optional[int]:
    """First K whose next gain is below ``ratio`` times the gain that reached it."""
    for i in range(1, len(Ks) - 1):
        gain_in = values[i] - values[i - 1]
        gain_out = values[i + 1] - values[i]
        if gain_in > 0 and gain_out < ratio * gain_in:
            return Ks[i]
    return None


def sweep_k(spec: FamilySpec, data: Dataset, Ks: Sequence[int], cfg: IMConfig,
            elbow_ratio: float = 0.5) -> SweepResult:
    Ks = sorted(set(int(k) for k in Ks))
    if not Ks:
        raise ValueError("Ks must be nonempty")
    if Ks[0] < 2:
        raise ValueError("every K must be >= 2")
    reports, assignments = [], {}
    for K in Ks:
        W, rep, _ = run_im(spec, data, cfg.with_(K=K))
        reports.append((K, rep))
        assignments[K] = W
    elbow = find_elbow(Ks, [r.heterogeneity for _, r in reports], elbow_ratio)
    return SweepResult(reports, assignments, elbow)
