"""Independent references: closed-form approximations, exhaustive search and
finite-difference gradients.

Nothing here shares code paths with the optimizer beyond the objective
definition itself, so agreement between the two is meaningful.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .dataset import Dataset, Task, group_sizes
from .families import FamilySpec, FitOptions, ModelParams, converged_options, curvature_bound, fit_arrays, weighted_loss_and_grad
from .im_optimizer import objective, one_hot
from .vinformation import empirical_conditional_entropy, evaluate_heterogeneity

BRUTE_FORCE_LIMIT = 10 ** 6
REFERENCE_VARIANTS = ("selection_bias", "hidden_variable")


# ---------------------------------------------------------------------------
# analytic approximations for two generating mechanisms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReferenceScenario:
    """Moments describing a mixture of sub-populations.

    ``r`` and ``sigma`` give, per sub-population, how strongly the spurious
    covariate tracks the misspecified part f(S) and its own noise SD.
    """

    variant: str
    env_masses: tuple
    r: tuple
    sigma: tuple
    Ef2: float
    sigma_Y: float = 0.0

    def __post_init__(self):
        if self.variant not in REFERENCE_VARIANTS:
            raise ValueError(f"variant must be one of {REFERENCE_VARIANTS}, got {self.variant!r}")
        m = np.asarray(self.env_masses, dtype=float)
        if not (len(self.r) == len(self.sigma) == m.size) or m.size == 0:
            raise ValueError("env_masses, r and sigma must share a nonzero length")
        if np.any(m < 0) or abs(m.sum() - 1.0) > 1e-9:
            raise ValueError("env_masses must be a probability vector")
        if np.any(np.asarray(self.sigma) < 0):
            raise ValueError("sigma entries must be >= 0")
        if self.Ef2 < 0 or self.sigma_Y < 0:
            raise ValueError("Ef2 and sigma_Y must be >= 0")

    @property
    def signal(self) -> float:
        """Second moment of the part of Y the spurious covariate can carry."""
        if self.variant == "hidden_variable":
            return self.Ef2 + self.sigma_Y ** 2
        return self.Ef2

    def l_ratio(self) -> float:
        """min over sub-populations of r^2 * signal / sigma^2 (inf if noiseless)."""
        r = np.asarray(self.r, dtype=float)
        s = np.asarray(self.sigma, dtype=float)
        num = r * r * self.signal
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(s > 0, num / np.where(s > 0, s * s, 1.0), np.where(num > 0, np.inf, 0.0))
        return float(ratio.min())

    def l_condition_holds(self) -> bool:
        return self.l_ratio() > 1.0


class Approximation(NamedTuple):
    value: float
    error_bound: float
    reliable: bool
    note: str = ""


def _approximation(s: ReferenceScenario) -> Approximation:
    p = np.asarray(s.env_masses, dtype=float)
    r = np.asarray(s.r, dtype=float)
    sig2 = np.asarray(s.sigma, dtype=float) ** 2
    F = s.signal
    Er, Er2, Es2 = p @ r, p @ (r * r), p @ sig2
    var_r = Er2 - Er * Er
    den = Er2 * F + Es2
    value = (var_r * F + Es2) / den * F if den > 0 else 0.0
    # residual terms written so that sigma = 0 is well defined
    q = r * r * F + sig2
    safe = np.where(q > 0, q, 1.0)
    t1 = np.where(q > 0, sig2 / safe, 1.0)
    t2 = np.where(q > 0, r * np.sqrt(sig2) * F / safe, 0.0)
    R = float(p @ t1 ** 2) * F + float(p @ t2 ** 2)
    bound = 0.5 * max(s.sigma_Y ** 2, R)
    ok = s.l_condition_holds()
    note = "" if ok else f"approximation unreliable: L-ratio {s.l_ratio():.4g} <= 1"
    return Approximation(float(value), float(bound), ok, note)


def selection_bias_approximation(s: ReferenceScenario) -> Approximation:
    """Plug-in heterogeneity and its error bound, in squared-target units.

    Divide by 2 sigma^2 of the Gaussian family to express it in nats.
    """
    if s.variant != "selection_bias":
        raise ValueError("scenario is not a selection-bias scenario")
    return _approximation(s)


def hidden_variable_approximation(s: ReferenceScenario) -> Approximation:
    if s.variant != "hidden_variable":
        raise ValueError("scenario is not a hidden-variable scenario")
    return _approximation(s)


def homogeneous_bound(sigma: float) -> float:
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    return math.pi * sigma * sigma


def reference_dataset(s: ReferenceScenario, n: int, seed: int, beta: float = 1.0) -> Dataset:
    """Draw data from the mechanism behind ``s`` with f(S) = sqrt(Ef2) (S^2 - 1)/sqrt(2).

    S ~ N(0, 1), so E[f^2] = Ef2 exactly and E[f(S) S] = 0.
    Features are [S, V]; sub-population labels are kept in ``true_envs``.
    """
    rng = np.random.default_rng(seed)
    sizes = group_sizes(n, s.env_masses)
    env = np.repeat(np.arange(len(sizes)), sizes)
    S = rng.standard_normal(n)
    f = math.sqrt(s.Ef2) * (S * S - 1.0) / math.sqrt(2.0)
    eps_y = s.sigma_Y * rng.standard_normal(n)
    eps_v = rng.standard_normal(n)
    y = beta * S + f + eps_y
    r = np.asarray(s.r, dtype=float)[env]
    sd = np.asarray(s.sigma, dtype=float)[env]
    carried = f if s.variant == "selection_bias" else f + eps_y
    V = r * carried + sd * eps_v
    return Dataset(np.column_stack([S, V]), y, Task.regression(), env,
                   {"variant": s.variant, "seed": seed, "beta": beta})


def compare_to_approximation(approx: Approximation, empirical: float) -> dict:
    return {
        "analytical": approx.value,
        "bound": approx.error_bound,
        "empirical": float(empirical),
        "within_bound": bool(abs(empirical - approx.value) <= approx.error_bound),
        "reliable": approx.reliable,
    }


# ---------------------------------------------------------------------------
# exhaustive search over hard partitions
# ---------------------------------------------------------------------------

def restricted_growth_strings(n: int, K: int):
    """Every labelling of n items with <= K labels, one per relabelling class.

    Labels appear in order of first occurrence, so a string never uses label
    j before label j - 1.
    """
    a = [0] * n
    # m[i] = max label among a[:i+1]
    m = [0] * n

    def rec(i):
        if i == n:
            yield np.array(a)
            return
        top = min(m[i - 1] + 1, K - 1)
        for v in range(top + 1):
            a[i] = v
            m[i] = max(m[i - 1], v)
            yield from rec(i + 1)

    if n == 0:
        return
    a[0] = 0
    m[0] = 0
    yield from rec(1)


def brute_force_heterogeneity(spec: FamilySpec, data: Dataset, K: int, opts: Optional[FitOptions] = None,
                              mass_floor: Optional[float] = None, max_assignments: int = BRUTE_FORCE_LIMIT):
    """Maximum heterogeneity over all hard assignments into at most K environments."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if K ** data.n > max_assignments:
        raise ValueError(f"instance too large: K^N = {K}^{data.n} exceeds {max_assignments}")
    opts = opts or converged_options(spec)
    pooled = empirical_conditional_entropy(spec, data, opts)
    best_val, best_W = -np.inf, None
    for labels in restricted_growth_strings(data.n, K):
        W = one_hot(labels, K)
        val = evaluate_heterogeneity(spec, data, W, opts, mass_floor, pooled).heterogeneity
        if val > best_val:
            best_val, best_W = val, W
    return float(best_val), best_W


# ---------------------------------------------------------------------------
# finite-difference hypergradient
# ---------------------------------------------------------------------------

def _unrolled_params(spec, data, W, inner_opts, anchors, alphas):
    """theta_t for each column: one descent step from a fixed anchor, or a re-fit."""
    X, y = data.features, data.targets
    mask = spec.penalty_mask(data.d)
    out = []
    for j in range(W.shape[1]):
        w = W[:, j]
        if anchors is None:
            out.append(fit_arrays(spec, X, y, w, inner_opts))
            continue
        a = anchors[j]
        _, g = weighted_loss_and_grad(spec, a, X, y, w)
        theta = a - alphas[j] * (g + inner_opts.ridge * float(w.sum()) * mask * a)
        out.append(ModelParams(spec, data.d, theta))
    return out


def row_center(G: np.ndarray) -> np.ndarray:
    """Remove each row's mean: the only part of dR/dW visible on the simplex."""
    return G - G.mean(axis=1, keepdims=True)


def finite_difference_hypergradient(spec: FamilySpec, W, data: Dataset, inner_opts: FitOptions,
                                    h: float = 1e-6, mass_floor: Optional[float] = None) -> np.ndarray:
    """Row-centered central-difference gradient of the unrolled objective.

    For descent inner options the last iterate is treated as one step of the
    configured size from the previous iterate, which is held fixed at its
    value for the unperturbed W. Other options re-fit per perturbation.
    Each row is probed along e_ij - e_i0, which keeps row sums at one.
    """
    if not 1e-8 <= h <= 1e-3:
        raise ValueError("h must lie in [1e-8, 1e-3]")
    W = np.asarray(W, dtype=float)
    n, K = W.shape
    anchors = alphas = None
    if inner_opts.method == "gradient_descent":
        anchors, alphas = [], []
        for j in range(K):
            w = W[:, j]
            lr = inner_opts.lr if inner_opts.lr is not None else 1.0 / curvature_bound(
                spec, data.features, w, inner_opts.ridge)
            base = fit_arrays(spec, data.features, data.targets, w, inner_opts.with_(lr=lr))
            anchors.append(base.prev_theta)
            alphas.append(lr)

    def R(Wp):
        val = objective(spec, Wp, _unrolled_params(spec, data, Wp, inner_opts, anchors, alphas), data, mass_floor)
        if not math.isfinite(val):
            raise FloatingPointError("non-finite objective during finite differencing")
        return val

    G = np.zeros((n, K))
    for i in range(n):
        for j in range(1, K):
            E = np.zeros((n, K))
            E[i, j], E[i, 0] = 1.0, -1.0
            G[i, j] = (R(W + h * E) - R(W - h * E)) / (2.0 * h)
    return row_center(G)


def relative_error(G_analytic: np.ndarray, G_reference: np.ndarray) -> float:
    """Relative Frobenius error between row-centered gradients."""
    A, B = row_center(np.asarray(G_analytic)), row_center(np.asarray(G_reference))
    scale = max(float(np.linalg.norm(B)), 1e-300)
    return float(np.linalg.norm(A - B)) / scale
