"""Finite-sample deviation bound for the empirical heterogeneity and a
Monte-Carlo estimate of the Rademacher complexity it depends on.

The complexity estimate maximizes a nonconcave objective with restarts and is
a heuristic, not a certified value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import optimize
from scipy.special import expit

from .dataset import Dataset, GeneratorConfig, generate
from .families import FamilySpec, loss_vector, per_sample_grads


@dataclass(frozen=True)
class BoundInputs:
    B: float
    K: int
    delta: float
    N: int
    rademacher: float

    def __post_init__(self):
        # B = 0 is admitted so the degenerate all-zero case evaluates to 0
        if not self.B >= 0:
            raise ValueError("B must be >= 0")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if not self.rademacher >= 0:
            raise ValueError("rademacher must be >= 0")
        hi = 1.0 / (2 * self.K + 2)
        if not 0 < self.delta < hi:
            raise ValueError(f"delta must lie in (0, {hi:.6g}) for K={self.K}, got {self.delta}")

    @property
    def confidence(self) -> float:
        return 1.0 - 2 * (self.K + 1) * self.delta


def bound_value(b: BoundInputs) -> float:
    """4(K+1) R + 2(K+1) B sqrt(2 ln(1/delta) / N)."""
    k1 = b.K + 1
    return 4 * k1 * b.rademacher + 2 * k1 * b.B * math.sqrt(2.0 * math.log(1.0 / b.delta) / b.N)


# ---------------------------------------------------------------------------
# Rademacher estimation
# ---------------------------------------------------------------------------

@dataclass
class RademacherEstimate:
    mean: float
    se: float
    values: np.ndarray
    solutions: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"rademacher": self.mean, "se": self.se, "draws": int(self.values.size)}


def sign_draws(n: int, draws: int, seed: int) -> np.ndarray:
    """draws x n matrix of Rademacher signs; row i depends only on (seed, i)."""
    return np.stack([np.random.default_rng([seed, i]).choice([-1.0, 1.0], size=n) for i in range(draws)])


def monte_carlo_rademacher(sup_fn: Callable[[np.ndarray], float], n: int, draws: int, seed: int = 0) -> RademacherEstimate:
    """Average of sup_g (1/n) sum_i s_i g(z_i) over random sign vectors s."""
    if draws < 1:
        raise ValueError("draws must be >= 1")
    vals = np.array([sup_fn(s) for s in sign_draws(n, draws, seed)])
    if not np.all(np.isfinite(vals)):
        raise FloatingPointError("non-finite inner objective")
    se = float(vals.std(ddof=1) / math.sqrt(draws)) if draws > 1 else float("nan")
    return RademacherEstimate(float(vals.mean()), se, vals)


def exact_rademacher_two_constants(n: int, B: float) -> float:
    """E |sum s_i| * B / n by enumerating all 2^n sign vectors (via binomial counts)."""
    k = np.arange(n + 1)
    counts = np.array([math.comb(n, int(i)) for i in k], dtype=float)
    return float(B * np.sum(counts * np.abs(2 * k - n)) / (2.0 ** n) / n)


def _split(spec, d, p):
    P = spec.n_params(d)
    return p[:P], p[P:P + d], p[P + d], p[P + d + 1]


def _g_and_grad(spec: FamilySpec, p: np.ndarray, X: np.ndarray, y: np.ndarray, B: float):
    """g_i = B tanh(log f(y_i|x_i) / B) * q_i and dg_i/dp, with q = sigmoid(a.x + b y + c)."""
    d = X.shape[1]
    theta, a, b, c = _split(spec, d, p)
    yf = np.asarray(y, dtype=float)
    logf = -loss_vector(spec, theta, X, y)
    t = np.tanh(logf / B)
    q = expit(X @ a + b * yf + c)
    g = B * t * q
    dtheta = -((1.0 - t * t) * q)[:, None] * per_sample_grads(spec, theta, X, y)
    dq = (B * t * q * (1.0 - q))[:, None]
    J = np.hstack([dtheta, dq * X, dq * yf[:, None], dq])
    return g, J


def n_class_params(spec: FamilySpec, d: int) -> int:
    return spec.n_params(d) + d + 2


def empirical_rademacher(spec: FamilySpec, data: Dataset, draws: int = 50, seed: int = 0, B: float = 5.0,
                         restarts: int = 2, box: float = 10.0, max_iter: int = 200,
                         init: Optional[Sequence[np.ndarray]] = None) -> RademacherEstimate:
    """Monte-Carlo estimate of the complexity of {log f(y|x) q(x, y)}.

    log f is squashed smoothly into [-B, B] and q is a logistic function of
    (x, y); all parameters are boxed to [-box, box]. For each sign draw the
    sup is approximated by L-BFGS-B from ``restarts`` random starts plus, if
    given, ``init[i]``; the best value found is kept. Supplying the solutions
    of a nested smaller class as ``init`` makes the estimate monotone in the
    class.
    """
    if draws < 1:
        raise ValueError("draws must be >= 1")
    if not B > 0:
        raise ValueError("B must be > 0")
    X, y = data.features, data.targets
    n = data.n
    P = n_class_params(spec, data.d)
    bounds = [(-box, box)] * P
    signs = sign_draws(n, draws, seed)
    vals, sols = [], []
    for i, s in enumerate(signs):
        def neg(p):
            g, J = _g_and_grad(spec, p, X, y, B)
            return -float(s @ g) / n, -(s @ J) / n

        rng = np.random.default_rng([seed, i, 1])
        starts = [rng.uniform(-1.0, 1.0, P) for _ in range(restarts)]
        if init is not None:
            starts.insert(0, np.clip(np.asarray(init[i], dtype=float), -box, box))
        best_v, best_p = -np.inf, None
        for x0 in starts:
            v0 = -neg(x0)[0]
            if v0 > best_v:
                best_v, best_p = v0, x0
            res = optimize.minimize(neg, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                                    options={"maxiter": max_iter})
            if math.isfinite(res.fun) and -res.fun > best_v:
                best_v, best_p = -float(res.fun), res.x
        if not math.isfinite(best_v):
            raise FloatingPointError("non-finite inner objective")
        vals.append(best_v)
        sols.append(best_p)
    vals = np.asarray(vals)
    se = float(vals.std(ddof=1) / math.sqrt(draws)) if draws > 1 else float("nan")
    return RademacherEstimate(float(vals.mean()), se, vals, sols)


def embed_linear_params(spec: FamilySpec, p: np.ndarray, d_small: int, keep: Sequence[int], d_big: int) -> np.ndarray:
    """Map class parameters fitted on columns ``keep`` of a wider input into the wider layout."""
    if spec.model != "linear":
        raise ValueError("embedding is defined for linear families only")
    theta, a, b, c = _split(spec, d_small, np.asarray(p, dtype=float))
    m = spec.out_dim
    Bs = theta.reshape(d_small + int(spec.intercept), m)
    Bb = np.zeros((d_big + int(spec.intercept), m))
    Bb[list(keep)] = Bs[:d_small]
    if spec.intercept:
        Bb[-1] = Bs[-1]
    ab = np.zeros(d_big)
    ab[list(keep)] = a
    return np.concatenate([Bb.ravel(), ab, [b, c]])


# ---------------------------------------------------------------------------
# finite-sample sanity check on homogeneous data
# ---------------------------------------------------------------------------

def sanity_experiment(n: int = 100, trials: int = 20, K: int = 2, delta: float = 0.02, draws: int = 10,
                      seed: int = 0, im_cfg=None) -> list:
    """Compare the change of the estimate between N and 10N with the bound at N.

    Each trial draws homogeneous data at both sizes, runs the optimizer on
    each, and evaluates the bound with B taken as the largest absolute log
    density of the pooled fit on the small sample and the complexity
    estimated on that sample.
    """
    from .im_optimizer import IMConfig, run_im
    from .vinformation import empirical_conditional_entropy

    spec = FamilySpec.v1()
    cfg = im_cfg or IMConfig(K=K)
    out = []
    for t in range(trials):
        small = generate(GeneratorConfig("homogeneous", n=n), seed=seed * 1000 + 2 * t)
        big = generate(GeneratorConfig("homogeneous", n=10 * n), seed=seed * 1000 + 2 * t + 1)
        h_small = run_im(spec, small, cfg.with_(K=K, seed=t))[1].heterogeneity
        h_big = run_im(spec, big, cfg.with_(K=K, seed=t))[1].heterogeneity
        _, pooled = empirical_conditional_entropy(spec, small)
        B = float(np.max(np.abs(loss_vector(spec, pooled.theta, small.features, small.targets))))
        rad = empirical_rademacher(spec, small, draws=draws, seed=t, B=B, restarts=1)
        bound = bound_value(BoundInputs(B, K, delta, n, max(rad.mean, 0.0)))
        gap = abs(h_small - h_big)
        out.append({"trial": t, "h_n": h_small, "h_10n": h_big, "gap": gap, "B": B,
                    "rademacher": rad.mean, "se": rad.se, "bound": bound, "within": gap <= bound})
    return out
