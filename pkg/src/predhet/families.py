"""Predictive families V1 (Gaussian regression) and V2 (categorical).

Both families are parameterized by a mean/logit function, either linear or a
one-hidden-layer tanh MLP, flattened into a single parameter vector. Losses
are negative log densities in nats. Weighted fitting minimizes

    sum_i w_i * loss_i(theta) + ridge/2 * (sum_i w_i) * ||theta_pen||^2

where ``theta_pen`` excludes intercepts and biases. Tying the ridge to the
total weight keeps the fit invariant to rescaling of the weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import optimize
from scipy.special import logsumexp, softmax

from .dataset import Dataset

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class FitError(RuntimeError):
    pass


@dataclass(frozen=True)
class FamilySpec:
    kind: str = "V1"  # "V1" regression | "V2" classification
    sigma: float = 1.0
    classes: int = 2
    model: str = "linear"  # "linear" | "mlp"
    intercept: bool = True
    hidden: int = 16

    def __post_init__(self):
        if self.kind not in ("V1", "V2"):
            raise ValueError(f"family kind must be 'V1' or 'V2', got {self.kind!r}")
        if self.model not in ("linear", "mlp"):
            raise ValueError(f"model must be 'linear' or 'mlp', got {self.model!r}")
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if self.classes < 2:
            raise ValueError("classes must be >= 2")
        if self.hidden < 1:
            raise ValueError("hidden must be >= 1")

    @classmethod
    def v1(cls, sigma=1.0, model="linear", intercept=True, hidden=16) -> "FamilySpec":
        return cls("V1", sigma=sigma, model=model, intercept=intercept, hidden=hidden)

    @classmethod
    def v2(cls, classes=2, model="linear", intercept=True, hidden=16) -> "FamilySpec":
        return cls("V2", classes=classes, model=model, intercept=intercept, hidden=hidden)

    @property
    def out_dim(self) -> int:
        return 1 if self.kind == "V1" else self.classes

    @property
    def constant(self) -> float:
        """Additive constant in every V1 loss (zero for V2)."""
        return math.log(self.sigma) + HALF_LOG_2PI if self.kind == "V1" else 0.0

    def n_params(self, d: int) -> int:
        m = self.out_dim
        if self.model == "linear":
            return (d + int(self.intercept)) * m
        return d * self.hidden + self.hidden + self.hidden * m + m

    def penalty_mask(self, d: int) -> np.ndarray:
        m = self.out_dim
        if self.model == "linear":
            mask = np.ones((d + int(self.intercept), m))
            if self.intercept:
                mask[-1] = 0.0
            return mask.ravel()
        H = self.hidden
        return np.concatenate([np.ones(d * H), np.zeros(H), np.ones(H * m), np.zeros(m)])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "sigma": self.sigma, "classes": self.classes,
                "model": self.model, "intercept": self.intercept, "hidden": self.hidden}

    @classmethod
    def from_dict(cls, d: dict) -> "FamilySpec":
        return cls(**d)


@dataclass
class ModelParams:
    """Flat parameter vector tied to a family and input dimension.

    ``prev_theta`` and ``step_size`` are filled by gradient-descent fits: the
    iterate before the last step and the step size used, as needed by the
    truncated hypergradient.
    """

    spec: FamilySpec
    d: int
    theta: np.ndarray
    prev_theta: Optional[np.ndarray] = None
    step_size: Optional[float] = None

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.shape != (self.spec.n_params(self.d),):
            raise ValueError(
                f"theta has length {self.theta.size}, architecture needs {self.spec.n_params(self.d)}"
            )
        if not np.all(np.isfinite(self.theta)):
            raise FitError("parameters contain non-finite entries")

    def to_json(self) -> dict:
        return {"spec": self.spec.to_dict(), "d": self.d, "theta": self.theta.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "ModelParams":
        return cls(FamilySpec.from_dict(obj["spec"]), int(obj["d"]), np.asarray(obj["theta"]))


@dataclass(frozen=True)
class FitOptions:
    """How to solve the weighted inner problem.

    method: "closed_form" (V1 + linear only), "gradient_descent" (exactly
    ``steps`` steps of size ``lr`` on the summed weighted loss; ``lr=None``
    picks 1/L from a curvature bound) or "lbfgs" (run to convergence).
    init: "zeros" or "seeded"; ``init_theta`` overrides both (warm start).
    """

    method: str = "closed_form"
    lr: Optional[float] = None
    steps: int = 1
    ridge: float = 1e-8
    init: str = "zeros"
    seed: int = 0
    max_iter: int = 2000
    tol: float = 1e-12
    init_theta: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        if self.method not in ("closed_form", "gradient_descent", "lbfgs"):
            raise ValueError(f"unknown fit method {self.method!r}")
        if self.method == "gradient_descent":
            if self.lr is not None and not self.lr >= 0:
                raise ValueError("lr must be >= 0")
            if self.steps < 1:
                raise ValueError("steps must be >= 1")
        if self.ridge < 0:
            raise ValueError("ridge must be >= 0")
        if self.init not in ("zeros", "seeded"):
            raise ValueError(f"unknown init {self.init!r}")

    def with_(self, **kw) -> "FitOptions":
        return replace(self, **kw)


def converged_options(spec: FamilySpec, ridge: float = 1e-8, max_iter: int = 2000) -> FitOptions:
    """Options that solve the inner problem to (numerical) optimality."""
    if spec.kind == "V1" and spec.model == "linear":
        return FitOptions("closed_form", ridge=ridge)
    return FitOptions("lbfgs", ridge=ridge, max_iter=max_iter, init="zeros" if spec.model == "linear" else "seeded")


# ---------------------------------------------------------------------------
# vectorized forward / backward
# ---------------------------------------------------------------------------

def design(X: np.ndarray, intercept: bool) -> np.ndarray:
    return np.hstack([X, np.ones((X.shape[0], 1))]) if intercept else X


def _mlp_unpack(spec: FamilySpec, theta: np.ndarray, d: int):
    H, m = spec.hidden, spec.out_dim
    i = 0
    W1 = theta[i:i + d * H].reshape(d, H); i += d * H
    b1 = theta[i:i + H]; i += H
    W2 = theta[i:i + H * m].reshape(H, m); i += H * m
    b2 = theta[i:i + m]
    return W1, b1, W2, b2


def outputs(spec: FamilySpec, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Raw outputs, shape (N, m): the mean for V1, the logits for V2."""
    d = X.shape[1]
    if spec.model == "linear":
        B = theta.reshape(d + int(spec.intercept), spec.out_dim)
        return design(X, spec.intercept) @ B
    W1, b1, W2, b2 = _mlp_unpack(spec, theta, d)
    return np.tanh(X @ W1 + b1) @ W2 + b2


def _check_dims(spec: FamilySpec, theta: np.ndarray, X: np.ndarray):
    if theta.size != spec.n_params(X.shape[1]):
        raise ValueError(
            f"dimension mismatch: parameters fit d={_infer_d(spec, theta.size)}, features have d={X.shape[1]}"
        )


def _infer_d(spec: FamilySpec, p: int):
    m = spec.out_dim
    if spec.model == "linear":
        return p // m - int(spec.intercept)
    return (p - spec.hidden - spec.hidden * m - m) // spec.hidden


def loss_vector(spec: FamilySpec, theta: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-sample negative log density, shape (N,)."""
    Z = outputs(spec, theta, X)
    if spec.kind == "V1":
        r = Z[:, 0] - y
        return r * r / (2.0 * spec.sigma ** 2) + spec.constant
    yi = np.asarray(y, dtype=np.int64)
    return logsumexp(Z, axis=1) - Z[np.arange(Z.shape[0]), yi]


def _dloss_dout(spec: FamilySpec, Z: np.ndarray, y: np.ndarray) -> np.ndarray:
    if spec.kind == "V1":
        return (Z - np.asarray(y, dtype=float)[:, None]) / spec.sigma ** 2
    G = softmax(Z, axis=1)
    G[np.arange(Z.shape[0]), np.asarray(y, dtype=np.int64)] -= 1.0
    return G


def per_sample_grads(spec: FamilySpec, theta: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of each sample's loss w.r.t. theta, shape (N, P)."""
    N, d = X.shape
    if spec.model == "linear":
        Xd = design(X, spec.intercept)
        G = _dloss_dout(spec, Xd @ theta.reshape(Xd.shape[1], spec.out_dim), y)
        return (Xd[:, :, None] * G[:, None, :]).reshape(N, -1)
    W1, b1, W2, b2 = _mlp_unpack(spec, theta, d)
    A = np.tanh(X @ W1 + b1)
    dZ = _dloss_dout(spec, A @ W2 + b2, y)
    dH = (dZ @ W2.T) * (1.0 - A * A)
    return np.hstack([
        (X[:, :, None] * dH[:, None, :]).reshape(N, -1),
        dH,
        (A[:, :, None] * dZ[:, None, :]).reshape(N, -1),
        dZ,
    ])


def weighted_loss_and_grad(spec: FamilySpec, theta: np.ndarray, X: np.ndarray, y: np.ndarray,
                           w: np.ndarray) -> tuple[float, np.ndarray]:
    """sum_i w_i loss_i and its gradient, without forming per-sample gradients."""
    N, d = X.shape
    if spec.model == "linear":
        Xd = design(X, spec.intercept)
        Z = Xd @ theta.reshape(Xd.shape[1], spec.out_dim)
        G = _dloss_dout(spec, Z, y) * w[:, None]
        return float(w @ _loss_from_outputs(spec, Z, y)), (Xd.T @ G).ravel()
    W1, b1, W2, b2 = _mlp_unpack(spec, theta, d)
    A = np.tanh(X @ W1 + b1)
    Z = A @ W2 + b2
    dZ = _dloss_dout(spec, Z, y) * w[:, None]
    dH = (dZ @ W2.T) * (1.0 - A * A)
    grad = np.concatenate([(X.T @ dH).ravel(), dH.sum(0), (A.T @ dZ).ravel(), dZ.sum(0)])
    return float(w @ _loss_from_outputs(spec, Z, y)), grad


def _loss_from_outputs(spec, Z, y):
    if spec.kind == "V1":
        r = Z[:, 0] - y
        return r * r / (2.0 * spec.sigma ** 2) + spec.constant
    return logsumexp(Z, axis=1) - Z[np.arange(Z.shape[0]), np.asarray(y, dtype=np.int64)]


# ---------------------------------------------------------------------------
# single-sample API
# ---------------------------------------------------------------------------

def _row(x) -> np.ndarray:
    return np.atleast_1d(np.asarray(x, dtype=float))[None, :]


def loss(spec: FamilySpec, params: ModelParams, x, y) -> float:
    """-log f[x](y) for the family member selected by ``params``."""
    X = _row(x)
    _check_dims(spec, params.theta, X)
    if spec.kind == "V2" and not (0 <= int(y) < spec.classes):
        raise ValueError(f"class {y} out of range for {spec.classes} classes")
    val = float(loss_vector(spec, params.theta, X, np.array([y]))[0])
    if not math.isfinite(val):
        raise FitError("non-finite loss")
    return val


def grad_params(spec: FamilySpec, params: ModelParams, x, y) -> np.ndarray:
    X = _row(x)
    _check_dims(spec, params.theta, X)
    g = per_sample_grads(spec, params.theta, X, np.array([y]))[0]
    if not np.all(np.isfinite(g)):
        raise FitError("non-finite gradient")
    return g


def predict(spec: FamilySpec, params: ModelParams, x):
    """Mean (V1) or class-probability vector (V2) for one row or a matrix of rows."""
    X = np.asarray(x, dtype=float)
    single = X.ndim <= 1
    X = _row(X) if single else X
    _check_dims(spec, params.theta, X)
    Z = outputs(spec, params.theta, X)
    out = Z[:, 0] if spec.kind == "V1" else softmax(Z, axis=1)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# weighted fitting
# ---------------------------------------------------------------------------

def initial_theta(spec: FamilySpec, d: int, opts: FitOptions) -> np.ndarray:
    if opts.init_theta is not None:
        theta = np.array(opts.init_theta, dtype=float)
        if theta.shape != (spec.n_params(d),):
            raise ValueError("init_theta has the wrong length")
        return theta
    p = spec.n_params(d)
    if opts.init == "zeros":
        return np.zeros(p)
    return 0.1 * np.random.default_rng(opts.seed).standard_normal(p)


def curvature_bound(spec: FamilySpec, X: np.ndarray, w: np.ndarray, ridge: float) -> float:
    """Upper bound on the Hessian norm of the summed weighted loss (exact for V1 linear)."""
    Xd = design(X, spec.intercept) if spec.model == "linear" else design(X, True)
    lam = float(np.linalg.eigvalsh((Xd * w[:, None]).T @ Xd)[-1])
    if spec.kind == "V1":
        lam /= spec.sigma ** 2
    else:
        lam *= 0.5
    if spec.model == "mlp":
        lam *= 1.0 + spec.hidden
    return lam + ridge * float(w.sum())


def fit_arrays(spec: FamilySpec, X: np.ndarray, y: np.ndarray, w: np.ndarray, opts: FitOptions) -> ModelParams:
    w = np.asarray(w, dtype=float)
    if np.any(w < 0):
        raise FitError("weights must be nonnegative")
    total = float(w.sum())
    if not total > 0:
        raise FitError("weights must have a positive sum")
    N, d = X.shape
    mask = spec.penalty_mask(d)
    rho = opts.ridge * total

    if opts.method == "closed_form":
        if spec.kind != "V1" or spec.model != "linear":
            raise FitError("closed_form is only available for V1 with a linear mean")
        Xd = design(X, spec.intercept)
        A = (Xd * w[:, None]).T @ Xd + rho * spec.sigma ** 2 * np.diag(mask)
        b = Xd.T @ (w * y)
        if np.linalg.cond(A) > 1e14:
            raise FitError("weighted normal matrix is singular; use ridge > 0")
        return ModelParams(spec, d, np.linalg.solve(A, b))

    theta = initial_theta(spec, d, opts)

    if opts.method == "gradient_descent":
        lr = opts.lr if opts.lr is not None else 1.0 / curvature_bound(spec, X, w, opts.ridge)
        prev = theta
        for _ in range(opts.steps):
            val, g = weighted_loss_and_grad(spec, theta, X, y, w)
            if not math.isfinite(val):
                raise FitError("non-finite loss during gradient descent")
            prev = theta
            theta = theta - lr * (g + rho * mask * theta)
        if not np.all(np.isfinite(theta)):
            raise FitError("gradient descent diverged")
        return ModelParams(spec, d, theta, prev_theta=prev, step_size=lr)

    # lbfgs; the objective is divided by the total weight for conditioning
    def fun(t):
        val, g = weighted_loss_and_grad(spec, t, X, y, w)
        pen = 0.5 * rho * float(np.sum(mask * t * t))
        return (val + pen) / total, (g + rho * mask * t) / total

    res = optimize.minimize(fun, theta, jac=True, method="L-BFGS-B",
                            options={"maxiter": opts.max_iter, "ftol": opts.tol, "gtol": 1e-10})
    if not np.all(np.isfinite(res.x)) or not math.isfinite(res.fun):
        raise FitError("non-finite objective during L-BFGS fit")
    return ModelParams(spec, d, res.x)


def fit_weighted(spec: FamilySpec, data: Dataset, weights, opts: FitOptions) -> ModelParams:
    """Minimize the weighted inner objective on ``data``."""
    return fit_arrays(spec, data.features, data.targets, np.asarray(weights, dtype=float), opts)


def mean_loss(spec: FamilySpec, params: ModelParams, X: np.ndarray, y: np.ndarray, w=None) -> float:
    lv = loss_vector(spec, params.theta, X, y)
    if w is None:
        return float(lv.mean())
    return float(np.asarray(w) @ lv) / X.shape[0]
