"""Empirical predictive V-entropies and the heterogeneity attained by a fixed W."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dataset import Dataset
from .families import FamilySpec, FitOptions, ModelParams, converged_options, fit_arrays, loss_vector

DEFAULT_MASS_FLOOR = 1e-3


def validate_assignment(W, n: Optional[int] = None, atol: float = 1e-9) -> np.ndarray:
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[1] < 1:
        raise ValueError(f"W must be an N x K matrix with K >= 1, got shape {W.shape}")
    if n is not None and W.shape[0] != n:
        raise ValueError(f"W has {W.shape[0]} rows, data has {n}")
    if np.any(W < -atol) or np.any(W > 1 + atol):
        raise ValueError("W entries must lie in [0, 1]")
    if np.any(np.abs(W.sum(axis=1) - 1.0) > atol):
        raise ValueError("every row of W must sum to 1")
    return W


def entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def label_distribution(y: np.ndarray, classes: int, w: Optional[np.ndarray] = None) -> np.ndarray:
    counts = np.bincount(np.asarray(y, dtype=np.int64), weights=w, minlength=classes)
    return counts / counts.sum()


def empirical_marginal_entropy(spec: FamilySpec, data: Dataset) -> float:
    """H_V(Y; D): loss of the best input-free predictor."""
    # same arithmetic as a single all-ones environment, so K=1 cancels exactly
    return _env_marginal_term(spec, data.targets, np.ones(data.n), data.n)


def empirical_conditional_entropy(spec: FamilySpec, data: Dataset,
                                  opts: Optional[FitOptions] = None) -> tuple[float, ModelParams]:
    """H_V(Y|X; D): mean loss of the uniformly weighted fit, and that fit."""
    opts = opts or converged_options(spec)
    w = np.ones(data.n)
    params = fit_arrays(spec, data.features, data.targets, w, opts)
    return float(w @ loss_vector(spec, params.theta, data.features, data.targets)) / data.n, params


def _env_marginal_term(spec: FamilySpec, y: np.ndarray, w: np.ndarray, n: int) -> float:
    """(1/N) inf_f sum_i w_i * -log f[empty](y_i) for one environment column."""
    mass = float(w.sum())
    if spec.kind == "V1":
        mean = float(w @ y) / mass
        return (0.5 * float(w @ (y - mean) ** 2) / spec.sigma ** 2 + mass * spec.constant) / n
    return mass * entropy(label_distribution(y, spec.classes, w)) / n


@dataclass
class EnvEntropies:
    env_conditional: float
    env_marginal: float
    per_env_params: list
    env_masses: np.ndarray
    skipped: list = field(default_factory=list)


def weighted_env_entropies(spec: FamilySpec, data: Dataset, W, opts: Optional[FitOptions] = None,
                           mass_floor: Optional[float] = DEFAULT_MASS_FLOOR) -> EnvEntropies:
    """Sum over environments of Q(e_k) H_V(Y|X, e_k) and Q(e_k) H_V(Y|e_k).

    An environment whose total weight is below ``mass_floor * N`` (or exactly
    zero when the floor is disabled with None/0) is skipped: it contributes
    nothing and its index is listed in ``skipped``.
    """
    W = validate_assignment(W, data.n)
    opts = opts or converged_options(spec)
    n = data.n
    X, y = data.features, data.targets
    masses = W.sum(axis=0)
    floor = (mass_floor or 0.0) * n
    cond = marg = 0.0
    params, skipped = [], []
    for k in range(W.shape[1]):
        w = W[:, k]
        if masses[k] <= 0 or masses[k] < floor:
            params.append(None)
            skipped.append(k)
            continue
        p = fit_arrays(spec, X, y, w, opts)
        params.append(p)
        cond += float(w @ loss_vector(spec, p.theta, X, y)) / n
        marg += _env_marginal_term(spec, y, w, n)
    return EnvEntropies(cond, marg, params, masses / n, skipped)


@dataclass
class HeterogeneityReport:
    marginal_entropy: float
    conditional_entropy: float
    env_marginal_entropy: float
    env_conditional_entropy: float
    v_information: float
    env_v_information: float
    heterogeneity: float
    env_masses: np.ndarray
    per_env_params: list
    pooled_params: ModelParams
    spec: FamilySpec
    K: int
    skipped_envs: list = field(default_factory=list)

    @property
    def constant_free(self) -> dict:
        """Entropies with the additive ln(sigma) + ln(2 pi)/2 removed."""
        c = self.spec.constant
        kept = float(np.sum(np.delete(self.env_masses, self.skipped_envs)))
        return {
            "marginal_entropy": self.marginal_entropy - c,
            "conditional_entropy": self.conditional_entropy - c,
            "env_marginal_entropy": self.env_marginal_entropy - kept * c,
            "env_conditional_entropy": self.env_conditional_entropy - kept * c,
        }

    def to_json(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "K": self.K,
            "marginal_entropy": self.marginal_entropy,
            "conditional_entropy": self.conditional_entropy,
            "env_marginal_entropy": self.env_marginal_entropy,
            "env_conditional_entropy": self.env_conditional_entropy,
            "v_information": self.v_information,
            "env_v_information": self.env_v_information,
            "heterogeneity": self.heterogeneity,
            "env_masses": [float(m) for m in self.env_masses],
            "skipped_envs": list(self.skipped_envs),
            "constant_free": self.constant_free,
            "per_env_params": [None if p is None else p.theta.tolist() for p in self.per_env_params],
            "pooled_params": self.pooled_params.theta.tolist(),
        }


def evaluate_heterogeneity(spec: FamilySpec, data: Dataset, W, opts: Optional[FitOptions] = None,
                           mass_floor: Optional[float] = DEFAULT_MASS_FLOOR,
                           pooled: Optional[tuple] = None) -> HeterogeneityReport:
    """Empirical predictive heterogeneity attained by W (no supremum).

    ``pooled`` may carry a precomputed (conditional entropy, params) pair to
    avoid refitting the pooled model in loops.
    """
    opts = opts or converged_options(spec)
    W = validate_assignment(W, data.n)
    marg = empirical_marginal_entropy(spec, data)
    cond, pooled_params = pooled if pooled is not None else empirical_conditional_entropy(spec, data, opts)
    env = weighted_env_entropies(spec, data, W, opts, mass_floor)
    vi = marg - cond
    evi = env.env_marginal - env.env_conditional
    het = evi - vi
    if not math.isfinite(het):
        raise FloatingPointError("non-finite heterogeneity")
    return HeterogeneityReport(marg, cond, env.env_marginal, env.env_conditional, vi, evi, het,
                               env.env_masses, env.per_env_params, pooled_params, spec, W.shape[1],
                               env.skipped)
