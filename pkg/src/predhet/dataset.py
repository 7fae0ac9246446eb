"""Data model, CSV ingestion, splitting and the synthetic generators."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class DataError(ValueError):
    """Raised for malformed datasets, CSV files and generator configs."""


@dataclass(frozen=True)
class Task:
    kind: str  # "regression" | "classification"
    classes: Optional[int] = None

    @classmethod
    def regression(cls) -> "Task":
        return cls("regression")

    @classmethod
    def classification(cls, classes: int) -> "Task":
        return cls("classification", int(classes))

    @property
    def is_classification(self) -> bool:
        return self.kind == "classification"

    def __post_init__(self):
        if self.kind not in ("regression", "classification"):
            raise DataError(f"unknown task kind {self.kind!r}")
        if self.kind == "classification" and (self.classes is None or self.classes < 2):
            raise DataError("classification task needs classes >= 2")


@dataclass
class Dataset:
    features: np.ndarray
    targets: np.ndarray
    task: Task
    true_envs: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise DataError(f"features must be an N x d matrix with N, d >= 1, got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise DataError("features contain non-finite entries")
        y = np.asarray(self.targets)
        if y.shape != (X.shape[0],):
            raise DataError(f"targets must have length {X.shape[0]}, got shape {y.shape}")
        if self.task.is_classification:
            yf = np.asarray(y, dtype=float)
            if not np.all(np.isfinite(yf)) or np.any(yf != np.round(yf)):
                raise DataError("classification targets must be integers")
            y = yf.astype(np.int64)
            if y.min() < 0 or y.max() >= self.task.classes:
                raise DataError(f"classification targets must lie in 0..{self.task.classes - 1}")
        else:
            y = np.asarray(y, dtype=float)
            if not np.all(np.isfinite(y)):
                raise DataError("targets contain non-finite entries")
        self.features = X
        self.targets = y
        if self.true_envs is not None:
            e = np.asarray(self.true_envs)
            if e.shape != (X.shape[0],):
                raise DataError("true_envs must have one label per row")
            self.true_envs = e.astype(np.int64)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        envs = None if self.true_envs is None else self.true_envs[idx]
        return Dataset(self.features[idx], self.targets[idx], self.task, envs, dict(self.meta))


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def load_csv(path, task: Task) -> Dataset:
    """Read ``f0,...,f{d-1},y[,env]`` into a Dataset, rows in file order."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if "y" not in header:
            raise DataError(f"{path}: missing 'y' column")
        y_col = header.index("y")
        env_col = header.index("env") if "env" in header else None
        feat_cols = [i for i, h in enumerate(header) if i not in (y_col, env_col)]
        if not feat_cols:
            raise DataError(f"{path}: no feature columns")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {lineno} has {len(row)} cells, expected {len(header)}")
            values = []
            for i, cell in enumerate(row):
                try:
                    values.append(float(cell))
                except ValueError:
                    raise DataError(
                        f"{path}: non-numeric value {cell!r} at row {lineno}, column {header[i]!r}"
                    ) from None
            rows.append(values)
    if not rows:
        raise DataError(f"{path}: no data rows")
    arr = np.array(rows, dtype=float)
    y = arr[:, y_col]
    if task.is_classification:
        bad = np.flatnonzero((y < 0) | (y != np.round(y)))
        if bad.size:
            raise DataError(
                f"{path}: classification target {y[bad[0]]!r} at row {bad[0] + 2} is not a nonnegative integer"
            )
    envs = None
    if env_col is not None:
        e = arr[:, env_col]
        if np.any(e != np.round(e)):
            raise DataError(f"{path}: 'env' column must hold integers")
        envs = e.astype(np.int64)
    return Dataset(arr[:, feat_cols], y, task, envs)


def save_csv(data: Dataset, path) -> None:
    """Write a dataset with round-trip float precision and ``\\n`` newlines."""
    d = data.d
    header = [f"f{j}" for j in range(d)] + ["y"]
    has_env = data.true_envs is not None
    if has_env:
        header.append("env")
    lines = [",".join(header)]
    for i in range(data.n):
        cells = [repr(float(v)) for v in data.features[i]]
        if data.task.is_classification:
            cells.append(str(int(data.targets[i])))
        else:
            cells.append(repr(float(data.targets[i])))
        if has_env:
            cells.append(str(int(data.true_envs[i])))
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


def split(data: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded shuffle split; the test part has ``floor(N * test_fraction)`` rows."""
    if not 0.0 < test_fraction < 1.0:
        raise DataError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    n_test = int(math.floor(data.n * test_fraction))
    if n_test == 0 or n_test == data.n:
        raise DataError(f"split of N={data.n} at fraction {test_fraction} leaves an empty part")
    perm = np.random.default_rng(seed).permutation(data.n)
    return data.subset(np.sort(perm[n_test:])), data.subset(np.sort(perm[:n_test]))


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------

VARIANTS = ("homogeneous", "selection-bias", "hidden-variable", "spurious-label")


@dataclass(frozen=True)
class GeneratorConfig:
    """Parameters of one synthetic generator.

    Only the fields of the chosen ``variant`` are read. ``theta_s`` is drawn
    from N(0, I5) when left as None so that a seed fully determines the data;
    pass it explicitly to build test sets sharing the training mechanism.
    """

    variant: str
    n: int = 10000
    # homogeneous
    beta: float = 1.0
    sigma: float = 0.5
    # selection-bias
    fractions: tuple = (0.8, 0.2)
    r: tuple = (1.9, -1.9)
    noise_var: float = 0.5
    # hidden-variable
    counts: tuple = (8000, 1000, 1000, 1000)
    theta_v: tuple = (3.0, -1.0, -2.0, -3.0)
    v_noise_var: float = 0.3
    # spurious-label
    flip: float = 0.2
    agreement: float = 0.85
    d_core: int = 10
    core_shift: float = 1.0
    theta_s: Optional[tuple] = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise DataError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.n < 1:
            raise DataError("n must be >= 1")
        if self.variant == "selection-bias":
            if len(self.fractions) != len(self.r) or not self.r:
                raise DataError("fractions and r must have the same nonzero length")
            if any(f < 0 for f in self.fractions) or not math.isclose(sum(self.fractions), 1.0, abs_tol=1e-9):
                raise DataError("fractions must be nonnegative and sum to 1")
            if any(abs(r) <= 1 for r in self.r):
                raise DataError("every |r| must exceed 1 (Laplace scale 1/(5 ln|r|))")
            if self.n < len(self.r):
                raise DataError("n must be at least the number of groups")
        elif self.variant == "hidden-variable":
            if len(self.counts) != len(self.theta_v) or not self.counts:
                raise DataError("counts and theta_v must have the same nonzero length")
            if sum(self.counts) != self.n:
                raise DataError(f"counts sum to {sum(self.counts)}, expected n={self.n}")
            if any(c < 1 for c in self.counts):
                raise DataError("every group count must be >= 1")
        elif self.variant == "spurious-label":
            if not 0.0 <= self.flip <= 1.0:
                raise DataError(f"flip must lie in [0, 1], got {self.flip}")
            if not 0.0 <= self.agreement <= 1.0:
                raise DataError(f"agreement must lie in [0, 1], got {self.agreement}")
            if self.d_core < 1:
                raise DataError("d_core must be >= 1")
        elif self.variant == "homogeneous":
            if not self.sigma > 0:
                raise DataError(f"sigma must be > 0, got {self.sigma}")
        if self.theta_s is not None and len(self.theta_s) != 5:
            raise DataError("theta_s must have 5 entries")

    def with_(self, **kw) -> "GeneratorConfig":
        return replace(self, **kw)


def group_sizes(n: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of n rows to groups."""
    raw = np.asarray(fractions, dtype=float) * n
    sizes = np.floor(raw).astype(int)
    rem = n - sizes.sum()
    order = np.argsort(-(raw - sizes), kind="stable")
    sizes[order[:rem]] += 1
    return sizes.tolist()


def _theta_s(cfg: GeneratorConfig, rng) -> np.ndarray:
    # drawn first so it does not depend on n or group layout
    drawn = rng.standard_normal(5)
    return np.asarray(cfg.theta_s, dtype=float) if cfg.theta_s is not None else drawn


def generate_selection_bias(cfg: GeneratorConfig, seed: int) -> Dataset:
    if cfg.variant != "selection-bias":
        raise DataError("config variant must be 'selection-bias'")
    rng = np.random.default_rng(seed)
    theta_s = _theta_s(cfg, rng)
    sizes = group_sizes(cfg.n, cfg.fractions)
    if any(s == 0 for s in sizes):
        raise DataError(f"group sizes {sizes} contain an empty group")
    envs = np.repeat(np.arange(len(sizes)), sizes)
    n = cfg.n
    S = rng.normal(0.0, math.sqrt(2.0), size=(n, 5))
    T = rng.normal(0.0, math.sqrt(2.0), size=(n, 4))
    y = S @ theta_s + S[:, 0] * S[:, 1] * S[:, 2] + rng.normal(0.0, math.sqrt(cfg.noise_var), size=n)
    r = np.asarray(cfg.r, dtype=float)[envs]
    V = rng.laplace(np.sign(r) * y, 1.0 / (5.0 * np.log(np.abs(r))))
    X = np.column_stack([S, T, V])
    meta = {"variant": cfg.variant, "seed": seed, "theta_s": theta_s.tolist(),
            "group_sizes": sizes, "r": list(cfg.r), "noise_var": cfg.noise_var}
    return Dataset(X, y, Task.regression(), envs, meta)


def generate_hidden_variable(cfg: GeneratorConfig, seed: int) -> Dataset:
    if cfg.variant != "hidden-variable":
        raise DataError("config variant must be 'hidden-variable'")
    rng = np.random.default_rng(seed)
    theta_s = _theta_s(cfg, rng)
    envs = np.repeat(np.arange(len(cfg.counts)), cfg.counts)
    n = cfg.n
    S = rng.normal(2.0, math.sqrt(2.0), size=(n, 5))
    T = rng.normal(0.0, math.sqrt(2.0), size=(n, 4))
    y = S @ theta_s + S[:, 0] * S[:, 1] * S[:, 2] + rng.normal(0.0, math.sqrt(cfg.noise_var), size=n)
    tv = np.asarray(cfg.theta_v, dtype=float)[envs]
    V = tv * y + rng.normal(0.0, math.sqrt(cfg.v_noise_var), size=n)
    X = np.column_stack([S, T, V])
    meta = {"variant": cfg.variant, "seed": seed, "theta_s": theta_s.tolist(),
            "counts": list(cfg.counts), "theta_v": list(cfg.theta_v)}
    return Dataset(X, y, Task.regression(), envs, meta)


def generate_spurious_label(cfg: GeneratorConfig, seed: int) -> Dataset:
    """Tabular stand-in for colored MNIST.

    Core features are class-conditional Gaussians around ``+-core_shift`` on
    every coordinate, driven by the clean label. The target is the noisy label
    and the last feature V is +1/-1 according to the sign rule applied to the
    noisy label encoded as -1/+1. ``true_envs`` is 0 where V agrees with the
    noisy label and 1 where it is inverted.
    """
    if cfg.variant != "spurious-label":
        raise DataError("config variant must be 'spurious-label'")
    rng = np.random.default_rng(seed)
    n = cfg.n
    clean = rng.integers(0, 2, size=n)
    core = (2 * clean - 1)[:, None] * cfg.core_shift + rng.standard_normal((n, cfg.d_core))
    noisy = np.where(rng.random(n) < cfg.flip, 1 - clean, clean)
    agree = rng.random(n) < cfg.agreement
    V = np.where(agree, 1.0, -1.0) * (2 * noisy - 1)
    X = np.column_stack([core, V])
    meta = {"variant": cfg.variant, "seed": seed, "flip": cfg.flip,
            "agreement": cfg.agreement, "d_core": cfg.d_core}
    return Dataset(X, noisy, Task.classification(2), (~agree).astype(np.int64), meta)


def generate_homogeneous(cfg: GeneratorConfig, seed: int) -> Dataset:
    if cfg.variant != "homogeneous":
        raise DataError("config variant must be 'homogeneous'")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(cfg.n)
    y = cfg.beta * x + cfg.sigma * rng.standard_normal(cfg.n)
    meta = {"variant": cfg.variant, "seed": seed, "beta": cfg.beta, "sigma": cfg.sigma}
    return Dataset(x[:, None], y, Task.regression(), None, meta)


GENERATORS = {
    "homogeneous": generate_homogeneous,
    "selection-bias": generate_selection_bias,
    "hidden-variable": generate_hidden_variable,
    "spurious-label": generate_spurious_label,
}


def generate(cfg: GeneratorConfig, seed: int) -> Dataset:
    return GENERATORS[cfg.variant](cfg, seed)
