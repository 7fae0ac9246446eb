"""Predictive heterogeneity: measuring and discovering latent sub-populations."""

from .dataset import Dataset, DataError, GeneratorConfig, Task, generate, load_csv, save_csv, split
from .families import FamilySpec, FitError, FitOptions, ModelParams, fit_weighted
from .vinformation import HeterogeneityReport, evaluate_heterogeneity
from .im_optimizer import IMConfig, harden, hypergradient, project_simplex_rows, run_im, sweep_k

__version__ = "0.1.0"
