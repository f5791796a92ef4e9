"""Counterfactual explanations constrained to high-density regions.

The package fits class-conditional Gaussian mixtures, lower-bounds each
mixture by its best single component, and turns the resulting density
floor into one convex quadratic constraint per component.  Closest
counterfactuals are then found by solving one small convex program per
(component, classifier-region) pair and keeping the best feasible
solution.
"""

from .data import (AffineMap, FoldPlan, IngestError, LabeledDataset, fit_pca,
                   jacobi_eigh, kfold_split, load_csv, pca_compose_constraints)
from .density import (ClassGmm, ClassKde, DensityThreshold, EmTrace,
                      GaussianComponent, approx_log_density,
                      component_constraint, fit_gmm, fit_kde, gmm_log_density,
                      kde_log_density, median_threshold, quantile_threshold)
from .engine import (CounterfactualRequest, CounterfactualResult,
                     IndependenceReport, PlausibilityAudit, audit,
                     check_local_sufficiency, counterfactual_baseline,
                     counterfactual_plausible, model_independence_experiment)
from .models import (DEFAULT_MARGIN, SoftmaxModel, TrainingDivergedError,
                     TreeModel, fit_softmax, fit_tree, softmax_target_region,
                     target_regions, tree_target_regions)
from .regions import FeasibleRegion, LinearRegion, QuadraticInequality
from .solver import (ConvexProgram, ObjectiveSpec, OracleResult, Solution,
                     SolverSettings, brute_force_oracle, check_kkt, l1_epigraph,
                     solve)

__version__ = "0.1.0"

__all__ = [
    "AffineMap", "FoldPlan", "IngestError", "LabeledDataset", "fit_pca",
    "jacobi_eigh", "kfold_split", "load_csv", "pca_compose_constraints",
    "ClassGmm", "ClassKde", "DensityThreshold", "EmTrace", "GaussianComponent",
    "approx_log_density", "component_constraint", "fit_gmm", "fit_kde",
    "gmm_log_density", "kde_log_density", "median_threshold",
    "quantile_threshold",
    "CounterfactualRequest", "CounterfactualResult", "IndependenceReport",
    "PlausibilityAudit", "audit", "check_local_sufficiency",
    "counterfactual_baseline", "counterfactual_plausible",
    "model_independence_experiment",
    "DEFAULT_MARGIN", "SoftmaxModel", "TrainingDivergedError", "TreeModel",
    "fit_softmax", "fit_tree", "softmax_target_region", "target_regions",
    "tree_target_regions",
    "FeasibleRegion", "LinearRegion", "QuadraticInequality",
    "ConvexProgram", "ObjectiveSpec", "OracleResult", "Solution",
    "SolverSettings", "brute_force_oracle", "check_kkt", "l1_epigraph", "solve",
]
