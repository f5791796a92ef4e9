"""Counterfactual search by enumerating convex subproblems.

For a target class, the classifier contributes one or more
linear-inequality regions (softmax margins or tree leaves) and, when a
density threshold is requested, the target-class mixture contributes one
convex quadratic constraint per component.  Every (component, region)
pair is a convex program; the engine solves them all and keeps the
feasible solution closest to the query point.  When a PCA map is
attached, models and density estimators live in the latent space and all
constraints are pulled back to the original space, so the counterfactual
itself is always expressed in original coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import AffineMap, LabeledDataset, pca_compose_constraints
from .density import (ClassGmm, ClassKde, DensityThreshold, approx_log_density,
                      component_constraint, kde_log_density)
from .models import DEFAULT_MARGIN, target_regions
from .regions import FeasibleRegion
from .serialize import array_to_list
from .solver import ConvexProgram, ObjectiveSpec, Solution, SolverSettings, solve

__all__ = [
    "CounterfactualRequest",
    "CounterfactualResult",
    "PlausibilityAudit",
    "IndependenceReport",
    "counterfactual_baseline",
    "counterfactual_plausible",
    "audit",
    "check_local_sufficiency",
    "model_independence_experiment",
]


@dataclass(frozen=True)
class CounterfactualRequest:
    """What to explain: move ``x`` into class ``target``.

    ``delta`` absent means the unconstrained baseline problem; present,
    it activates the per-component density constraints.  ``pca`` declares
    that models/densities were fitted in the map's latent space.
    """

    x: np.ndarray
    target: int
    objective: ObjectiveSpec
    delta: DensityThreshold | None = None
    pca: AffineMap | None = None

    def __post_init__(self):
        x = np.array(self.x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise ValueError("query point must be finite")
        if self.objective.kind not in ("l1", "mahalanobis"):
            raise ValueError("request objective must be l1 or mahalanobis")
        if not np.array_equal(self.objective.anchor, x):
            raise ValueError("objective anchor must equal the query point")
        if self.pca is not None and self.pca.input_dim != x.size:
            raise ValueError("PCA map does not match the query dimension")
        x.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "target", int(self.target))

    @classmethod
    def l1(cls, x, target, weights=None, delta=None, pca=None):
        return cls(np.asarray(x, dtype=float), target,
                   ObjectiveSpec.l1(x, weights), delta, pca)

    @property
    def model_dim(self) -> int:
        return self.pca.latent_dim if self.pca is not None else self.x.size


@dataclass(frozen=True)
class CounterfactualResult:
    """Outcome of one request; ``point`` is in original coordinates."""

    status: str
    point: np.ndarray | None
    objective_value: float | None
    target: int
    component_index: int | None
    region_provenance: str | None
    approx_log_density: float | None = None
    kde_log_density: float | None = None
    solver_iterations: int = 0
    subproblems_solved: int = 0
    subproblems_infeasible: int = 0

    @property
    def found(self) -> bool:
        return self.status == "found"

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "point": None if self.point is None else array_to_list(self.point),
            "objective_value": self.objective_value,
            "target": self.target,
            "component_index": self.component_index,
            "region_provenance": self.region_provenance,
            "approx_log_density": self.approx_log_density,
            "kde_log_density": self.kde_log_density,
            "subproblems_solved": self.subproblems_solved,
            "subproblems_infeasible": self.subproblems_infeasible,
        }


def _compose(req: CounterfactualRequest, region: FeasibleRegion) -> FeasibleRegion:
    if req.pca is None:
        return region
    return pca_compose_constraints(req.pca, region)


def _model_space(req: CounterfactualRequest, x: np.ndarray) -> np.ndarray:
    return req.pca.transform(x) if req.pca is not None else x


def _solve_subproblem(req: CounterfactualRequest, feasible: FeasibleRegion,
                      settings: SolverSettings) -> Solution:
    # The query point itself may already satisfy everything; the objective
    # is zero there, so no solve is needed.
    if feasible.max_violation(req.x) <= 0.0:
        return Solution("optimal", req.x.copy(), 0.0, 0.0, 0)
    program = ConvexProgram(req.objective, feasible.linear.A, feasible.linear.b,
                            feasible.quadratic)
    return solve(program, settings)


def _predicts_target(model, req: CounterfactualRequest, x: np.ndarray) -> bool:
    z = _model_space(req, x)
    return int(model.predict(np.atleast_2d(z))[0]) == req.target


def _finish(req, model, gmm, kde, best, stats) -> CounterfactualResult:
    solved, infeasible, iterations = stats
    if best is None:
        return CounterfactualResult("infeasible", None, None, req.target, None,
                                    None, subproblems_solved=solved,
                                    subproblems_infeasible=infeasible,
                                    solver_iterations=iterations)
    value, component, provenance, sol = best
    x_cf = sol.point
    z_cf = _model_space(req, x_cf)
    approx = kde_val = None
    if gmm is not None:
        approx = approx_log_density(gmm, z_cf)[0]
    if kde is not None:
        kde_val = kde_log_density(kde, z_cf)
    return CounterfactualResult("found", x_cf, value, req.target, component,
                                provenance, approx, kde_val,
                                solver_iterations=iterations,
                                subproblems_solved=solved,
                                subproblems_infeasible=infeasible)


def counterfactual_baseline(req: CounterfactualRequest, model,
                            kde: ClassKde | None = None,
                            gmm: ClassGmm | None = None,
                            margin: float = DEFAULT_MARGIN,
                            settings: SolverSettings | None = None
                            ) -> CounterfactualResult:
    """Closest point the model maps to the target class (no density floor).

    Trees contribute one program per target leaf; the cheapest optimal
    one wins (ties to the lowest leaf id).
    """
    settings = settings or SolverSettings()
    regions = target_regions(model, req.target, margin)
    best = None
    solved = infeasible = iterations = 0
    for region in regions:
        feas = _compose(req, FeasibleRegion(region))
        sol = _solve_subproblem(req, feas, settings)
        solved += 1
        iterations += sol.iterations
        if sol.status != "optimal" or not _predicts_target(model, req, sol.point):
            infeasible += 1
            continue
        if best is None or sol.objective_value < best[0]:
            best = (sol.objective_value, None, region.provenance, sol)
    return _finish(req, model, gmm, kde, best, (solved, infeasible, iterations))


def counterfactual_plausible(req: CounterfactualRequest, model, gmm: ClassGmm,
                             kde: ClassKde | None = None,
                             margin: float = DEFAULT_MARGIN,
                             settings: SolverSettings | None = None
                             ) -> CounterfactualResult:
    """Closest target-class point whose component density clears ``delta``.

    Enumerates every (mixture component, classifier region) pair as its
    own convex program; ties break lexicographically on (component,
    region) order.  Infeasible only if every pair is infeasible.
    """
    if req.delta is None:
        raise ValueError("request has no density threshold; use the baseline")
    settings = settings or SolverSettings()
    regions = target_regions(model, req.target, margin)
    delta_min = req.delta.delta * (1.0 - 1e-6)
    best = None
    solved = infeasible = iterations = 0
    for j, comp in enumerate(gmm.components):
        quad = component_constraint(comp, req.delta)
        for region in regions:
            feas = _compose(req, FeasibleRegion(region, quad))
            sol = _solve_subproblem(req, feas, settings)
            solved += 1
            iterations += sol.iterations
            if sol.status != "optimal":
                infeasible += 1
                continue
            z = _model_space(req, sol.point)
            if not _predicts_target(model, req, sol.point) or \
                    math.exp(comp.log_density(z)) < delta_min:
                infeasible += 1
                continue
            if best is None or sol.objective_value < best[0]:
                best = (sol.objective_value, j, region.provenance, sol)
    return _finish(req, model, gmm, kde, best, (solved, infeasible, iterations))


# ---------------------------------------------------------------------------
# Audit
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PlausibilityAudit:
    """Independent re-check of a found counterfactual."""

    prediction: int
    prediction_ok: bool
    approx_log_density: float
    component_log_density: float | None
    kde_log_density: float | None
    objective_value: float
    objective_ok: bool
    density_ok: bool | None
    passed: bool

    def to_dict(self) -> dict:
        return {
            "prediction": self.prediction,
            "prediction_ok": self.prediction_ok,
            "approx_log_density": self.approx_log_density,
            "component_log_density": self.component_log_density,
            "kde_log_density": self.kde_log_density,
            "objective_value": self.objective_value,
            "objective_ok": self.objective_ok,
            "density_ok": self.density_ok,
            "passed": self.passed,
        }


def audit(result: CounterfactualResult, req: CounterfactualRequest, model,
          gmm: ClassGmm, kde: ClassKde | None = None,
          delta: DensityThreshold | None = None) -> PlausibilityAudit:
    """Recompute prediction, densities and distance for a found result.

    ``delta`` defaults to the request's threshold; passing a different
    one re-audits against that floor instead.
    """
    if not result.found:
        raise ValueError("can only audit a found counterfactual")
    z = _model_space(req, result.point)
    prediction = int(model.predict(np.atleast_2d(z))[0])
    prediction_ok = prediction == req.target
    approx_val, _ = approx_log_density(gmm, z)
    comp_val = None
    if result.component_index is not None:
        comp_val = gmm.components[result.component_index].log_density(z)
    kde_val = kde_log_density(kde, z) if kde is not None else None
    objective_value = req.objective.value(result.point)
    objective_ok = abs(objective_value - result.objective_value) <= \
        1e-6 * max(1.0, abs(objective_value))
    delta = delta if delta is not None else req.delta
    density_ok = None
    if delta is not None:
        achieved = comp_val if comp_val is not None else approx_val
        density_ok = bool(math.exp(achieved) >= delta.delta * (1.0 - 1e-6))
    passed = prediction_ok and objective_ok and density_ok is not False
    return PlausibilityAudit(prediction, prediction_ok, approx_val, comp_val,
                             kde_val, objective_value, objective_ok,
                             density_ok, passed)


# ---------------------------------------------------------------------------
# Theory diagnostics
# ---------------------------------------------------------------------------

def check_local_sufficiency(model, x, y: int, ds: LabeledDataset,
                            neighbors: int, weights=None,
                            pca: AffineMap | None = None) -> bool:
    """Heuristic local test for model-independence of counterfactuals.

    True iff the model classifies ``x`` as ``y`` and its ``neighbors``
    nearest training samples (weighted-L1 distance in original space,
    all classes included) are each predicted as their own ground-truth
    label.
    """
    if neighbors < 1:
        raise ValueError("neighbors must be >= 1")
    x = np.asarray(x, dtype=float)
    z = pca.transform(x) if pca is not None else x
    if int(model.predict(np.atleast_2d(z))[0]) != y:
        return False
    w = np.ones(x.size) if weights is None else np.asarray(weights, dtype=float)
    dists = np.abs(ds.features - x) @ w
    nearest = np.argsort(dists, kind="stable")[:neighbors]
    pts = ds.features[nearest]
    if pca is not None:
        pts = pca.transform(pts)
    return bool(np.all(model.predict(pts) == ds.labels[nearest]))


@dataclass(frozen=True)
class IndependenceReport:
    """Objective differences of plausible counterfactuals across two models."""

    records: tuple[dict, ...]
    n_compared: int
    median_abs_difference: float | None
    median_relative_difference: float | None

    def to_dict(self) -> dict:
        return {
            "records": list(self.records),
            "n_compared": self.n_compared,
            "median_abs_difference": self.median_abs_difference,
            "median_relative_difference": self.median_relative_difference,
        }


def model_independence_experiment(train_ds: LabeledDataset, model_a, model_b,
                                  gmms: dict[int, ClassGmm],
                                  thresholds: dict[int, DensityThreshold],
                                  X_samples, y_samples, targets=None,
                                  neighbors: int = 5, weights=None,
                                  pca: AffineMap | None = None, seed: int = 0,
                                  margin: float = DEFAULT_MARGIN
                                  ) -> IndependenceReport:
    """Compare plausible counterfactuals of two models sample by sample.

    ``train_ds`` supplies the neighbourhood for the sufficiency check;
    the samples themselves are passed explicitly.  Only samples where
    both models pass the local-sufficiency check are compared.  The
    report carries the distribution of objective-value differences;
    interpreting it (e.g. "differences are small, so the classifiers
    agree locally") is up to the caller.
    """
    X_samples = np.atleast_2d(np.asarray(X_samples, dtype=float))
    y_samples = np.asarray(y_samples, dtype=int)
    rng = np.random.default_rng(seed)
    records = []
    abs_diffs, rel_diffs = [], []
    for pos in range(X_samples.shape[0]):
        x = X_samples[pos]
        y = int(y_samples[pos])
        if targets is not None:
            target = int(targets[pos])
        else:
            others = [c for c in range(train_ds.n_classes) if c != y]
            target = int(rng.choice(others))
        record = {"index": pos, "label": y, "target": target}
        suff_a = check_local_sufficiency(model_a, x, y, train_ds, neighbors,
                                         weights, pca)
        suff_b = check_local_sufficiency(model_b, x, y, train_ds, neighbors,
                                         weights, pca)
        record["sufficient_a"] = suff_a
        record["sufficient_b"] = suff_b
        if suff_a and suff_b:
            req = CounterfactualRequest.l1(x, target, weights,
                                           thresholds[target], pca)
            res_a = counterfactual_plausible(req, model_a, gmms[target],
                                             margin=margin)
            res_b = counterfactual_plausible(req, model_b, gmms[target],
                                             margin=margin)
            record["objective_a"] = res_a.objective_value
            record["objective_b"] = res_b.objective_value
            if res_a.found and res_b.found:
                d = abs(res_a.objective_value - res_b.objective_value)
                scale = max(abs(res_a.objective_value),
                            abs(res_b.objective_value), 1e-12)
                record["abs_difference"] = d
                record["relative_difference"] = d / scale
                abs_diffs.append(d)
                rel_diffs.append(d / scale)
        records.append(record)
    return IndependenceReport(
        tuple(records), len(abs_diffs),
        float(np.median(abs_diffs)) if abs_diffs else None,
        float(np.median(rel_diffs)) if rel_diffs else None)
