"""Class-conditional density estimation and convex density constraints.

A fitted Gaussian mixture is turned into one convex quadratic constraint
per component: requiring the weighted component density to stay above a
threshold delta is equivalent to

    (x - mu_j)^T Sigma_j^{-1} (x - mu_j) + c_j <= delta'

with c_j = -2 log pi_j + d log(2 pi) - log det(Sigma_j^{-1}) and
delta' = -2 log delta.  The component-wise maximum of the weighted
densities is a lower bound on the full mixture density, which is what
makes the per-component enumeration sound.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky, solve_triangular
from scipy.special import logsumexp

from .regions import QuadraticInequality
from .serialize import array_to_list

__all__ = [
    "GaussianComponent",
    "ClassGmm",
    "ClassKde",
    "DensityThreshold",
    "EmTrace",
    "fit_gmm",
    "gmm_log_density",
    "approx_log_density",
    "component_constraint",
    "fit_kde",
    "kde_log_density",
    "median_threshold",
    "quantile_threshold",
]

LOG_2PI = math.log(2.0 * math.pi)


def _read_only(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class GaussianComponent:
    """One weighted Gaussian with cached inverse and constraint constant."""

    weight: float
    mean: np.ndarray
    covariance: np.ndarray
    precision: np.ndarray
    log_det_precision: float
    constraint_constant: float

    def __post_init__(self):
        mean = _read_only(self.mean)
        cov = _read_only(self.covariance)
        prec = _read_only(self.precision)
        d = mean.size
        if not 0.0 < self.weight <= 1.0:
            raise ValueError(f"component weight must be in (0, 1], got {self.weight}")
        if cov.shape != (d, d) or prec.shape != (d, d):
            raise ValueError("covariance/precision shape mismatch")
        if not np.allclose(cov, cov.T, atol=1e-9 * max(1.0, np.abs(cov).max())):
            raise ValueError("covariance must be symmetric")
        if not np.allclose(prec @ cov, np.eye(d), atol=1e-6):
            raise ValueError("precision is not the inverse of covariance")
        expected_c = (-2.0 * math.log(self.weight) + d * LOG_2PI
                      - self.log_det_precision)
        if abs(self.constraint_constant - expected_c) > 1e-9 * max(1.0, abs(expected_c)):
            raise ValueError("cached constraint constant is inconsistent")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "precision", prec)
        object.__setattr__(self, "weight", float(self.weight))

    @classmethod
    def from_moments(cls, weight: float, mean, covariance) -> "GaussianComponent":
        mean = np.asarray(mean, dtype=float)
        cov = np.asarray(covariance, dtype=float)
        cov = 0.5 * (cov + cov.T)
        d = mean.size
        L = cholesky(cov, lower=True)          # fails if not PD
        Linv = solve_triangular(L, np.eye(d), lower=True)
        precision = Linv.T @ Linv
        precision = 0.5 * (precision + precision.T)
        log_det_precision = -2.0 * float(np.sum(np.log(np.diag(L))))
        c = -2.0 * math.log(weight) + d * LOG_2PI - log_det_precision
        return cls(float(weight), mean, cov, precision, log_det_precision, c)

    @property
    def dim(self) -> int:
        return self.mean.size

    def log_density(self, x: np.ndarray) -> float:
        """log( weight * N(x | mean, covariance) )."""
        diff = np.asarray(x, dtype=float) - self.mean
        quad = float(diff @ self.precision @ diff)
        return (math.log(self.weight)
                - 0.5 * (self.dim * LOG_2PI - self.log_det_precision + quad))

    def to_dict(self) -> dict:
        return {
            "weight": self.weight,
            "mean": array_to_list(self.mean),
            "covariance": array_to_list(self.covariance),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianComponent":
        return cls.from_moments(d["weight"], np.array(d["mean"]),
                                np.array(d["covariance"]))


@dataclass(frozen=True)
class EmTrace:
    """Per-iteration log-likelihoods of the winning EM restart."""

    log_likelihoods: tuple[float, ...]
    restart_index: int
    degenerate: bool = False


@dataclass(frozen=True)
class ClassGmm:
    """Gaussian mixture for one class."""

    components: tuple[GaussianComponent, ...]
    class_id: int
    fit_trace: EmTrace | None = None

    def __post_init__(self):
        comps = tuple(self.components)
        if len(comps) < 1:
            raise ValueError("a mixture needs at least one component")
        total = sum(c.weight for c in comps)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"component weights sum to {total}, expected 1")
        dims = {c.dim for c in comps}
        if len(dims) != 1:
            raise ValueError("components have inconsistent dimensions")
        object.__setattr__(self, "components", comps)

    @property
    def n_components(self) -> int:
        return len(self.components)

    @property
    def dim(self) -> int:
        return self.components[0].dim

    def to_dict(self) -> dict:
        return {"class_id": self.class_id,
                "components": [c.to_dict() for c in self.components]}

    @classmethod
    def from_dict(cls, d: dict) -> "ClassGmm":
        return cls(tuple(GaussianComponent.from_dict(c) for c in d["components"]),
                   int(d["class_id"]))


@dataclass(frozen=True)
class ClassKde:
    """Gaussian-kernel density estimate over one class's training points."""

    samples: np.ndarray
    bandwidth: float
    weights: np.ndarray

    def __post_init__(self):
        samples = _read_only(np.atleast_2d(self.samples))
        weights = _read_only(self.weights)
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if weights.shape != (samples.shape[0],):
            raise ValueError("one weight per sample required")
        if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be positive and sum to 1")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "bandwidth", float(self.bandwidth))

    @classmethod
    def uniform(cls, samples, bandwidth: float) -> "ClassKde":
        samples = np.atleast_2d(np.asarray(samples, dtype=float))
        n = samples.shape[0]
        return cls(samples, bandwidth, np.full(n, 1.0 / n))

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def to_dict(self) -> dict:
        return {"samples": array_to_list(self.samples),
                "bandwidth": self.bandwidth,
                "weights": array_to_list(self.weights)}

    @classmethod
    def from_dict(cls, d: dict) -> "ClassKde":
        return cls(np.array(d["samples"]), float(d["bandwidth"]),
                   np.array(d["weights"]))


@dataclass(frozen=True)
class DensityThreshold:
    """Density floor delta with its cached transform delta' = -2 log delta."""

    delta: float
    delta_prime: float

    def __post_init__(self):
        if self.delta < 0 or not np.isfinite(self.delta_prime):
            raise ValueError("invalid density threshold")
        if self.delta > 0:
            expected = -2.0 * math.log(self.delta)
            if abs(self.delta_prime - expected) > 1e-12 * max(1.0, abs(expected)):
                raise ValueError("delta_prime cache is inconsistent with delta")

    @classmethod
    def from_delta(cls, delta: float) -> "DensityThreshold":
        if delta <= 0:
            raise ValueError("delta must be positive")
        return cls(float(delta), -2.0 * math.log(delta))

    @classmethod
    def from_delta_prime(cls, delta_prime: float) -> "DensityThreshold":
        """Build from the transformed threshold; delta may underflow to 0
        for very large delta_prime (the constraint side only uses delta_prime)."""
        return cls(math.exp(-0.5 * delta_prime), float(delta_prime))

    def to_dict(self) -> dict:
        return {"delta": self.delta, "delta_prime": self.delta_prime}

    @classmethod
    def from_dict(cls, d: dict) -> "DensityThreshold":
        return cls(float(d["delta"]), float(d["delta_prime"]))


# ---------------------------------------------------------------------------
# GMM fitting (EM)
# ---------------------------------------------------------------------------

def _log_component_matrix(means, covs, log_weights, X):
    """(n, m) matrix of log( pi_j N(x_i | mu_j, Sigma_j) )."""
    n, d = X.shape
    m = len(means)
    out = np.empty((n, m))
    for j in range(m):
        L = cholesky(covs[j], lower=True)
        diff = solve_triangular(L, (X - means[j]).T, lower=True)
        quad = np.sum(diff**2, axis=0)
        log_det = 2.0 * np.sum(np.log(np.diag(L)))
        out[:, j] = log_weights[j] - 0.5 * (d * LOG_2PI + log_det + quad)
    return out


def gmm_log_matrix(gmm: ClassGmm, X: np.ndarray) -> np.ndarray:
    """Per-point, per-component log weighted densities (n, m)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    means = [c.mean for c in gmm.components]
    covs = [c.covariance for c in gmm.components]
    logw = np.log([c.weight for c in gmm.components])
    return _log_component_matrix(means, covs, logw, X)


def _covariance_floor(X: np.ndarray) -> float:
    mean_var = float(np.mean(np.var(X, axis=0)))
    return 1e-6 * mean_var if mean_var > 0 else 1e-6


def _kmeanspp_means(X: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    means = [X[rng.integers(n)]]
    for _ in range(m - 1):
        d2 = np.min([np.sum((X - mu) ** 2, axis=1) for mu in means], axis=0)
        total = d2.sum()
        if total <= 0:
            means.append(X[rng.integers(n)])
        else:
            means.append(X[rng.choice(n, p=d2 / total)])
    return np.array(means)


def _em_run(X: np.ndarray, m: int, rng: np.random.Generator,
            max_iter: int, tol: float, lam: float):
    n, d = X.shape
    means = _kmeanspp_means(X, m, rng)
    global_cov = np.cov(X, rowvar=False, ddof=0).reshape(d, d) + lam * np.eye(d)
    covs = np.repeat(global_cov[np.newaxis], m, axis=0).copy()
    log_weights = np.full(m, -math.log(m))
    trace = []
    for _ in range(max_iter):
        logm = _log_component_matrix(means, covs, log_weights, X)
        row_lse = logsumexp(logm, axis=1)
        ll = float(row_lse.sum())
        trace.append(ll)
        if len(trace) > 1 and ll - trace[-2] < tol:
            break
        resp = np.exp(logm - row_lse[:, np.newaxis])
        nk = resp.sum(axis=0)
        nk = np.maximum(nk, 1e-300)
        log_weights = np.log(nk) - math.log(n)
        means = (resp.T @ X) / nk[:, np.newaxis]
        for j in range(m):
            diff = X - means[j]
            covs[j] = (resp[:, j][:, np.newaxis] * diff).T @ diff / nk[j]
            covs[j] = 0.5 * (covs[j] + covs[j].T) + lam * np.eye(d)
    else:
        # max_iter exhausted after an M-step: record the final likelihood.
        logm = _log_component_matrix(means, covs, log_weights, X)
        trace.append(float(logsumexp(logm, axis=1).sum()))
    weights = np.exp(log_weights)
    weights = weights / weights.sum()
    return means, covs, weights, trace


def fit_gmm(points: np.ndarray, m: int, seed: int = 0, max_iter: int = 200,
            tol: float = 1e-6, restarts: int = 5, class_id: int = 0) -> ClassGmm:
    """Fit an m-component full-covariance GMM by EM.

    Runs ``restarts`` seeded EM runs (k-means++ means, shared global
    covariance, uniform weights) and keeps the one with the best final
    log-likelihood; ties go to the lowest restart index.  Covariances
    get a ridge of 1e-6 times the mean feature variance at every M-step
    so the precision matrices in the convex constraints always exist.
    """
    X = np.atleast_2d(np.asarray(points, dtype=float))
    n, d = X.shape
    if m < 1:
        raise ValueError("m must be >= 1")
    if n < m:
        raise ValueError(f"need at least m={m} points, got {n}")
    lam = _covariance_floor(X)
    if np.all(X == X[0]):
        warnings.warn("all points identical; returning a single-point Gaussian "
                      "with floor covariance", stacklevel=2)
        comp = GaussianComponent.from_moments(1.0, X[0], lam * np.eye(d))
        return ClassGmm((comp,), class_id,
                        EmTrace((float(comp.log_density(X[0]) * n),), 0, True))
    seeds = np.random.SeedSequence(seed).spawn(restarts)
    best = None
    for r in range(restarts):
        rng = np.random.default_rng(seeds[r])
        result = _em_run(X, m, rng, max_iter, tol, lam)
        if best is None or result[3][-1] > best[1][3][-1]:
            best = (r, result)
    r, (means, covs, weights, trace) = best
    comps = tuple(GaussianComponent.from_moments(weights[j], means[j], covs[j])
                  for j in range(m))
    # Renormalise against accumulated rounding so the mixture invariant holds.
    total = sum(c.weight for c in comps)
    if abs(total - 1.0) > 1e-12:
        comps = tuple(GaussianComponent.from_moments(c.weight / total, c.mean,
                                                     c.covariance) for c in comps)
    return ClassGmm(comps, class_id, EmTrace(tuple(trace), r))


def gmm_log_density(gmm: ClassGmm, x: np.ndarray) -> float:
    """log of the full mixture density, via log-sum-exp."""
    logs = gmm_log_matrix(gmm, np.asarray(x, dtype=float)[np.newaxis])
    return float(logsumexp(logs[0]))


def approx_log_density(gmm: ClassGmm, x: np.ndarray) -> tuple[float, int]:
    """Component-wise maximum approximation: max_j log(pi_j N(x|mu_j, Sigma_j)).

    Returns the value and the achieving component index (ties break to
    the lowest index).  This is a lower bound on the mixture density and
    at most a factor of m below it.
    """
    logs = gmm_log_matrix(gmm, np.asarray(x, dtype=float)[np.newaxis])[0]
    j = int(np.argmax(logs))
    return float(logs[j]), j


def component_constraint(comp: GaussianComponent,
                         thr: DensityThreshold) -> QuadraticInequality:
    """Expand (x-mu)^T P (x-mu) + c_j <= delta' into x^T Q x + q^T x + r <= 0."""
    P = comp.precision
    mu = comp.mean
    q = -2.0 * (P @ mu)
    r = float(mu @ P @ mu + comp.constraint_constant - thr.delta_prime)
    return QuadraticInequality(P, q, r)


# ---------------------------------------------------------------------------
# Kernel density estimation
# ---------------------------------------------------------------------------

def _kde_log_density_many(train: np.ndarray, weights: np.ndarray, h: float,
                          X: np.ndarray) -> np.ndarray:
    d = train.shape[1]
    sq = np.sum((X[:, np.newaxis, :] - train[np.newaxis, :, :]) ** 2, axis=2)
    log_terms = (np.log(weights)[np.newaxis, :]
                 - 0.5 * d * math.log(2.0 * math.pi * h * h)
                 - sq / (2.0 * h * h))
    return logsumexp(log_terms, axis=1)


def kde_log_density(kde: ClassKde, x: np.ndarray) -> float:
    """Gaussian-kernel log density at a single point, via log-sum-exp."""
    x = np.asarray(x, dtype=float)
    return float(_kde_log_density_many(kde.samples, kde.weights, kde.bandwidth,
                                       x[np.newaxis])[0])


def kde_log_density_many(kde: ClassKde, X: np.ndarray) -> np.ndarray:
    return _kde_log_density_many(kde.samples, kde.weights, kde.bandwidth,
                                 np.atleast_2d(np.asarray(X, dtype=float)))


def fit_kde(points: np.ndarray, bandwidth_grid, folds: int = 5,
            seed: int = 0) -> ClassKde:
    """Pick the bandwidth by k-fold cross-validated held-out log-likelihood.

    The score for a bandwidth is the mean log density over all held-out
    points (pooled across folds); ties go to the smallest bandwidth.
    """
    X = np.atleast_2d(np.asarray(points, dtype=float))
    n = X.shape[0]
    grid = sorted(float(h) for h in bandwidth_grid)
    if not grid or grid[0] <= 0:
        raise ValueError("bandwidth grid must be nonempty and positive")
    if folds < 2:
        raise ValueError("folds must be >= 2")
    if n < folds:
        raise ValueError(f"need at least {folds} points, got {n}")
    if len(grid) == 1:
        return ClassKde.uniform(X, grid[0])
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    fold_of = np.empty(n, dtype=int)
    fold_of[order] = np.arange(n) % folds
    best_h, best_score = None, -np.inf
    for h in grid:
        scores = []
        for f in range(folds):
            train = X[fold_of != f]
            held = X[fold_of == f]
            w = np.full(train.shape[0], 1.0 / train.shape[0])
            scores.append(_kde_log_density_many(train, w, h, held))
        score = float(np.mean(np.concatenate(scores)))
        if score > best_score:
            best_h, best_score = h, score
    return ClassKde.uniform(X, best_h)


# ---------------------------------------------------------------------------
# Threshold selection
# ---------------------------------------------------------------------------

def quantile_threshold(gmm: ClassGmm, points: np.ndarray,
                       quantile: float = 0.5) -> DensityThreshold:
    """Threshold at a quantile of the approximated density of the points."""
    X = np.atleast_2d(np.asarray(points, dtype=float))
    if X.shape[0] < 1:
        raise ValueError("need at least one point")
    if not 0.0 < quantile < 1.0:
        raise ValueError("quantile must be in (0, 1)")
    approx = np.max(gmm_log_matrix(gmm, X), axis=1)
    delta = float(np.quantile(np.exp(approx), quantile))
    if delta <= 0:
        raise ValueError("density quantile underflowed to zero")
    return DensityThreshold.from_delta(delta)


def median_threshold(gmm: ClassGmm, points: np.ndarray) -> DensityThreshold:
    """Median approximated density of the training points of one class.

    With an even count this is the mean of the two middle values.
    """
    return quantile_threshold(gmm, points, 0.5)
