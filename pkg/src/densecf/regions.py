"""Feasible-set geometry shared across the package.

A feasible region is a conjunction of linear inequalities ``a^T x <= b``
plus at most one convex quadratic inequality ``x^T Q x + q^T x + r <= 0``
(Q positive semi-definite).  Classifier target sets produce the linear
part; density estimators produce the quadratic part.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["QuadraticInequality", "LinearRegion", "FeasibleRegion"]


def _frozen_array(x, dtype=float, ndim=None) -> np.ndarray:
    arr = np.array(x, dtype=dtype)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"expected {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class QuadraticInequality:
    """Convex quadratic constraint x^T Q x + q^T x + r <= 0.

    Q must be symmetric PSD; arrays are stored read-only so instances can
    be shared across threads.
    """

    Q: np.ndarray
    q: np.ndarray
    r: float

    def __post_init__(self):
        Q = _frozen_array(self.Q, ndim=2)
        q = _frozen_array(self.q, ndim=1)
        if Q.shape != (q.size, q.size):
            raise ValueError(f"Q shape {Q.shape} does not match q size {q.size}")
        if not np.allclose(Q, Q.T, atol=1e-10):
            raise ValueError("Q must be symmetric")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "r", float(self.r))

    @property
    def dim(self) -> int:
        return self.q.size

    def value(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=float)
        return float(x @ self.Q @ x + self.q @ x + self.r)

    def grad(self, x: np.ndarray) -> np.ndarray:
        return 2.0 * (self.Q @ np.asarray(x, dtype=float)) + self.q


@dataclass(frozen=True)
class LinearRegion:
    """Conjunction of linear inequalities A x <= b.

    ``A`` has one row per inequality; an empty ``A`` means the whole
    space.  ``provenance`` records where the region came from (a tree
    leaf id or the softmax margin construction).
    """

    A: np.ndarray
    b: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        A = _frozen_array(self.A, ndim=2)
        b = _frozen_array(self.b, ndim=1)
        if A.shape[0] != b.size:
            raise ValueError(f"A has {A.shape[0]} rows but b has {b.size} entries")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
            raise ValueError("region coefficients must be finite")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @classmethod
    def whole_space(cls, dim: int, provenance: str = "") -> "LinearRegion":
        return cls(np.zeros((0, dim)), np.zeros(0), provenance)

    @property
    def n_inequalities(self) -> int:
        return self.b.size

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    def violations(self, x: np.ndarray) -> np.ndarray:
        return self.A @ np.asarray(x, dtype=float) - self.b

    def contains(self, x: np.ndarray, tol: float = 0.0) -> bool:
        if self.n_inequalities == 0:
            return True
        return bool(np.all(self.violations(x) <= tol))


@dataclass(frozen=True)
class FeasibleRegion:
    """Linear region intersected with at most one convex quadratic."""

    linear: LinearRegion
    quadratic: QuadraticInequality | None = None

    def __post_init__(self):
        if self.quadratic is not None and self.quadratic.dim != self.linear.dim:
            raise ValueError("linear and quadratic parts have different dimensions")

    @property
    def dim(self) -> int:
        return self.linear.dim

    def max_violation(self, x: np.ndarray) -> float:
        """Largest constraint value at x; <= 0 means feasible."""
        worst = -np.inf
        if self.linear.n_inequalities:
            worst = float(np.max(self.linear.violations(x)))
        if self.quadratic is not None:
            worst = max(worst, self.quadratic.value(x))
        return worst

    def contains(self, x: np.ndarray, tol: float = 0.0) -> bool:
        return self.max_violation(x) <= tol
