"""Interior-point solver for the one program shape this package needs:

    minimize   weighted-L1 or Mahalanobis distance to an anchor
    subject to linear inequalities A x <= b
               at most one convex quadratic  x^T Q x + q^T x + r <= 0

The weighted-L1 objective is lifted to a linear objective over epigraph
variables (never smoothed).  Solving is a two-phase primal-dual
interior-point method: phase 1 minimises the worst constraint violation
to find a strictly feasible point or certify infeasibility, phase 2
follows the central path with Newton steps, backtracking line search and
a surrogate-gap reduction factor of 10 per step.  Solutions carry dual
estimates and a KKT residual so tests can certify optimality
independently.  A brute-force grid oracle over a box is included for
low-dimensional cross-checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .regions import QuadraticInequality

__all__ = [
    "ObjectiveSpec",
    "ConvexProgram",
    "SolverSettings",
    "Solution",
    "OracleResult",
    "l1_epigraph",
    "solve",
    "check_kkt",
    "brute_force_oracle",
    "format_program",
]


@dataclass(frozen=True)
class ObjectiveSpec:
    """Objective over R^d: weighted L1, Mahalanobis, or plain linear.

    ``weights`` is the per-feature alpha vector for ``l1`` (positive),
    the PSD matrix Omega for ``mahalanobis``, or the cost vector for
    ``linear`` (the epigraph lift produces this kind; ``anchor`` is then
    only a placeholder).
    """

    kind: str
    anchor: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        anchor = np.array(self.anchor, dtype=float)
        weights = np.array(self.weights, dtype=float)
        if self.kind == "l1":
            if weights.shape != anchor.shape or np.any(weights <= 0):
                raise ValueError("l1 weights must be positive, one per feature")
        elif self.kind == "mahalanobis":
            d = anchor.size
            if weights.shape != (d, d):
                raise ValueError("mahalanobis weight must be a d x d matrix")
            if not np.allclose(weights, weights.T, atol=1e-10):
                raise ValueError("mahalanobis matrix must be symmetric")
            if np.linalg.eigvalsh(weights).min() < -1e-10:
                raise ValueError("mahalanobis matrix must be PSD")
        elif self.kind == "linear":
            if weights.ndim != 1:
                raise ValueError("linear objective needs a coefficient vector")
        else:
            raise ValueError(f"unknown objective kind {self.kind!r}")
        anchor.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "anchor", anchor)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def l1(cls, anchor, weights=None) -> "ObjectiveSpec":
        anchor = np.asarray(anchor, dtype=float)
        if weights is None:
            weights = np.ones_like(anchor)
        return cls("l1", anchor, np.asarray(weights, dtype=float))

    @classmethod
    def mahalanobis(cls, anchor, matrix=None) -> "ObjectiveSpec":
        anchor = np.asarray(anchor, dtype=float)
        if matrix is None:
            matrix = np.eye(anchor.size)
        return cls("mahalanobis", anchor, np.asarray(matrix, dtype=float))

    @classmethod
    def linear(cls, coefficients) -> "ObjectiveSpec":
        c = np.asarray(coefficients, dtype=float)
        return cls("linear", np.zeros_like(c), c)

    @property
    def dim(self) -> int:
        return self.anchor.size

    def value(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=float)
        if self.kind == "l1":
            return float(np.sum(self.weights * np.abs(x - self.anchor)))
        if self.kind == "mahalanobis":
            diff = x - self.anchor
            return float(diff @ self.weights @ diff)
        return float(self.weights @ x)


@dataclass(frozen=True)
class ConvexProgram:
    """Objective plus linear rows A x <= b and an optional quadratic."""

    objective: ObjectiveSpec
    A: np.ndarray
    b: np.ndarray
    quadratic: QuadraticInequality | None = None

    def __post_init__(self):
        A = np.array(self.A, dtype=float)
        b = np.array(self.b, dtype=float)
        d = self.objective.dim
        if A.size == 0:
            A = A.reshape(0, d)
        if A.ndim != 2 or A.shape[1] != d or b.shape != (A.shape[0],):
            raise ValueError("constraint shapes inconsistent with objective dimension")
        if self.quadratic is not None and self.quadratic.dim != d:
            raise ValueError("quadratic constraint dimension mismatch")
        A.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @property
    def dim(self) -> int:
        return self.objective.dim

    @property
    def n_constraints(self) -> int:
        return self.b.size + (1 if self.quadratic is not None else 0)

    def max_violation(self, x: np.ndarray) -> float:
        worst = -math.inf
        if self.b.size:
            worst = float(np.max(self.A @ x - self.b))
        if self.quadratic is not None:
            worst = max(worst, self.quadratic.value(x))
        return worst


@dataclass(frozen=True)
class SolverSettings:
    tol_gap: float = 1e-8        # surrogate duality gap lambda^T s
    tol_feas: float = 1e-7       # feasibility and phase-1 infeasibility threshold
    tol_dual: float = 1e-9       # stationarity residual target
    max_iter: int = 200          # total Newton iterations across both phases
    mu: float = 10.0             # surrogate-gap reduction factor per step
    reg: float = 1e-10           # Tikhonov term if the KKT system is singular


@dataclass(frozen=True)
class Solution:
    """Solver output.

    ``kkt_residual`` certifies the program that was actually solved (the
    epigraph lift, when the objective was weighted-L1); ``point`` is in
    the submitted program's variable space, except for explicitly linear
    objectives where it is the full variable vector.  For infeasible
    programs ``certificate`` holds the (positive) optimum of the phase-1
    slack.
    """

    status: str
    point: np.ndarray
    objective_value: float
    kkt_residual: float
    iterations: int
    lin_duals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    quad_dual: float | None = None
    certificate: float | None = None


@dataclass(frozen=True)
class OracleResult:
    point: np.ndarray | None
    value: float
    feasible: bool


# ---------------------------------------------------------------------------
# Epigraph lift
# ---------------------------------------------------------------------------

def l1_epigraph(program: ConvexProgram) -> ConvexProgram:
    """Lift a weighted-L1 program to a linear objective over (x, t).

    Adds auxiliary t in R^d with constraints +-(x_i - anchor_i) <= t_i
    and objective sum_i alpha_i t_i.  Original constraints come first in
    the lifted row order, then the 2d epigraph rows, so duals for the
    original rows keep their indices.
    """
    if program.objective.kind != "l1":
        raise ValueError("epigraph lift applies to weighted-L1 objectives only")
    d = program.dim
    anchor = program.objective.anchor
    alpha = program.objective.weights
    eye = np.eye(d)
    zeros = np.zeros((program.A.shape[0], d))
    A = np.vstack([
        np.hstack([program.A, zeros]),
        np.hstack([eye, -eye]),      # x_i - t_i <= anchor_i
        np.hstack([-eye, -eye]),     # -x_i - t_i <= -anchor_i
    ])
    b = np.concatenate([program.b, anchor, -anchor])
    quadratic = None
    if program.quadratic is not None:
        Q = np.zeros((2 * d, 2 * d))
        Q[:d, :d] = program.quadratic.Q
        q = np.concatenate([program.quadratic.q, np.zeros(d)])
        quadratic = QuadraticInequality(Q, q, program.quadratic.r)
    objective = ObjectiveSpec.linear(np.concatenate([np.zeros(d), alpha]))
    return ConvexProgram(objective, A, b, quadratic)


# ---------------------------------------------------------------------------
# Primal-dual core
# ---------------------------------------------------------------------------

class _PrimalDual:
    """Path-following primal-dual Newton iteration for one program.

    Constraints are g_i(z) <= 0: the linear rows followed by the optional
    quadratic as the last entry.  The primal iterate stays strictly
    feasible throughout; duals are explicit iterates, so the stationarity
    residual at termination does not suffer the 1/(t s) cancellation a
    pure barrier method runs into at tight gap tolerances.
    """

    def __init__(self, objective: ObjectiveSpec, A, b, quad, settings):
        self.A, self.b, self.quad = A, b, quad
        self.settings = settings
        self.m = b.size + (1 if quad is not None else 0)
        self.n = A.shape[1]
        kind = objective.kind
        if kind == "linear":
            self._grad0 = objective.weights
            self._hess0 = None
        elif kind == "mahalanobis":
            self._omega = objective.weights
            self._anchor = objective.anchor
            self._hess0 = 2.0 * objective.weights
        else:
            raise ValueError("primal-dual core handles smooth objectives only")
        self.kind = kind

    def grad_f(self, z):
        if self.kind == "linear":
            return self._grad0
        return 2.0 * (self._omega @ (z - self._anchor))

    def slacks(self, z):
        s = self.b - self.A @ z if self.b.size else np.zeros(0)
        if self.quad is not None:
            s = np.append(s, -self.quad.value(z))
        return s

    def jacobian(self, z):
        if self.quad is None:
            return self.A
        return np.vstack([self.A, self.quad.grad(z)])

    def residuals(self, z, lam, mu):
        J = self.jacobian(z)
        r_dual = self.grad_f(z) + J.T @ lam
        r_cent = lam * self.slacks(z) - mu
        return r_dual, r_cent

    def _solve_reduced(self, H, rhs):
        scale = max(1.0, float(np.trace(H)) / H.shape[0])
        for reg in (0.0, self.settings.reg * scale, 1e-8 * scale, 1e-4 * scale):
            try:
                L = np.linalg.cholesky(H + reg * np.eye(H.shape[0]))
                return np.linalg.solve(L.T, np.linalg.solve(L, rhs))
            except np.linalg.LinAlgError:
                continue
        return np.linalg.lstsq(H, rhs, rcond=None)[0]

    def run(self, z, budget, early_stop=None):
        """Follow the central path from a strictly feasible z.

        Returns (z, lambda, iterations, converged, hit_early_stop).
        """
        cfg = self.settings
        s = self.slacks(z)
        lam = 1.0 / np.maximum(s, 1e-12)
        lam = np.clip(lam, 1e-10, 1e10)
        used = 0
        while used < budget:
            s = self.slacks(z)
            eta = float(lam @ s)
            r_dual, _ = self.residuals(z, lam, 0.0)
            dual_norm = float(np.max(np.abs(r_dual))) if r_dual.size else 0.0
            if eta <= cfg.tol_gap and dual_norm <= cfg.tol_dual:
                return z, lam, used, True, False
            mu = eta / (self.m * cfg.mu)
            J = self.jacobian(z)
            H = np.zeros((self.n, self.n)) if self._hess0 is None \
                else self._hess0.copy()
            if self.quad is not None:
                H = H + 2.0 * lam[-1] * self.quad.Q
            H = H + (J.T * (lam / s)) @ J
            rhs = -(self.grad_f(z) + J.T @ (mu / s))
            dz = self._solve_reduced(H, rhs)
            dlam = (mu / s - lam) + (lam / s) * (J @ dz)
            # Fraction-to-boundary on the duals, then backtrack on strict
            # primal feasibility and residual decrease.
            alpha = 1.0
            neg = dlam < 0
            if np.any(neg):
                alpha = min(1.0, 0.99 * float(np.min(-lam[neg] / dlam[neg])))
            r_norm = self._residual_norm(z, lam, mu)
            accepted = False
            for _ in range(60):
                z_new = z + alpha * dz
                s_new = self.slacks(z_new)
                if np.all(s_new > 0):
                    lam_new = lam + alpha * dlam
                    if self._residual_norm(z_new, lam_new, mu) <= \
                            (1.0 - 0.01 * alpha) * r_norm + 1e-14:
                        accepted = True
                        break
                alpha *= 0.5
            used += 1
            if not accepted:
                return z, lam, used, False, False
            z, lam = z_new, lam_new
            if early_stop is not None and early_stop(z):
                return z, lam, used, False, True
        return z, lam, used, False, False

    def _residual_norm(self, z, lam, mu):
        r_dual, r_cent = self.residuals(z, lam, mu)
        return math.hypot(float(np.linalg.norm(r_dual)),
                          float(np.linalg.norm(r_cent)))


def _phase1(A, b, quad, candidates, settings, budget):
    """Find a strictly feasible x or certify there is none.

    Returns (x, used_iterations, slack_value).  ``x`` is None when the
    certified optimum of the violation slack exceeds the feasibility
    threshold.
    """
    def max_violation(x):
        worst = -math.inf
        if b.size:
            worst = float(np.max(A @ x - b))
        if quad is not None:
            worst = max(worst, quad.value(x))
        return worst

    best = min(candidates, key=max_violation)
    v0 = max_violation(best)
    if v0 < -1e-9:
        return best, 0, v0
    d = A.shape[1]
    # Slack problem over (x, s): minimize s subject to every constraint <= s
    # and s >= -1 to keep it bounded.
    A1 = np.hstack([A, -np.ones((A.shape[0], 1))]) if A.shape[0] else \
        np.zeros((0, d + 1))
    bound_row = np.zeros((1, d + 1))
    bound_row[0, -1] = -1.0
    A1 = np.vstack([A1, bound_row])
    b1 = np.concatenate([b, [1.0]])
    quad1 = None
    if quad is not None:
        Q1 = np.zeros((d + 1, d + 1))
        Q1[:d, :d] = quad.Q
        q1 = np.concatenate([quad.q, [-1.0]])
        quad1 = QuadraticInequality(Q1, q1, quad.r)
    c = np.zeros(d + 1)
    c[-1] = 1.0
    core = _PrimalDual(ObjectiveSpec.linear(c), A1, b1, quad1, settings)
    z0 = np.concatenate([best, [v0 + 1.0]])

    def early(z):
        return max_violation(z[:d]) < -1e-8

    z, _lam, used, _converged, hit = core.run(z0, budget, early_stop=early)
    if hit:
        return z[:d], used, max_violation(z[:d])
    slack = float(z[-1])
    if slack > settings.tol_feas:
        return None, used, slack
    return z[:d], used, slack   # thin region: feasible within tolerance only


def solve(program: ConvexProgram, settings: SolverSettings | None = None) -> Solution:
    """Two-phase interior-point solve of a weighted-L1 / Mahalanobis /
    linear program."""
    settings = settings or SolverSettings()
    obj = program.objective
    d = program.dim

    if program.n_constraints == 0:
        if obj.kind == "linear":
            raise ValueError("linear objective with no constraints is unbounded")
        x = obj.anchor.copy()
        return Solution("optimal", x, 0.0, 0.0, 0)

    candidates = [obj.anchor if obj.kind != "linear" else np.zeros(d)]
    if program.quadratic is not None:
        # The quadratic's unconstrained minimiser is a good interior guess.
        Q, q = program.quadratic.Q, program.quadratic.q
        center = np.linalg.lstsq(2.0 * Q, -q, rcond=None)[0]
        candidates.append(center)
    budget = settings.max_iter
    x0, used, slack = _phase1(program.A, program.b, program.quadratic,
                              candidates, settings, budget)
    if x0 is None:
        return Solution("infeasible", np.full(d, np.nan), math.inf, math.inf,
                        used, certificate=slack)
    if slack > -1e-9:
        # No strict interior reachable: report the minimum-violation point.
        return Solution("max-iter", x0, obj.value(x0), math.inf, used,
                        certificate=slack)

    if obj.kind == "l1":
        solved = l1_epigraph(program)
        t0 = np.abs(x0 - obj.anchor) + 1.0
        z0 = np.concatenate([x0, t0])
    else:
        solved = program
        z0 = x0
    core = _PrimalDual(solved.objective, solved.A, solved.b, solved.quadratic,
                       settings)
    z, lam, n, converged, _ = core.run(z0, budget - used)
    used += n
    lin_duals = lam[:solved.b.size]
    quad_dual = float(lam[-1]) if solved.quadratic is not None else None
    resid = check_kkt(solved, z, lin_duals, quad_dual)
    x = z[:d] if obj.kind == "l1" else z
    value = obj.value(x) if obj.kind != "linear" else obj.value(z)
    feasible = program.max_violation(x) <= settings.tol_feas
    ok = converged and feasible and resid <= 1e-6
    return Solution("optimal" if ok else "max-iter", x, value, resid, used,
                    lin_duals[:program.b.size], quad_dual)


# ---------------------------------------------------------------------------
# KKT certification
# ---------------------------------------------------------------------------

def check_kkt(program: ConvexProgram, point, lin_duals,
              quad_dual: float | None = None) -> float:
    """Max of primal/dual feasibility, complementary slackness and
    stationarity residuals at (point, duals).

    For a weighted-L1 objective the stationarity test is the subgradient
    condition: coordinates at the anchor only need the multiplier sum to
    land inside [-alpha_i, alpha_i].
    """
    x = np.asarray(point, dtype=float)
    lam = np.asarray(lin_duals, dtype=float)
    obj = program.objective
    if lam.shape != program.b.shape:
        raise ValueError("one dual per linear constraint required")
    if (quad_dual is None) != (program.quadratic is None):
        raise ValueError("quadratic dual must be given iff the program has one")

    primal = max(0.0, program.max_violation(x))
    all_duals = lam if quad_dual is None else np.append(lam, quad_dual)
    dual = max(0.0, float(-all_duals.min())) if all_duals.size else 0.0
    comp = 0.0
    if lam.size:
        comp = float(np.max(np.abs(lam * (program.A @ x - program.b))))
    v = -(program.A.T @ lam) if lam.size else np.zeros(x.size)
    if quad_dual is not None:
        comp = max(comp, abs(quad_dual * program.quadratic.value(x)))
        v = v - quad_dual * program.quadratic.grad(x)
    if obj.kind == "l1":
        alpha = obj.weights
        diff = x - obj.anchor
        zero_tol = 1e-7 * max(1.0, float(np.abs(obj.anchor).max()))
        stat = 0.0
        for i in range(x.size):
            if abs(diff[i]) > zero_tol:
                stat = max(stat, abs(v[i] - alpha[i] * math.copysign(1.0, diff[i])))
            else:
                stat = max(stat, max(0.0, abs(v[i]) - alpha[i]))
    elif obj.kind == "mahalanobis":
        stat = float(np.max(np.abs(2.0 * (obj.weights @ (x - obj.anchor)) - v)))
    else:
        stat = float(np.max(np.abs(obj.weights - v)))
    return max(primal, dual, comp, stat)


# ---------------------------------------------------------------------------
# Brute-force oracle (tests only)
# ---------------------------------------------------------------------------

def brute_force_oracle(program: ConvexProgram, box, resolution: int) -> OracleResult:
    """Exhaustive grid scan over a box; d <= 3 only.

    ``box`` is a sequence of (low, high) per dimension.  Returns the best
    feasible grid point, or ``feasible=False`` when no grid point
    satisfies the constraints at this resolution.
    """
    d = program.dim
    if d > 3:
        raise ValueError("oracle only supports d <= 3")
    box = [(float(lo), float(hi)) for lo, hi in box]
    if len(box) != d:
        raise ValueError("one (low, high) pair per dimension required")
    axes = [np.linspace(lo, hi, resolution + 1) for lo, hi in box]
    grids = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    feasible = np.ones(pts.shape[0], dtype=bool)
    if program.b.size:
        feasible &= np.all(pts @ program.A.T <= program.b, axis=1)
    if program.quadratic is not None:
        quad = program.quadratic
        vals = np.einsum("ni,ij,nj->n", pts, quad.Q, pts) + pts @ quad.q + quad.r
        feasible &= vals <= 0.0
    if not feasible.any():
        return OracleResult(None, math.inf, False)
    pts = pts[feasible]
    obj = program.objective
    if obj.kind == "l1":
        values = np.abs(pts - obj.anchor) @ obj.weights
    elif obj.kind == "mahalanobis":
        diff = pts - obj.anchor
        values = np.einsum("ni,ij,nj->n", diff, obj.weights, diff)
    else:
        values = pts @ obj.weights
    i = int(np.argmin(values))
    return OracleResult(pts[i], float(values[i]), True)


def format_program(program: ConvexProgram) -> str:
    """Plain-text dump of a program for external cross-checking."""
    obj = program.objective
    lines = [f"objective {obj.kind}",
             f"  anchor  {np.array2string(obj.anchor, precision=12)}",
             f"  weights {np.array2string(obj.weights, precision=12)}"]
    for a_row, b_val in zip(program.A, program.b):
        lines.append(f"linear {np.array2string(a_row, precision=12)} <= {b_val:.12g}")
    if program.quadratic is not None:
        quad = program.quadratic
        lines.append(f"quadratic Q={np.array2string(quad.Q, precision=12)} "
                     f"q={np.array2string(quad.q, precision=12)} r={quad.r:.12g}")
    return "\n".join(lines)
