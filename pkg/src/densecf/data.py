"""Data ingestion, cross-validation splits, and PCA as an invertible affine map.

The PCA map is kept explicit (projection matrix, center, right
pseudo-inverse) because downstream convex programs are posed in the
original feature space: constraints built in the latent space are pulled
back through the map by :func:`pca_compose_constraints`.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .regions import FeasibleRegion, LinearRegion, QuadraticInequality
from .serialize import array_to_list

__all__ = [
    "IngestError",
    "LabeledDataset",
    "AffineMap",
    "FoldPlan",
    "load_csv",
    "kfold_split",
    "fit_pca",
    "pca_compose_constraints",
    "jacobi_eigh",
]


class IngestError(ValueError):
    """Raised when a CSV file cannot be turned into a dataset."""


@dataclass(frozen=True)
class LabeledDataset:
    """Feature matrix with contiguous integer class labels.

    ``label_values`` holds the original label of each encoded class, so
    encoded label ``c`` came from ``label_values[c]``.
    """

    features: np.ndarray
    labels: np.ndarray
    feature_names: tuple[str, ...]
    label_values: tuple[float, ...]

    def __post_init__(self):
        X = np.array(self.features, dtype=float)
        y = np.array(self.labels, dtype=int)
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise ValueError(f"feature matrix must be n x d with n,d >= 1, got {X.shape}")
        if y.shape != (X.shape[0],):
            raise ValueError("labels must be a vector matching the number of rows")
        if not np.all(np.isfinite(X)):
            raise ValueError("features contain NaN/Inf")
        k = len(self.label_values)
        if y.min() < 0 or y.max() >= k:
            raise ValueError("labels must lie in 0..K-1")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "label_values", tuple(self.label_values))

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.label_values)

    def class_points(self, class_id: int) -> np.ndarray:
        return self.features[self.labels == class_id]

    def subset(self, idx) -> "LabeledDataset":
        """Row subset; keeps the full class table so label ids stay valid."""
        idx = np.asarray(idx, dtype=int)
        return LabeledDataset(self.features[idx], self.labels[idx],
                              self.feature_names, self.label_values)


@dataclass(frozen=True)
class AffineMap:
    """Affine projection z = projection @ (x - center) with right inverse.

    For a plain PCA the rows of ``projection`` are orthonormal
    eigenvectors and ``reconstruction`` is its transpose.  With
    ``standardized=True`` the per-feature scaling is folded into the
    matrices, so orthonormality holds in the scaled space instead.
    """

    projection: np.ndarray
    center: np.ndarray
    reconstruction: np.ndarray
    standardized: bool = False

    def __post_init__(self):
        W = np.array(self.projection, dtype=float)
        m = np.array(self.center, dtype=float)
        R = np.array(self.reconstruction, dtype=float)
        k, d = W.shape
        if m.shape != (d,) or R.shape != (d, k):
            raise ValueError("projection/center/reconstruction shapes are inconsistent")
        if not np.allclose(W @ R, np.eye(k), atol=1e-6):
            raise ValueError("reconstruction is not a right inverse of projection")
        if not self.standardized and not np.allclose(W @ W.T, np.eye(k), atol=1e-8):
            raise ValueError("projection rows are not orthonormal")
        for arr in (W, m, R):
            arr.setflags(write=False)
        object.__setattr__(self, "projection", W)
        object.__setattr__(self, "center", m)
        object.__setattr__(self, "reconstruction", R)

    @property
    def latent_dim(self) -> int:
        return self.projection.shape[0]

    @property
    def input_dim(self) -> int:
        return self.projection.shape[1]

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return (X - self.center) @ self.projection.T

    def inverse(self, Z: np.ndarray) -> np.ndarray:
        Z = np.asarray(Z, dtype=float)
        return Z @ self.reconstruction.T + self.center

    def to_dict(self) -> dict:
        return {
            "projection": array_to_list(self.projection),
            "center": array_to_list(self.center),
            "reconstruction": array_to_list(self.reconstruction),
            "standardized": self.standardized,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AffineMap":
        return cls(np.array(d["projection"]), np.array(d["center"]),
                   np.array(d["reconstruction"]), bool(d["standardized"]))


@dataclass(frozen=True)
class FoldPlan:
    """Assignment of each sample to one of k folds."""

    k: int
    assignments: np.ndarray
    stratified: bool = True

    def __post_init__(self):
        a = np.array(self.assignments, dtype=int)
        if a.min() < 0 or a.max() >= self.k:
            raise ValueError("fold indices out of range")
        sizes = np.bincount(a, minlength=self.k)
        if sizes.max() - sizes.min() > 1:
            raise ValueError(f"fold sizes differ by more than 1: {sizes}")
        a.setflags(write=False)
        object.__setattr__(self, "assignments", a)

    def test_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments != fold)

    def to_dict(self) -> dict:
        return {"k": self.k, "assignments": array_to_list(self.assignments),
                "stratified": self.stratified}

    @classmethod
    def from_dict(cls, d: dict) -> "FoldPlan":
        return cls(int(d["k"]), np.array(d["assignments"]), bool(d["stratified"]))


def load_csv(path: str | Path, label_column: str) -> LabeledDataset:
    """Read a numeric CSV with a header row into a dataset.

    Labels are re-encoded to contiguous 0..K-1 in sorted order of the
    original values; row order is preserved.
    """
    path = Path(path)
    if not path.exists():
        raise IngestError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if label_column not in header:
            raise IngestError(f"{path}: unknown label column '{label_column}' "
                              f"(columns: {', '.join(header)})")
        label_idx = header.index(label_column)
        feature_names = tuple(h for i, h in enumerate(header) if i != label_idx)
        rows, raw_labels = [], []
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise IngestError(f"{path}: row {row_no} has {len(row)} cells, "
                                  f"expected {len(header)}")
            values = []
            for col_no, cell in enumerate(row):
                try:
                    v = float(cell)
                except ValueError:
                    raise IngestError(f"{path}: row {row_no}, column "
                                      f"'{header[col_no]}': non-numeric cell "
                                      f"'{cell.strip()}'") from None
                if not np.isfinite(v):
                    raise IngestError(f"{path}: row {row_no}, column "
                                      f"'{header[col_no]}': non-finite value")
                values.append(v)
            raw_labels.append(values.pop(label_idx))
            rows.append(values)
    if not rows:
        raise IngestError(f"{path}: no data rows")
    classes = sorted(set(raw_labels))
    encoding = {v: i for i, v in enumerate(classes)}
    labels = np.array([encoding[v] for v in raw_labels], dtype=int)
    return LabeledDataset(np.array(rows), labels, feature_names, tuple(classes))


def kfold_split(ds: LabeledDataset, k: int, seed: int) -> FoldPlan:
    """Deterministic k-fold assignment, stratified by class when possible.

    Stratification is used only when every class has at least k members;
    otherwise the split is unstratified and a warning is emitted (the
    plan records which mode was used).
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > ds.n_samples:
        raise ValueError(f"k={k} exceeds the number of samples ({ds.n_samples})")
    rng = np.random.default_rng(seed)
    counts = np.bincount(ds.labels, minlength=ds.n_classes)
    stratified = bool(np.all(counts >= k))
    assignments = np.empty(ds.n_samples, dtype=int)
    if stratified:
        # Deal class members round-robin, carrying the fold cursor across
        # classes so global fold sizes stay within one of each other.
        cursor = 0
        for c in range(ds.n_classes):
            idx = np.flatnonzero(ds.labels == c)
            idx = rng.permutation(idx)
            for i in idx:
                assignments[i] = cursor % k
                cursor += 1
    else:
        warnings.warn(f"some class has fewer than {k} members; "
                      "falling back to an unstratified split", stacklevel=2)
        order = rng.permutation(ds.n_samples)
        for pos, i in enumerate(order):
            assignments[i] = pos % k
    return FoldPlan(k, assignments, stratified)


def jacobi_eigh(S: np.ndarray, tol: float = 1e-10, max_sweeps: int = 100):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi sweeps.

    Returns (eigenvalues, eigenvectors-as-columns), unsorted.  The
    off-diagonal Frobenius norm is driven below ``tol`` relative to the
    matrix norm (with a floor of 1 to keep the test meaningful for
    near-zero matrices).
    """
    A = np.array(S, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("matrix must be square")
    if not np.allclose(A, A.T, atol=1e-10 * max(1.0, np.abs(A).max())):
        raise ValueError("matrix must be symmetric")
    n = A.shape[0]
    V = np.eye(n)
    threshold = tol * max(1.0, np.linalg.norm(A))
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(A**2) - np.sum(np.diag(A) ** 2))
        if off <= threshold:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= 1e-300:
                    continue
                tau = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = np.sign(tau) / (abs(tau) + np.hypot(1.0, tau)) if tau != 0 else 1.0
                c = 1.0 / np.hypot(1.0, t)
                s = t * c
                rot = np.array([[c, s], [-s, c]])
                A[[p, q], :] = rot @ A[[p, q], :]
                A[:, [p, q]] = A[:, [p, q]] @ rot.T
                V[:, [p, q]] = V[:, [p, q]] @ rot.T
    return np.diag(A).copy(), V


def fit_pca(ds: LabeledDataset, components: int, standardize: bool = False) -> AffineMap:
    """Top-k principal axes of the sample covariance as an AffineMap.

    Eigenvectors are ordered by descending eigenvalue (stable sort, so
    ties keep the eigensolver's order) and sign-fixed so each row's
    largest-magnitude entry is positive.
    """
    X = ds.features
    n, d = X.shape
    if not 1 <= components <= d:
        raise ValueError(f"components must be in 1..{d}, got {components}")
    if n < 2:
        raise ValueError("PCA needs at least 2 samples")
    center = X.mean(axis=0)
    Xc = X - center
    scale = None
    if standardize:
        scale = Xc.std(axis=0, ddof=1)
        scale = np.where(scale > 0, scale, 1.0)
        Xc = Xc / scale
    cov = (Xc.T @ Xc) / (n - 1)
    eigvals, eigvecs = jacobi_eigh(cov)
    order = np.argsort(-eigvals, kind="stable")
    W = eigvecs[:, order[:components]].T
    # Deterministic sign: largest-|entry| coordinate of each axis positive.
    for row in range(components):
        j = np.argmax(np.abs(W[row]))
        if W[row, j] < 0:
            W[row] = -W[row]
    if standardize:
        projection = W / scale[np.newaxis, :]
        reconstruction = (W * scale[np.newaxis, :]).T
    else:
        projection = W
        reconstruction = W.T
    return AffineMap(projection, center, reconstruction, standardized=standardize)


def pca_compose_constraints(amap: AffineMap, region: FeasibleRegion) -> FeasibleRegion:
    """Pull a latent-space region back to the original space via z = W(x - m).

    Each linear row a^T z <= b becomes (W^T a)^T x <= b + (W^T a)^T m, and
    the quadratic z^T Q z + q^T z + r <= 0 becomes a convex quadratic in x
    (the transformed matrix W^T Q W stays PSD).
    """
    W, m = amap.projection, amap.center
    if region.dim != amap.latent_dim:
        raise ValueError(f"region dimension {region.dim} does not match "
                         f"latent dimension {amap.latent_dim}")
    lin = region.linear
    A_new = lin.A @ W
    b_new = lin.b + A_new @ m
    linear = LinearRegion(A_new, b_new, lin.provenance)
    quadratic = None
    if region.quadratic is not None:
        Q, q, r = region.quadratic.Q, region.quadratic.q, region.quadratic.r
        Qx = W.T @ Q @ W
        Qx = 0.5 * (Qx + Qx.T)
        Wq = W.T @ q
        q_new = -2.0 * (Qx @ m) + Wq
        r_new = float(m @ Qx @ m - Wq @ m + r)
        quadratic = QuadraticInequality(Qx, q_new, r_new)
    return FeasibleRegion(linear, quadratic)
