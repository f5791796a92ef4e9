"""Classifiers whose target sets are unions of linear-inequality regions.

Softmax regression gives a single polytope per target class (pairwise
score dominance); a CART tree gives one axis-aligned box per leaf of the
target class.  Regions carry a strict margin so that points returned by
a solver on the region boundary still predict the target class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .data import LabeledDataset
from .regions import LinearRegion
from .serialize import array_to_list

__all__ = [
    "TrainingDivergedError",
    "SoftmaxModel",
    "TreeModel",
    "TreeNode",
    "fit_softmax",
    "softmax_loss_and_grad",
    "softmax_target_region",
    "fit_tree",
    "tree_target_regions",
    "target_regions",
    "DEFAULT_MARGIN",
]

DEFAULT_MARGIN = 1e-4


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss becomes non-finite."""


# ---------------------------------------------------------------------------
# Softmax regression
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SoftmaxModel:
    """Linear scores s = W x + b, prediction = argmax (ties -> lowest id)."""

    weights: np.ndarray
    biases: np.ndarray

    def __post_init__(self):
        W = np.array(self.weights, dtype=float)
        b = np.array(self.biases, dtype=float)
        if W.ndim != 2 or b.shape != (W.shape[0],):
            raise ValueError("weights must be K x d with a length-K bias vector")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise ValueError("model parameters must be finite")
        W.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", W)
        object.__setattr__(self, "biases", b)

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def n_features(self) -> int:
        return self.weights.shape[1]

    def scores(self, X: np.ndarray) -> np.ndarray:
        return np.atleast_2d(np.asarray(X, dtype=float)) @ self.weights.T + self.biases

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.scores(X), axis=1)

    def predict_one(self, x: np.ndarray) -> int:
        return int(self.predict(np.asarray(x, dtype=float)[np.newaxis])[0])

    def to_dict(self) -> dict:
        return {"kind": "softmax", "weights": array_to_list(self.weights),
                "biases": array_to_list(self.biases)}

    @classmethod
    def from_dict(cls, d: dict) -> "SoftmaxModel":
        return cls(np.array(d["weights"]), np.array(d["biases"]))


def softmax_loss_and_grad(W: np.ndarray, b: np.ndarray, X: np.ndarray,
                          y: np.ndarray, l2: float):
    """Mean cross-entropy plus l2/2 * ||W||^2, with analytic gradients."""
    n = X.shape[0]
    scores = X @ W.T + b
    log_z = logsumexp(scores, axis=1)
    loss = float(np.mean(log_z - scores[np.arange(n), y]) + 0.5 * l2 * np.sum(W * W))
    P = np.exp(scores - log_z[:, np.newaxis])
    P[np.arange(n), y] -= 1.0
    grad_W = P.T @ X / n + l2 * W
    grad_b = P.mean(axis=0)
    return loss, grad_W, grad_b


def fit_softmax(ds: LabeledDataset, lr: float = 0.1, epochs: int = 2000,
                l2: float = 1e-4, seed: int = 0) -> SoftmaxModel:
    """Full-batch gradient descent from zero-initialised parameters.

    The result is deterministic; ``seed`` is accepted for interface
    stability but the optimisation itself has no random element.
    """
    if ds.n_classes < 2:
        raise ValueError("need at least two classes")
    del seed
    X, y = ds.features, ds.labels
    W = np.zeros((ds.n_classes, ds.n_features))
    b = np.zeros(ds.n_classes)
    for _ in range(epochs):
        loss, gW, gb = softmax_loss_and_grad(W, b, X, y, l2)
        if not np.isfinite(loss):
            raise TrainingDivergedError(
                f"softmax training diverged (loss={loss}); lower the learning rate")
        W = W - lr * gW
        b = b - lr * gb
    loss, _, _ = softmax_loss_and_grad(W, b, X, y, l2)
    if not np.isfinite(loss):
        raise TrainingDivergedError("softmax training diverged on the final step")
    return SoftmaxModel(W, b)


def softmax_target_region(model: SoftmaxModel, target: int,
                          margin: float = DEFAULT_MARGIN) -> LinearRegion:
    """Polytope where the target's score beats every other score by ``margin``.

    One inequality per competing class i:
    (w_i - w_target)^T x <= (b_target - b_i) - margin.
    """
    if not 0 <= target < model.n_classes:
        raise ValueError(f"target {target} out of range")
    if margin < 0:
        raise ValueError("margin must be >= 0")
    others = [i for i in range(model.n_classes) if i != target]
    A = model.weights[others] - model.weights[target]
    b = model.biases[target] - model.biases[others] - margin
    return LinearRegion(A, b, provenance="softmax-margin")


# ---------------------------------------------------------------------------
# CART decision tree
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TreeNode:
    """Internal node (feature, threshold, children) or leaf (class_id)."""

    feature: int | None = None
    threshold: float | None = None
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    class_id: int | None = None

    @property
    def is_leaf(self) -> bool:
        return self.class_id is not None


def _gini(counts: np.ndarray) -> float:
    n = counts.sum()
    if n == 0:
        return 0.0
    p = counts / n
    return float(1.0 - np.sum(p * p))


def _majority(y: np.ndarray, n_classes: int) -> int:
    counts = np.bincount(y, minlength=n_classes)
    return int(np.argmax(counts))   # ties -> lowest class id


def _best_split(X: np.ndarray, y: np.ndarray, n_classes: int, min_leaf: int):
    """Exhaustive Gini search over features and adjacent-midpoint thresholds."""
    n, d = X.shape
    parent_counts = np.bincount(y, minlength=n_classes)
    parent_impurity = _gini(parent_counts)
    if parent_impurity == 0.0:
        return None
    best = None
    for f in range(d):
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        ys = y[order]
        left_counts = np.zeros(n_classes)
        right_counts = parent_counts.astype(float).copy()
        for i in range(n - 1):
            left_counts[ys[i]] += 1
            right_counts[ys[i]] -= 1
            if xs[i] == xs[i + 1]:
                continue
            n_left = i + 1
            n_right = n - n_left
            if n_left < min_leaf or n_right < min_leaf:
                continue
            impurity = (n_left * _gini(left_counts)
                        + n_right * _gini(right_counts)) / n
            gain = parent_impurity - impurity
            if gain > 1e-12 and (best is None or gain > best[0] + 1e-12):
                threshold = 0.5 * (xs[i] + xs[i + 1])
                best = (gain, f, threshold)
    return best


def _grow(X: np.ndarray, y: np.ndarray, n_classes: int, depth: int,
          max_depth: int, min_leaf: int) -> TreeNode:
    if depth >= max_depth:
        return TreeNode(class_id=_majority(y, n_classes))
    split = _best_split(X, y, n_classes, min_leaf)
    if split is None:
        return TreeNode(class_id=_majority(y, n_classes))
    _, f, t = split
    mask = X[:, f] <= t
    left = _grow(X[mask], y[mask], n_classes, depth + 1, max_depth, min_leaf)
    right = _grow(X[~mask], y[~mask], n_classes, depth + 1, max_depth, min_leaf)
    return TreeNode(feature=f, threshold=t, left=left, right=right)


@dataclass(frozen=True)
class TreeModel:
    """Binary CART tree; left branch is x[feature] <= threshold."""

    root: TreeNode
    n_features: int
    n_classes: int

    def predict_one(self, x: np.ndarray) -> int:
        node = self.root
        while not node.is_leaf:
            node = node.left if x[node.feature] <= node.threshold else node.right
        return node.class_id

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.array([self.predict_one(row) for row in X], dtype=int)

    def leaves(self):
        """Yield (leaf_id, path, class_id) in preorder; leaf ids count leaves
        in preorder and each path step is (feature, threshold, went_left)."""
        out = []

        def walk(node, path):
            if node.is_leaf:
                out.append((len(out), tuple(path), node.class_id))
                return
            walk(node.left, path + [(node.feature, node.threshold, True)])
            walk(node.right, path + [(node.feature, node.threshold, False)])

        walk(self.root, [])
        return out

    def to_dict(self) -> dict:
        nodes = []

        def walk(node):
            if node.is_leaf:
                nodes.append({"leaf": True, "class_id": node.class_id})
            else:
                nodes.append({"leaf": False, "feature": node.feature,
                              "threshold": node.threshold})
                walk(node.left)
                walk(node.right)

        walk(self.root)
        return {"kind": "tree", "n_features": self.n_features,
                "n_classes": self.n_classes, "nodes": nodes}

    @classmethod
    def from_dict(cls, d: dict) -> "TreeModel":
        nodes = d["nodes"]
        pos = 0

        def build():
            nonlocal pos
            rec = nodes[pos]
            pos += 1
            if rec["leaf"]:
                return TreeNode(class_id=int(rec["class_id"]))
            feature, threshold = int(rec["feature"]), float(rec["threshold"])
            left = build()
            right = build()
            return TreeNode(feature=feature, threshold=threshold,
                            left=left, right=right)

        root = build()
        return cls(root, int(d["n_features"]), int(d["n_classes"]))


def fit_tree(ds: LabeledDataset, max_depth: int, min_leaf: int = 1) -> TreeModel:
    """Greedy CART with Gini impurity and midpoint thresholds."""
    if max_depth < 1 or min_leaf < 1:
        raise ValueError("max_depth and min_leaf must be >= 1")
    root = _grow(ds.features, ds.labels, ds.n_classes, 0, max_depth, min_leaf)
    return TreeModel(root, ds.n_features, ds.n_classes)


def tree_target_regions(model: TreeModel, target: int,
                        margin: float = DEFAULT_MARGIN) -> list[LinearRegion]:
    """One axis-aligned region per target leaf.

    A left step contributes x_f <= t; a right step (strict side) is
    shifted to x_f >= t + margin so interior points cannot fall back
    into the left branch.
    """
    if margin < 0:
        raise ValueError("margin must be >= 0")
    d = model.n_features
    regions = []
    for leaf_id, path, class_id in model.leaves():
        if class_id != target:
            continue
        rows, bounds = [], []
        for feature, threshold, went_left in path:
            row = np.zeros(d)
            if went_left:
                row[feature] = 1.0
                bounds.append(threshold)
            else:
                row[feature] = -1.0
                bounds.append(-(threshold + margin))
            rows.append(row)
        A = np.array(rows) if rows else np.zeros((0, d))
        b = np.array(bounds)
        regions.append(LinearRegion(A, b, provenance=f"leaf:{leaf_id}"))
    return regions


def target_regions(model, target: int,
                   margin: float = DEFAULT_MARGIN) -> list[LinearRegion]:
    """Uniform region access for either model type."""
    if isinstance(model, SoftmaxModel):
        return [softmax_target_region(model, target, margin)]
    if isinstance(model, TreeModel):
        return tree_target_regions(model, target, margin)
    raise TypeError(f"unsupported model type {type(model)}")


def model_from_dict(d: dict):
    if d.get("kind") == "softmax":
        return SoftmaxModel.from_dict(d)
    if d.get("kind") == "tree":
        return TreeModel.from_dict(d)
    raise ValueError(f"unknown model kind {d.get('kind')!r}")
