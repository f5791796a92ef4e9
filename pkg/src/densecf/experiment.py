"""Cross-validated experiment pipeline behind the command-line frontend.

For every CV fold this fits (optionally after PCA) a classifier plus
per-class mixture and kernel density estimators on the training split,
then explains every test sample twice: once unconstrained and once with
the density floor set to a quantile (default: median) of the training
samples' approximated density under the target class's mixture.  Both
counterfactuals share the same randomly drawn target class.  The result
table reports medians of KDE log-density and Manhattan distance with and
without the constraint, per fold and pooled.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .data import AffineMap, LabeledDataset, fit_pca, kfold_split, load_csv
from .density import (ClassGmm, ClassKde, DensityThreshold, fit_gmm, fit_kde,
                      gmm_log_matrix, quantile_threshold)
from .engine import (CounterfactualRequest, audit, counterfactual_baseline,
                     counterfactual_plausible)
from .models import SoftmaxModel, TreeModel, fit_softmax, fit_tree, model_from_dict
from .serialize import dump, load
from .solver import ObjectiveSpec

__all__ = [
    "ExperimentConfig",
    "FoldArtifacts",
    "ExperimentReport",
    "derive_seed",
    "load_dataset",
    "fit_fold",
    "run_experiment",
    "write_fold_artifacts",
    "load_fold_artifacts",
    "write_pgm",
]

CSV_HEADER = ("model,dataset,fold,n_explained,n_infeasible,n_audit_failed,"
              "median_kde_log_density_without,median_kde_log_density_with,"
              "median_l1_distance_without,median_l1_distance_with")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs; JSON-loadable with CLI flag overrides.

    ``bandwidth_factors`` and the GMM component grid are the hyper-search
    spaces: bandwidth candidates are the factors times the per-class RMS
    feature spread, searched by ``hyper_folds``-fold cross validation.
    """

    dataset: str = ""
    label_column: str = "label"
    dataset_name: str = ""
    model: str = "softmax"            # softmax | tree
    objective: str = "l1"             # l1 | mahalanobis
    pca_components: int | None = None
    standardize: bool = False
    cv_folds: int = 4
    hyper_folds: int = 5
    seed: int = 0
    out_dir: str = "out"
    delta_quantile: float = 0.5
    binarize_threshold: float | None = None
    image_shape: tuple[int, int] | None = None
    image_dump_count: int = 5
    bandwidth_factors: tuple[float, ...] = (0.05, 0.1, 0.2, 0.5, 1.0)
    gmm_components_grid: tuple[int, ...] = (1, 2, 3, 4, 5, 6, 7, 8)
    margin: float = 1e-4
    softmax_lr: float = 0.1
    softmax_epochs: int = 2000
    softmax_l2: float = 1e-4
    tree_max_depth: int = 6
    tree_min_leaf: int = 5
    em_restarts: int = 5
    neighbors: int = 5

    def __post_init__(self):
        if self.cv_folds < 2 or self.hyper_folds < 2:
            raise ValueError("fold counts must be >= 2")
        if self.model not in ("softmax", "tree"):
            raise ValueError(f"unknown model {self.model!r}")
        if self.objective not in ("l1", "mahalanobis"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.image_shape is not None:
            object.__setattr__(self, "image_shape", tuple(self.image_shape))
        object.__setattr__(self, "bandwidth_factors",
                           tuple(self.bandwidth_factors))
        object.__setattr__(self, "gmm_components_grid",
                           tuple(self.gmm_components_grid))

    @classmethod
    def from_json(cls, path: str | Path, **overrides) -> "ExperimentConfig":
        raw = load(path)
        raw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**raw)

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **{k: v for k, v in kw.items()
                                            if v is not None})

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["image_shape"] = list(self.image_shape) if self.image_shape else None
        d["bandwidth_factors"] = list(self.bandwidth_factors)
        d["gmm_components_grid"] = list(self.gmm_components_grid)
        return d

    @property
    def name(self) -> str:
        return self.dataset_name or Path(self.dataset).stem


def derive_seed(*parts) -> int:
    """Stable integer seed from a tuple of ints/strings."""
    ints = []
    for p in parts:
        if isinstance(p, str):
            ints.extend(p.encode())
        else:
            ints.append(int(p))
    return int(np.random.SeedSequence(ints).generate_state(1)[0])


def load_dataset(cfg: ExperimentConfig) -> LabeledDataset:
    ds = load_csv(cfg.dataset, cfg.label_column)
    if cfg.binarize_threshold is not None:
        raw = np.array([ds.label_values[l] for l in ds.labels])
        labels = (raw >= cfg.binarize_threshold).astype(int)
        ds = LabeledDataset(ds.features, labels, ds.feature_names, (0.0, 1.0))
    return ds


# ---------------------------------------------------------------------------
# Per-fold fitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FoldArtifacts:
    fold: int
    pca: AffineMap | None
    model: SoftmaxModel | TreeModel
    gmms: dict[int, ClassGmm]
    kdes: dict[int, ClassKde]
    thresholds: dict[int, DensityThreshold]
    train_latent: LabeledDataset


def _bandwidth_grid(points: np.ndarray, factors) -> list[float]:
    scale = math.sqrt(float(np.mean(np.var(points, axis=0))))
    if scale <= 0:
        scale = 1.0
    return [f * scale for f in factors]


def _select_gmm_components(points: np.ndarray, cfg: ExperimentConfig,
                           seed: int) -> int:
    """Component count by held-out mixture log-likelihood, ties to smallest."""
    n = points.shape[0]
    folds = min(cfg.hyper_folds, n)
    if folds < 2:
        return 1
    rng = np.random.default_rng(seed)
    fold_of = np.empty(n, dtype=int)
    fold_of[rng.permutation(n)] = np.arange(n) % folds
    min_train = n - int(np.bincount(fold_of, minlength=folds).max())
    candidates = [m for m in cfg.gmm_components_grid if m <= min_train]
    if not candidates:
        return 1
    best_m, best_score = candidates[0], -np.inf
    for m in sorted(candidates):
        scores = []
        for f in range(folds):
            train = points[fold_of != f]
            held = points[fold_of == f]
            if train.shape[0] < m or held.shape[0] == 0:
                continue
            gmm = fit_gmm(train, m, seed=derive_seed(seed, m, f),
                          restarts=cfg.em_restarts)
            scores.append(logsumexp(gmm_log_matrix(gmm, held), axis=1))
        if not scores:
            continue
        score = float(np.mean(np.concatenate(scores)))
        if score > best_score:
            best_m, best_score = m, score
    return best_m


def fit_fold(ds: LabeledDataset, train_idx: np.ndarray, cfg: ExperimentConfig,
             fold: int) -> FoldArtifacts:
    """Fit PCA, classifier and per-class density estimators on one train split."""
    train = ds.subset(train_idx)
    pca = None
    Z = train.features
    if cfg.pca_components is not None:
        pca = fit_pca(train, cfg.pca_components, cfg.standardize)
        Z = pca.transform(train.features)
    latent_names = tuple(f"pc{i}" for i in range(Z.shape[1])) \
        if pca is not None else train.feature_names
    train_latent = LabeledDataset(Z, train.labels, latent_names,
                                  train.label_values)
    if cfg.model == "softmax":
        model = fit_softmax(train_latent, cfg.softmax_lr, cfg.softmax_epochs,
                            cfg.softmax_l2, seed=derive_seed(cfg.seed, fold, "sm"))
    else:
        model = fit_tree(train_latent, cfg.tree_max_depth, cfg.tree_min_leaf)
    gmms, kdes, thresholds = {}, {}, {}
    for c in range(ds.n_classes):
        pts = Z[train.labels == c]
        if pts.shape[0] == 0:
            continue
        seed_c = derive_seed(cfg.seed, fold, c)
        m = _select_gmm_components(pts, cfg, seed_c)
        gmms[c] = fit_gmm(pts, m, seed=seed_c, restarts=cfg.em_restarts,
                          class_id=c)
        grid = _bandwidth_grid(pts, cfg.bandwidth_factors)
        if pts.shape[0] >= cfg.hyper_folds:
            kdes[c] = fit_kde(pts, grid, cfg.hyper_folds, seed=seed_c)
        else:
            kdes[c] = fit_kde(pts, [grid[len(grid) // 2]], folds=2, seed=seed_c) \
                if pts.shape[0] >= 2 else None
        thresholds[c] = quantile_threshold(gmms[c], pts, cfg.delta_quantile)
    return FoldArtifacts(fold, pca, model, gmms, kdes, thresholds, train_latent)


# ---------------------------------------------------------------------------
# Artifact serialization
# ---------------------------------------------------------------------------

def write_fold_artifacts(art: FoldArtifacts, cfg: ExperimentConfig,
                         out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prefix = f"fold{art.fold}_seed{cfg.seed}"
    written = []

    def emit(name, payload):
        path = out / f"{prefix}_{name}.json"
        dump(payload, path)
        written.append(path)

    emit("model", art.model.to_dict())
    if art.pca is not None:
        emit("pca", art.pca.to_dict())
    for c, gmm in art.gmms.items():
        emit(f"gmm_class{c}", gmm.to_dict())
    for c, kde in art.kdes.items():
        if kde is not None:
            emit(f"kde_class{c}", kde.to_dict())
    emit("thresholds", {str(c): t.to_dict() for c, t in art.thresholds.items()})
    return written


def load_fold_artifacts(out_dir: str | Path, fold: int, seed: int,
                        n_classes: int) -> FoldArtifacts:
    out = Path(out_dir)
    prefix = f"fold{fold}_seed{seed}"
    model = model_from_dict(load(out / f"{prefix}_model.json"))
    pca_path = out / f"{prefix}_pca.json"
    pca = AffineMap.from_dict(load(pca_path)) if pca_path.exists() else None
    gmms, kdes = {}, {}
    for c in range(n_classes):
        gmm_path = out / f"{prefix}_gmm_class{c}.json"
        if gmm_path.exists():
            gmms[c] = ClassGmm.from_dict(load(gmm_path))
        kde_path = out / f"{prefix}_kde_class{c}.json"
        if kde_path.exists():
            kdes[c] = ClassKde.from_dict(load(kde_path))
    thresholds = {int(c): DensityThreshold.from_dict(t)
                  for c, t in load(out / f"{prefix}_thresholds.json").items()}
    return FoldArtifacts(fold, pca, model, gmms, kdes, thresholds, None)


# ---------------------------------------------------------------------------
# PGM image dumps
# ---------------------------------------------------------------------------

def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """8-bit binary PGM; values are clamped to [0, 255]."""
    image = np.asarray(image, dtype=float)
    if image.ndim != 2:
        raise ValueError("image must be 2-d")
    data = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


# ---------------------------------------------------------------------------
# The experiment itself
# ---------------------------------------------------------------------------

@dataclass
class ExperimentReport:
    config: dict
    rows: list[dict]
    records: list[dict]
    runtime_seconds: float = 0.0

    def to_csv(self) -> str:
        lines = [CSV_HEADER]
        for row in self.rows:
            cells = [row["model"], row["dataset"], str(row["fold"]),
                     str(row["n_explained"]), str(row["n_infeasible"]),
                     str(row["n_audit_failed"])]
            for key in ("median_kde_log_density_without",
                        "median_kde_log_density_with",
                        "median_l1_distance_without",
                        "median_l1_distance_with"):
                v = row[key]
                cells.append("" if v is None else f"{v:.17g}")
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "csv": out / "table.csv",
            "json": out / "table.json",
            "records": out / "records.json",
        }
        paths["csv"].write_text(self.to_csv(), encoding="utf-8")
        dump({"config": self.config, "rows": self.rows}, paths["json"])
        dump(self.records, paths["records"])
        return paths


def _objective_for(cfg: ExperimentConfig, x: np.ndarray):
    if cfg.objective == "l1":
        return ObjectiveSpec.l1(x)
    return ObjectiveSpec.mahalanobis(x)


def _median_or_none(values) -> float | None:
    return float(np.median(values)) if values else None


def _table_rows(cfg: ExperimentConfig, records: list[dict]) -> list[dict]:
    def row_for(fold_label, recs):
        included = [r for r in recs if r["included"]]
        infeasible = sum(1 for r in recs if r["infeasible"])
        audit_failed = sum(1 for r in recs if r["audit_failed"])
        return {
            "model": cfg.model,
            "dataset": cfg.name,
            "fold": fold_label,
            "n_explained": len(included),
            "n_infeasible": infeasible,
            "n_audit_failed": audit_failed,
            "median_kde_log_density_without":
                _median_or_none([r["baseline_kde_log_density"] for r in included]),
            "median_kde_log_density_with":
                _median_or_none([r["plausible_kde_log_density"] for r in included]),
            "median_l1_distance_without":
                _median_or_none([r["baseline_l1_distance"] for r in included]),
            "median_l1_distance_with":
                _median_or_none([r["plausible_l1_distance"] for r in included]),
        }

    rows = [row_for(str(f), [r for r in records if r["fold"] == f])
            for f in range(cfg.cv_folds)]
    rows.append(row_for("pooled", records))
    return rows


def run_experiment(cfg: ExperimentConfig, ds: LabeledDataset | None = None,
                   write_outputs: bool = True) -> ExperimentReport:
    """The full cross-validated protocol; deterministic for a fixed config.

    Each test sample gets a random target class (!= its label), one
    unconstrained and one density-constrained counterfactual, and both
    are audited.  A sample enters the medians only if both searches
    succeeded and both audits passed; failures are counted per row.
    """
    import time
    start = time.monotonic()
    if ds is None:
        ds = load_dataset(cfg)
    plan = kfold_split(ds, cfg.cv_folds, seed=derive_seed(cfg.seed, "folds"))
    records = []
    image_dir = None
    if cfg.image_shape is not None and write_outputs:
        image_dir = Path(cfg.out_dir) / "images"
        image_dir.mkdir(parents=True, exist_ok=True)
    for fold in range(cfg.cv_folds):
        art = fit_fold(ds, plan.train_indices(fold), cfg, fold)
        rng = np.random.default_rng(derive_seed(cfg.seed, fold, "targets"))
        dumped = 0
        for i in plan.test_indices(fold):
            x = ds.features[i]
            y = int(ds.labels[i])
            others = [c for c in range(ds.n_classes)
                      if c != y and c in art.gmms]
            if not others:
                continue
            target = int(rng.choice(others))
            objective = _objective_for(cfg, x)
            base_req = CounterfactualRequest(x, target, objective, None, art.pca)
            plaus_req = CounterfactualRequest(x, target, objective,
                                              art.thresholds[target], art.pca)
            kde = art.kdes.get(target)
            gmm = art.gmms[target]
            base = counterfactual_baseline(base_req, art.model, kde=kde,
                                           gmm=gmm, margin=cfg.margin)
            plaus = counterfactual_plausible(plaus_req, art.model, gmm,
                                             kde=kde, margin=cfg.margin)
            record = {
                "fold": fold, "index": int(i), "label": y, "target": target,
                "baseline_status": base.status,
                "plausible_status": plaus.status,
                "baseline_l1_distance": None,
                "plausible_l1_distance": None,
                "baseline_kde_log_density": base.kde_log_density,
                "plausible_kde_log_density": plaus.kde_log_density,
                "baseline_approx_log_density": base.approx_log_density,
                "plausible_approx_log_density": plaus.approx_log_density,
                "component_index": plaus.component_index,
                "infeasible": not (base.found and plaus.found),
                "audit_failed": False,
            }
            if base.found:
                record["baseline_l1_distance"] = float(np.sum(np.abs(base.point - x)))
            if plaus.found:
                record["plausible_l1_distance"] = float(np.sum(np.abs(plaus.point - x)))
            if base.found and plaus.found:
                base_audit = audit(base, base_req, art.model, gmm, kde)
                plaus_audit = audit(plaus, plaus_req, art.model, gmm, kde)
                record["audit_failed"] = not (base_audit.passed and
                                              plaus_audit.passed)
            record["included"] = not (record["infeasible"] or
                                      record["audit_failed"])
            records.append(record)
            if image_dir is not None and record["included"] and \
                    dumped < cfg.image_dump_count:
                shape = cfg.image_shape
                stem = f"fold{fold}_sample{int(i)}"
                write_pgm(image_dir / f"{stem}_original.pgm", x.reshape(shape))
                write_pgm(image_dir / f"{stem}_baseline.pgm",
                          base.point.reshape(shape))
                write_pgm(image_dir / f"{stem}_plausible.pgm",
                          plaus.point.reshape(shape))
                dumped += 1
    report = ExperimentReport(cfg.to_dict(), _table_rows(cfg, records), records,
                              time.monotonic() - start)
    if write_outputs:
        report.write(cfg.out_dir)
    return report
