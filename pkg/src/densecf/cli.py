"""Command line frontend: fit artifacts, explain inputs, run experiments.

Exit codes: 0 on success (counterfactual found, for ``explain``),
1 on usage or input errors, 2 when the requested explanation is
infeasible.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .data import IngestError, kfold_split
from .density import DensityThreshold
from .engine import (CounterfactualRequest, audit, check_local_sufficiency,
                     counterfactual_baseline, counterfactual_plausible,
                     model_independence_experiment)
from .experiment import (ExperimentConfig, derive_seed, fit_fold,
                         load_dataset, load_fold_artifacts, run_experiment,
                         write_fold_artifacts)
from .models import fit_tree
from .serialize import dump, dumps, load
from .solver import ObjectiveSpec

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INFEASIBLE = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--model", choices=["softmax", "tree"], default=None)
    p.add_argument("--pca", type=int, default=None, dest="pca_components",
                   help="override PCA component count")
    p.add_argument("--delta-quantile", type=float, default=None)
    p.add_argument("--out", default=None, dest="out_dir")


def _load_config(args) -> ExperimentConfig:
    return ExperimentConfig.from_json(
        args.config, seed=args.seed, model=args.model,
        pca_components=args.pca_components,
        delta_quantile=args.delta_quantile, out_dir=args.out_dir)


def _parse_vector(args) -> np.ndarray:
    if args.x is not None:
        return np.array([float(v) for v in args.x.split(",")])
    raw = Path(args.x_file).read_text(encoding="utf-8").strip()
    sep = "," if "," in raw else None
    return np.array([float(v) for v in raw.replace("[", " ").replace("]", " ")
                     .split(sep)])


def cmd_fit(args) -> int:
    cfg = _load_config(args)
    ds = load_dataset(cfg)
    plan = kfold_split(ds, cfg.cv_folds, seed=derive_seed(cfg.seed, "folds"))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for fold in range(cfg.cv_folds):
        art = fit_fold(ds, plan.train_indices(fold), cfg, fold)
        written.extend(write_fold_artifacts(art, cfg, out))
    dump(plan.to_dict(), out / f"foldplan_seed{cfg.seed}.json")
    dump({"seed": cfg.seed, "cv_folds": cfg.cv_folds,
          "n_classes": ds.n_classes,
          "feature_names": list(ds.feature_names),
          "label_values": list(ds.label_values),
          "config": cfg.to_dict()}, out / "manifest.json")
    print(f"wrote {len(written) + 2} artifact files to {out}")
    return EXIT_OK


def cmd_explain(args) -> int:
    manifest = load(Path(args.artifacts) / "manifest.json")
    art = load_fold_artifacts(args.artifacts, args.fold, manifest["seed"],
                              manifest["n_classes"])
    x = _parse_vector(args)
    target = args.target
    if not 0 <= target < manifest["n_classes"]:
        print(f"target {target} out of range", file=sys.stderr)
        return EXIT_USAGE
    objective = ObjectiveSpec.l1(x) if args.objective == "l1" \
        else ObjectiveSpec.mahalanobis(x)
    delta = None
    if args.mode == "plausible":
        if args.delta is not None:
            delta = DensityThreshold.from_delta(args.delta)
        elif args.delta_prime is not None:
            delta = DensityThreshold.from_delta_prime(args.delta_prime)
        else:
            delta = art.thresholds[target]
    req = CounterfactualRequest(x, target, objective, delta, art.pca)
    gmm = art.gmms[target]
    kde = art.kdes.get(target)
    if args.mode == "baseline":
        result = counterfactual_baseline(req, art.model, kde=kde, gmm=gmm)
    else:
        result = counterfactual_plausible(req, art.model, gmm, kde=kde)
    payload = {"request": {"x": [float(v) for v in x], "target": target,
                           "mode": args.mode,
                           "delta": None if delta is None else delta.to_dict()},
               "result": result.to_dict(), "audit": None}
    if result.found:
        payload["audit"] = audit(result, req, art.model, gmm, kde).to_dict()
    print(dumps(payload))
    return EXIT_OK if result.found else EXIT_INFEASIBLE


def cmd_experiment(args) -> int:
    cfg = _load_config(args)
    report = run_experiment(cfg)
    pooled = report.rows[-1]
    print(f"dataset={pooled['dataset']} model={pooled['model']} "
          f"explained={pooled['n_explained']} "
          f"infeasible={pooled['n_infeasible']} "
          f"runtime={report.runtime_seconds:.1f}s")
    print(f"median KDE log-density: {pooled['median_kde_log_density_without']} "
          f"(baseline) vs {pooled['median_kde_log_density_with']} (plausible)")
    print(f"median L1 distance:     {pooled['median_l1_distance_without']} "
          f"(baseline) vs {pooled['median_l1_distance_with']} (plausible)")
    print(f"outputs in {cfg.out_dir}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    cfg = _load_config(args)
    ds = load_dataset(cfg)
    plan = kfold_split(ds, cfg.cv_folds, seed=derive_seed(cfg.seed, "folds"))
    sample_ids = [int(s) for s in args.samples.split(",") if s.strip()] \
        if args.samples else []
    report = {"samples": [], "independence": None}
    if sample_ids:
        by_fold: dict[int, list[int]] = {}
        for i in sample_ids:
            if not 0 <= i < ds.n_samples:
                print(f"sample id {i} out of range", file=sys.stderr)
                return EXIT_USAGE
            by_fold.setdefault(int(plan.assignments[i]), []).append(i)
        all_records = []
        abs_diffs, rel_diffs = [], []
        for fold, ids in sorted(by_fold.items()):
            train_idx = plan.train_indices(fold)
            train_ds = ds.subset(train_idx)
            art = fit_fold(ds, train_idx, cfg.replace(model="softmax"), fold)
            tree = fit_tree(art.train_latent, cfg.tree_max_depth,
                            cfg.tree_min_leaf)
            X = ds.features[ids]
            y = ds.labels[ids]
            ind = model_independence_experiment(
                train_ds, art.model, tree, art.gmms, art.thresholds, X, y,
                neighbors=cfg.neighbors, pca=art.pca,
                seed=derive_seed(cfg.seed, fold, "diagnose"),
                margin=cfg.margin)
            for local, rec in zip(ids, ind.records):
                entry = {"index": int(local), "fold": fold,
                         "sufficient_softmax": rec["sufficient_a"],
                         "sufficient_tree": rec["sufficient_b"]}
                entry.update({k: rec[k] for k in
                              ("objective_a", "objective_b", "abs_difference",
                               "relative_difference") if k in rec})
                report["samples"].append(entry)
                if "abs_difference" in rec:
                    abs_diffs.append(rec["abs_difference"])
                    rel_diffs.append(rec["relative_difference"])
        report["independence"] = {
            "n_compared": len(abs_diffs),
            "median_abs_difference":
                float(np.median(abs_diffs)) if abs_diffs else None,
            "median_relative_difference":
                float(np.median(rel_diffs)) if rel_diffs else None,
        }
    print(dumps(report))
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="densecf",
                     description="density-constrained counterfactuals")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit per-fold models and densities")
    _add_config_flags(p_fit)
    p_fit.set_defaults(func=cmd_fit)

    p_exp = sub.add_parser("explain", help="explain one input vector")
    p_exp.add_argument("--artifacts", required=True,
                       help="directory written by 'fit'")
    p_exp.add_argument("--fold", type=int, default=0)
    group = p_exp.add_mutually_exclusive_group(required=True)
    group.add_argument("--x", help="comma-separated feature vector")
    group.add_argument("--x-file", help="file holding the feature vector")
    p_exp.add_argument("--target", type=int, required=True)
    p_exp.add_argument("--mode", choices=["baseline", "plausible"],
                       default="plausible")
    p_exp.add_argument("--objective", choices=["l1", "mahalanobis"],
                       default="l1")
    p_exp.add_argument("--delta", type=float, default=None,
                       help="override the stored density threshold")
    p_exp.add_argument("--delta-prime", type=float, default=None,
                       help="override the transformed threshold directly")
    p_exp.set_defaults(func=cmd_explain)

    p_run = sub.add_parser("experiment", help="run the full CV protocol")
    _add_config_flags(p_run)
    p_run.set_defaults(func=cmd_experiment)

    p_diag = sub.add_parser("diagnose",
                            help="local-sufficiency and model-independence report")
    _add_config_flags(p_diag)
    p_diag.add_argument("--samples", default="",
                        help="comma-separated sample indices")
    p_diag.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (IngestError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
