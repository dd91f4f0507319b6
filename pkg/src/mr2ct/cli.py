"""Batch command-line front end.

Subcommands: phantom (synthetic cohort), train (cohort -> model bundle),
predict (model + MR volumes -> CT estimate), evaluate (leave-one-out
report), cv-classifier (10-fold classification metrics).  Every run writes
a manifest.json with the resolved config, seed, and artifact checksums.

Exit codes: 0 success, 2 usage, 3 config, 4 data/format, 5 feature layout,
6 estimation, 1 unexpected.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .boosting import BoostingError, train_rusboost
from .config import RunConfig, load_run_config
from .errors import (
    ConfigError,
    DataError,
    FeatureLayoutError,
    FitError,
    ModelError,
    Mr2ctError,
    VolumeFormatError,
)
from .evaluation import kfold_cv, loo_patient_eval, write_regression_report
from .features import assemble
from .labeling import N_CLASSES
from .phantom import PhantomSpec, default_class_models, generate_phantom
from .pipeline import load_model, predict_ct, save_model, train_pipeline
from .volume import PatientDataset, load_patient, read_volume, write_volume

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_LAYOUT = 5
EXIT_FIT = 6

MR_PREFIX = "mr"
CT_NAME = "ct.hdr"
MASK_NAME = "mask.hdr"
TRUE_LABELS_NAME = "true_labels.hdr"


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(out_dir: Path, command: str, cfg: RunConfig, artifacts: list[Path]) -> None:
    manifest = {
        "command": command,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "artifacts": {
            str(p.relative_to(out_dir)): _sha256(p) for p in sorted(artifacts)
        },
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8"
    )


def _patient_dir_paths(patient_dir: Path) -> tuple[list[Path], Path, Path]:
    mr_paths = sorted(patient_dir.glob(f"{MR_PREFIX}*.hdr"))
    if not mr_paths:
        raise DataError(f"{patient_dir}: no {MR_PREFIX}*.hdr channel headers found")
    return mr_paths, patient_dir / CT_NAME, patient_dir / MASK_NAME


def _load_cohort(cohort_dir: Path) -> list[PatientDataset]:
    if not cohort_dir.is_dir():
        raise DataError(f"cohort directory not found: {cohort_dir}")
    patients = []
    for sub in sorted(p for p in cohort_dir.iterdir() if p.is_dir()):
        mr_paths, ct_path, mask_path = _patient_dir_paths(sub)
        patients.append(load_patient(mr_paths, ct_path, mask_path, patient_id=sub.name))
    if not patients:
        raise DataError(f"cohort directory {cohort_dir} has no patient subdirectories")
    return patients


def _cmd_phantom(args, cfg: RunConfig) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    dims = tuple(int(tok) for tok in args.dims.replace(",", " ").split())
    if len(dims) != 3:
        raise ConfigError(f"--dims needs three counts, got {args.dims!r}")
    spec = PhantomSpec(
        dims=dims,
        n_channels=args.channels,
        class_models=default_class_models(args.channels),
        minority_fraction=args.minority_fraction,
        noise_scale=args.noise_scale,
    )
    cohort = generate_phantom(spec, n_patients=args.patients, seed=cfg.seed)
    artifacts: list[Path] = []
    for item in cohort:
        pdir = out_dir / item.dataset.patient_id
        pdir.mkdir(parents=True, exist_ok=True)
        for c, vol in enumerate(item.dataset.mr_channels):
            write_volume(pdir / f"{MR_PREFIX}{c}.hdr", vol)
            artifacts += [pdir / f"{MR_PREFIX}{c}.hdr", pdir / f"{MR_PREFIX}{c}.raw"]
        write_volume(pdir / CT_NAME, item.dataset.ct)
        write_volume(pdir / MASK_NAME, item.dataset.mask)
        write_volume(pdir / TRUE_LABELS_NAME, item.true_labels)
        artifacts += [
            pdir / CT_NAME, pdir / "ct.raw",
            pdir / MASK_NAME, pdir / "mask.raw",
            pdir / TRUE_LABELS_NAME, pdir / "true_labels.raw",
        ]
    truth = out_dir / "truth.json"
    truth.write_text(
        json.dumps(
            {
                "dims": list(dims),
                "n_channels": args.channels,
                "minority_fraction": args.minority_fraction,
                "noise_scale": args.noise_scale,
                "seed": cfg.seed,
                "class_models": [
                    {
                        "weights": m.weights.tolist(),
                        "means": m.means.tolist(),
                        "covariances": m.covariances.tolist(),
                    }
                    for m in spec.class_models
                ],
            },
            sort_keys=True,
        ),
        encoding="utf-8",
    )
    artifacts.append(truth)
    _write_manifest(out_dir, "phantom", cfg, artifacts)
    print(f"wrote {args.patients} phantom patients to {out_dir}")
    return EXIT_OK


def _cmd_train(args, cfg: RunConfig) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    patients = _load_cohort(Path(args.cohort))
    model, report = train_pipeline(patients, config=cfg.pipeline_config(), seed=cfg.seed)
    model_path = out_dir / "model.json"
    save_model(model, model_path)
    report_path = out_dir / "train_report.json"
    report_path.write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True), encoding="utf-8"
    )
    _write_manifest(out_dir, "train", cfg, [model_path, report_path])
    print(
        f"trained on {report.n_patients} patients ({report.n_rows} voxels); "
        f"selected components per class: {list(model.selected_j)}; "
        f"classifier training error {report.classifier_training_error:.4f}"
    )
    return EXIT_OK


def _cmd_predict(args, cfg: RunConfig) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = load_model(args.model)
    patient_dir = Path(args.patient)
    mr_paths = sorted(patient_dir.glob(f"{MR_PREFIX}*.hdr"))
    if not mr_paths:
        raise DataError(f"{patient_dir}: no {MR_PREFIX}*.hdr channel headers found")
    channels = tuple(read_volume(p) for p in mr_paths)
    mask = read_volume(patient_dir / MASK_NAME)
    result = predict_ct(model, channels, mask)
    write_volume(out_dir / "ct_estimate.hdr", result.ct)
    write_volume(out_dir / "labels.hdr", result.labels)
    summary = out_dir / "predict_report.json"
    summary.write_text(
        json.dumps(
            {
                "n_predicted": result.n_predicted,
                "class_counts": list(result.class_counts),
                "fill_hu": model.config.fill_hu,
            },
            indent=2,
            sort_keys=True,
        ),
        encoding="utf-8",
    )
    artifacts = [
        out_dir / "ct_estimate.hdr", out_dir / "ct_estimate.raw",
        out_dir / "labels.hdr", out_dir / "labels.raw", summary,
    ]
    _write_manifest(out_dir, "predict", cfg, artifacts)
    print(f"predicted {result.n_predicted} voxels; class counts {list(result.class_counts)}")
    return EXIT_OK


def _cmd_evaluate(args, cfg: RunConfig) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    patients = _load_cohort(Path(args.cohort))
    report = loo_patient_eval(
        patients, config=cfg.pipeline_config(), seed=cfg.seed, window=cfg.window_hu
    )
    artifacts = write_regression_report(report, out_dir)
    _write_manifest(out_dir, "evaluate", cfg, artifacts)
    print(
        f"leave-one-out over {len(report.rows)} patients: "
        f"mean MAE {report.mean_mae:.2f} HU, bone-region {report.mean_bone_mae:.2f} HU"
    )
    return EXIT_OK


def _cmd_cv_classifier(args, cfg: RunConfig) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    patients = _load_cohort(Path(args.cohort))
    pcfg = cfg.pipeline_config()
    table = assemble(patients, order=pcfg.neighborhood_order, threshold=pcfg.threshold_hu)
    combined = table.combined()

    def train_fn(xf: np.ndarray, tf: np.ndarray, fold_seed: int):
        ens = train_rusboost(
            xf, tf, tree_config=pcfg.tree, boost_config=pcfg.boost,
            seed=fold_seed, n_labels=N_CLASSES,
        )
        return ens.predict

    metrics, folds = kfold_cv(
        combined, table.t.astype(np.int64), train_fn, k=cfg.cv_folds, seed=cfg.seed
    )
    out = out_dir / "cv_metrics.json"
    out.write_text(
        json.dumps(
            {
                "metrics": metrics.to_dict(),
                "folds": [
                    {"fold": f.fold, "n": f.n, "err": f.err, "counts": list(f.counts)}
                    for f in folds
                ],
            },
            indent=2,
            sort_keys=True,
        ),
        encoding="utf-8",
    )
    _write_manifest(out_dir, "cv-classifier", cfg, [out])
    print(
        f"{cfg.cv_folds}-fold CV: err {metrics.err:.4f}, "
        f"F-score {metrics.f_score:.4f} (minority label {metrics.positive_label})"
    )
    return EXIT_OK


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="config file (key = value lines)")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--threshold-hu", type=float, default=None, dest="threshold_hu")
    parser.add_argument("--order", choices=("first", "second"), default=None)
    parser.add_argument("--trees", type=int, default=None)
    parser.add_argument("--max-splits", type=int, default=None, dest="max_splits")
    parser.add_argument("--min-leaf", type=int, default=None, dest="min_leaf")
    parser.add_argument("--rus-ratio", type=float, default=None, dest="rus_ratio")
    parser.add_argument("--em-restarts", type=int, default=None, dest="em_restarts")
    parser.add_argument("--em-max-iter", type=int, default=None, dest="em_max_iter")
    parser.add_argument("--em-tol", type=float, default=None, dest="em_tol")
    parser.add_argument(
        "--j-candidates", default=None, dest="j_candidates",
        help="comma-separated component counts, e.g. 5,6",
    )
    parser.add_argument("--j-candidates-0", default=None, dest="j_candidates_0")
    parser.add_argument("--j-candidates-1", default=None, dest="j_candidates_1")
    parser.add_argument(
        "--selection-criterion", choices=("mse", "mae"), default=None,
        dest="selection_criterion",
    )
    parser.add_argument("--window-hu", type=float, default=None, dest="window_hu")
    parser.add_argument("--fill-hu", type=float, default=None, dest="fill_hu")
    parser.add_argument("--gmm-max-rows", type=int, default=None, dest="gmm_max_rows")
    parser.add_argument(
        "--classifier-cv-folds", type=int, default=None, dest="classifier_cv_folds"
    )
    parser.add_argument("--cv-folds", type=int, default=None, dest="cv_folds")
    parser.add_argument("--workers", type=int, default=None)


def _collect_overrides(args) -> dict:
    keys = (
        "seed", "threshold_hu", "order", "trees", "max_splits", "min_leaf",
        "rus_ratio", "em_restarts", "em_max_iter", "em_tol",
        "selection_criterion", "window_hu", "fill_hu", "gmm_max_rows",
        "classifier_cv_folds", "cv_folds", "workers",
    )
    overrides = {k: getattr(args, k, None) for k in keys}
    for key in ("j_candidates", "j_candidates_0", "j_candidates_1"):
        raw = getattr(args, key, None)
        if raw is not None:
            try:
                overrides[key] = tuple(int(tok) for tok in raw.replace(",", " ").split())
            except ValueError as exc:
                raise ConfigError(f"--{key.replace('_', '-')}: {exc}") from exc
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mr2ct",
        description="CT volume estimation from MR volumes: tissue classification "
        "plus per-tissue mixture regression.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic cohort with known truth")
    p.add_argument("--out", required=True)
    p.add_argument("--patients", type=int, default=4)
    p.add_argument("--dims", default="32,32,32")
    p.add_argument("--channels", type=int, default=4)
    p.add_argument("--minority-fraction", type=float, default=0.1849,
                   dest="minority_fraction")
    p.add_argument("--noise-scale", type=float, default=3.0, dest="noise_scale")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_phantom)

    p = sub.add_parser("train", help="train a model on a cohort directory")
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", help="predict a CT volume for one patient")
    p.add_argument("--model", required=True)
    p.add_argument("--patient", required=True, help="directory with mr*.hdr and mask.hdr")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("evaluate", help="leave-one-out evaluation over a cohort")
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("cv-classifier", help="k-fold CV of the tissue classifier")
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_cv_classifier)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    try:
        cfg = load_run_config(args.config, _collect_overrides(args))
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (VolumeFormatError, DataError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FeatureLayoutError as exc:
        print(f"layout error: {exc}", file=sys.stderr)
        return EXIT_LAYOUT
    except (FitError, BoostingError, ModelError) as exc:
        print(f"estimation error: {exc}", file=sys.stderr)
        return EXIT_FIT
    except Mr2ctError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    raise SystemExit(main())
