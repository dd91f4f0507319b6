"""End-to-end training and prediction.

Training labels every voxel from its CT intensity, selects a per-class
mixture order on held-out data, and trains the boosted classifier on the
combined raw + neighborhood features.  Prediction classifies each masked
voxel and evaluates the winning class's conditional regression on the raw
features; unmasked voxels receive the configured fill value.

The regressors intentionally see only the raw channel intensities: the
joint mixtures are defined over (y, x) while spatial context belongs to the
classifier.  A config flag can widen the regressors to the combined features
for experiments.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .boosting import BoostConfig, BoostedEnsemble, train_rusboost
from .errors import DataError, FeatureLayoutError, ModelError
from .features import FeatureLayout, assemble, extract_feature_matrix
from .labeling import DEFAULT_THRESHOLD_HU, N_CLASSES
from .mixture import (
    EmConfig,
    SelectionReport,
    TissueGMM,
    conditional_expectation_many,
    select_model,
)
from .seeding import derive_seed, rng_for
from .tree import TreeConfig
from .volume import PatientDataset, Volume, volume_like

BUNDLE_FORMAT_VERSION = 1
BUNDLE_KIND = "mr2ct-model-bundle"

_SALT_VAL_PATIENT = 101
_SALT_GMM = 102
_SALT_BOOST = 103
_SALT_CV = 104
_SALT_SUBSAMPLE = 105


@dataclass(frozen=True)
class PipelineConfig:
    threshold_hu: float = DEFAULT_THRESHOLD_HU
    neighborhood_order: str = "second"
    j_candidates: tuple[tuple[int, ...], ...] = ((5, 6), (5, 6))
    selection_criterion: str = "mse"
    em: EmConfig = field(default_factory=EmConfig)
    tree: TreeConfig = field(default_factory=TreeConfig)
    boost: BoostConfig = field(default_factory=BoostConfig)
    fill_hu: float = -1000.0
    gmm_max_rows: int = 0            # 0 = no cap; otherwise seeded subsample per class
    classifier_cv_folds: int = 0     # 0 = skip CV inside the training report
    combined_regressors: bool = False  # experiment flag: regressors on x^c
    soft_label_mixing: bool = False    # experiment flag: mix classes by vote share
    workers: int = 1                   # accepted for config parity; execution is vectorized

    def __post_init__(self):
        if not np.isfinite(self.threshold_hu):
            raise ValueError("threshold must be finite")
        if len(self.j_candidates) != N_CLASSES or any(
            len(c) == 0 for c in self.j_candidates
        ):
            raise ValueError("j_candidates needs a non-empty grid per class")
        if self.selection_criterion not in ("mse", "mae"):
            raise ValueError("selection_criterion must be 'mse' or 'mae'")
        if self.gmm_max_rows < 0 or self.classifier_cv_folds < 0:
            raise ValueError("row caps and fold counts must be >= 0")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def to_dict(self) -> dict:
        return {
            "threshold_hu": self.threshold_hu,
            "neighborhood_order": self.neighborhood_order,
            "j_candidates": [list(c) for c in self.j_candidates],
            "selection_criterion": self.selection_criterion,
            "em": dict(self.em.__dict__),
            "tree": dict(self.tree.__dict__),
            "boost": dict(self.boost.__dict__),
            "fill_hu": self.fill_hu,
            "gmm_max_rows": self.gmm_max_rows,
            "classifier_cv_folds": self.classifier_cv_folds,
            "combined_regressors": self.combined_regressors,
            "soft_label_mixing": self.soft_label_mixing,
            "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return cls(
            threshold_hu=float(d["threshold_hu"]),
            neighborhood_order=str(d["neighborhood_order"]),
            j_candidates=tuple(tuple(int(j) for j in c) for c in d["j_candidates"]),
            selection_criterion=str(d["selection_criterion"]),
            em=EmConfig(**d["em"]),
            tree=TreeConfig(**d["tree"]),
            boost=BoostConfig(**d["boost"]),
            fill_hu=float(d["fill_hu"]),
            gmm_max_rows=int(d["gmm_max_rows"]),
            classifier_cv_folds=int(d["classifier_cv_folds"]),
            combined_regressors=bool(d["combined_regressors"]),
            soft_label_mixing=bool(d["soft_label_mixing"]),
            workers=int(d["workers"]),
        )


@dataclass(frozen=True)
class PipelineModel:
    classifier: BoostedEnsemble
    regressors: TissueGMM
    config: PipelineConfig
    layout: FeatureLayout
    seed: int
    selected_j: tuple[int, ...]


@dataclass
class TrainReport:
    n_patients: int
    n_rows: int
    label_counts: list[int]
    minority_fraction: float
    validation_patient: str
    selection: list[SelectionReport]
    classifier_training_error: float
    classifier_cv: dict | None
    seed: int

    def to_dict(self) -> dict:
        return {
            "n_patients": self.n_patients,
            "n_rows": self.n_rows,
            "label_counts": self.label_counts,
            "minority_fraction": self.minority_fraction,
            "validation_patient": self.validation_patient,
            "selection": [s.to_dict() for s in self.selection],
            "classifier_training_error": self.classifier_training_error,
            "classifier_cv": self.classifier_cv,
            "seed": self.seed,
        }


def _subsample(rows: np.ndarray, cap: int, seed: int) -> np.ndarray:
    if cap <= 0 or rows.shape[0] <= cap:
        return rows
    keep = rng_for(seed).choice(rows.shape[0], size=cap, replace=False)
    return rows[np.sort(keep)]


def train_pipeline(
    patients: Sequence[PatientDataset],
    config: PipelineConfig = PipelineConfig(),
    seed: int = 0,
) -> tuple[PipelineModel, TrainReport]:
    """Train classifier and per-class regressors on a cohort.

    Patients are processed in sorted patient_id order, so the result does
    not depend on how the cohort list happens to be ordered.  One patient,
    chosen by seed, is held out of the mixture fits to score the candidate
    component counts.
    """
    if len(patients) < 2:
        raise DataError("training needs at least two patients for a validation split")
    ids = [p.patient_id for p in patients]
    if len(set(ids)) != len(ids):
        raise DataError(f"duplicate patient ids in cohort: {sorted(ids)}")
    ordered = sorted(patients, key=lambda p: p.patient_id)
    table = assemble(ordered, order=config.neighborhood_order, threshold=config.threshold_hu)

    counts = np.bincount(table.t, minlength=N_CLASSES)
    if np.any(counts == 0):
        raise DataError(
            f"both tissue classes must be present; label counts are {counts.tolist()}"
        )

    val_pick = int(rng_for(seed, _SALT_VAL_PATIENT).integers(len(ordered)))
    val_id = ordered[val_pick].patient_id
    is_val = table.patient_ids == val_id

    reg_features = table.combined() if config.combined_regressors else table.x
    joint = np.column_stack([table.y, reg_features])

    regressors: list = []
    selection_reports: list[SelectionReport] = []
    selected_j: list[int] = []
    for k in range(N_CLASSES):
        in_class = table.t == k
        train_rows = np.flatnonzero(in_class & ~is_val)
        val_rows = np.flatnonzero(in_class & is_val)
        if val_rows.size == 0:
            # held-out patient lacks this class: fall back to a seeded voxel split
            all_rows = np.flatnonzero(in_class)
            perm = rng_for(seed, _SALT_VAL_PATIENT, k).permutation(all_rows.shape[0])
            cut = max(1, all_rows.shape[0] // 4)
            val_rows = all_rows[np.sort(perm[:cut])]
            train_rows = all_rows[np.sort(perm[cut:])]
        train_rows = _subsample(
            train_rows, config.gmm_max_rows, derive_seed(seed, _SALT_SUBSAMPLE, k)
        )
        model, j_star, report = select_model(
            joint[train_rows],
            joint[val_rows],
            config.j_candidates[k],
            config=config.em,
            seed=derive_seed(seed, _SALT_GMM, k),
            criterion=config.selection_criterion,
        )
        regressors.append(model)
        selection_reports.append(report)
        selected_j.append(j_star)

    layout = table.layout
    combined = table.combined()
    ensemble = train_rusboost(
        combined,
        table.t.astype(np.int64),
        tree_config=config.tree,
        boost_config=config.boost,
        seed=derive_seed(seed, _SALT_BOOST),
        n_labels=N_CLASSES,
        layout=layout.to_dict(),
    )
    train_err = float(np.mean(ensemble.predict(combined) != table.t))

    cv_summary = None
    if config.classifier_cv_folds >= 2:
        from .evaluation import kfold_cv  # local import to avoid a module cycle

        def train_fn(xf: np.ndarray, tf: np.ndarray, fold_seed: int):
            ens = train_rusboost(
                xf, tf, tree_config=config.tree, boost_config=config.boost,
                seed=fold_seed, n_labels=N_CLASSES,
            )
            return ens.predict

        metrics, _ = kfold_cv(
            combined,
            table.t.astype(np.int64),
            train_fn,
            k=config.classifier_cv_folds,
            seed=derive_seed(seed, _SALT_CV),
        )
        cv_summary = metrics.to_dict()

    model = PipelineModel(
        classifier=ensemble,
        regressors=TissueGMM(models=tuple(regressors)),
        config=config,
        layout=layout,
        seed=seed,
        selected_j=tuple(selected_j),
    )
    report = TrainReport(
        n_patients=len(ordered),
        n_rows=len(table),
        label_counts=counts.tolist(),
        minority_fraction=float(counts[1] / counts.sum()),
        validation_patient=val_id,
        selection=selection_reports,
        classifier_training_error=train_err,
        classifier_cv=cv_summary,
        seed=seed,
    )
    return model, report


@dataclass(frozen=True)
class PredictionResult:
    ct: Volume
    labels: Volume
    n_predicted: int
    class_counts: tuple[int, ...]


def predict_ct(
    model: PipelineModel,
    mr_channels: Sequence[Volume],
    mask: Volume,
) -> PredictionResult:
    """Estimate a CT volume and the hard label map for new MR channels."""
    channels = tuple(mr_channels)
    for i, vol in enumerate(channels):
        if not vol.same_geometry(mask):
            raise DataError(f"MR channel {i} dims/spacing do not match the mask")
    mask_vals = np.unique(mask.data)
    if not np.all(np.isin(mask_vals, (0.0, 1.0))):
        raise DataError("mask must contain exactly 0 or 1")
    if len(channels) != model.layout.n_channels:
        raise FeatureLayoutError(
            f"model was trained on {model.layout.n_channels} channels, "
            f"got {len(channels)}"
        )

    fill = model.config.fill_hu
    ct_out = np.full(mask.n_voxels, fill, dtype=np.float64)
    label_out = np.zeros(mask.n_voxels, dtype=np.float64)
    idx = np.flatnonzero(mask.data == 1.0)
    class_counts = [0] * N_CLASSES
    if idx.size:
        flat_idx, x_raw, x_nei = extract_feature_matrix(
            channels, mask, model.layout.order
        )
        combined = np.hstack([x_raw, x_nei])
        if combined.shape[1] != model.classifier.n_features:
            raise FeatureLayoutError(
                f"feature layout mismatch: input yields {combined.shape[1]} columns, "
                f"classifier expects {model.classifier.n_features}"
            )
        reg_features = combined if model.config.combined_regressors else x_raw
        if model.config.soft_label_mixing:
            scores = model.classifier.scores(combined)
            share = scores / scores.sum(axis=1, keepdims=True)
            y_mix = np.zeros(flat_idx.shape[0])
            for k in range(N_CLASSES):
                y_k, _ = conditional_expectation_many(model.regressors[k], reg_features)
                y_mix += share[:, k] * y_k
            ct_out[flat_idx] = y_mix
            hard = np.argmax(scores, axis=1)
        else:
            hard = model.classifier.predict(combined)
            for k in range(N_CLASSES):
                rows = np.flatnonzero(hard == k)
                if rows.size:
                    y_hat, _ = conditional_expectation_many(
                        model.regressors[k], reg_features[rows]
                    )
                    ct_out[flat_idx[rows]] = y_hat
        label_out[flat_idx] = hard
        for k in range(N_CLASSES):
            class_counts[k] = int(np.sum(hard == k))

    return PredictionResult(
        ct=volume_like(mask, ct_out),
        labels=volume_like(mask, label_out),
        n_predicted=int(idx.size),
        class_counts=tuple(class_counts),
    )


def model_to_dict(model: PipelineModel) -> dict:
    return {
        "format_version": BUNDLE_FORMAT_VERSION,
        "kind": BUNDLE_KIND,
        "seed": model.seed,
        "selected_j": list(model.selected_j),
        "config": model.config.to_dict(),
        "layout": model.layout.to_dict(),
        "classifier": model.classifier.to_dict(),
        "regressors": model.regressors.to_dict(),
    }


def model_from_dict(d: dict) -> PipelineModel:
    if d.get("kind") != BUNDLE_KIND or int(d.get("format_version", -1)) != BUNDLE_FORMAT_VERSION:
        raise ModelError(
            f"not a model bundle of format version {BUNDLE_FORMAT_VERSION}: "
            f"kind={d.get('kind')!r} version={d.get('format_version')!r}"
        )
    return PipelineModel(
        classifier=BoostedEnsemble.from_dict(d["classifier"]),
        regressors=TissueGMM.from_dict(d["regressors"]),
        config=PipelineConfig.from_dict(d["config"]),
        layout=FeatureLayout.from_dict(d["layout"]),
        seed=int(d["seed"]),
        selected_j=tuple(int(j) for j in d["selected_j"]),
    )


def save_model(model: PipelineModel, path: str | Path) -> None:
    """Write the bundle as deterministic JSON (same model, same bytes)."""
    text = json.dumps(model_to_dict(model), sort_keys=True, separators=(",", ":"))
    Path(path).write_text(text, encoding="utf-8")


def load_model(path: str | Path) -> PipelineModel:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
