"""The stacked two-stage pipeline: per-unit sub-models, boundary-safe
sub-predictions, meta-feature aggregation, and the two leak-free nested
cross-validation protocols."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ._util import derive_seed, pmap
from .errors import DataError, ExperimentError
from .features import Dataset, UnitPartition
from .forest import (
    ForestModel,
    ForestParams,
    GridSearchResult,
    ParamGrid,
    grid_search,
    stratified_fold_ids,
    train_forest,
)
from .metrics import ConfusionMatrix, MetricSuite, confusion, mcc, suite

ABSENT_CODE = -1


@dataclass(frozen=True)
class SubPrediction:
    """The only object allowed across a unit boundary."""

    part_id: str
    unit_id: str
    label: str
    certainty: float


@dataclass(frozen=True)
class MetaFeatureRow:
    """Fixed-width aggregation of all units' sub-predictions for one item.

    One (label_code, certainty) slot per expected unit; units that did not
    report get (ABSENT_CODE, marker)."""

    part_id: str
    slots: tuple[tuple[int, float], ...]

    def flat(self) -> list[float]:
        out: list[float] = []
        for code, certainty in self.slots:
            out.append(float(code))
            out.append(float(certainty))
        return out


@dataclass(frozen=True)
class CvPlan:
    outer_folds: int = 3
    inner_folds: int = 2
    meta_folds: int = 3
    stratified: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.outer_folds < 2 or self.inner_folds < 2 or self.meta_folds < 2:
            raise DataError("all fold counts must be at least 2")
        if not self.stratified:
            raise DataError("only stratified folding is implemented")


@dataclass(frozen=True)
class FoldRecord:
    """Complete fold assignment of one item, for leak auditing."""

    item_id: str
    test_fold: int
    roles: tuple[str, ...]  # one role per outer fold


@dataclass(frozen=True)
class ModelReport:
    name: str
    confusion: ConfusionMatrix
    metrics: MetricSuite
    fold_mccs: tuple[float, ...]
    best_params: tuple[ForestParams, ...]
    grid_results: tuple[GridSearchResult, ...]
    n_evaluated: int


@dataclass(frozen=True)
class EvaluationReport:
    protocol: str
    header: str
    plan: CvPlan
    model: ModelReport
    sub_models: dict[str, ModelReport] = field(default_factory=dict)
    fold_records: tuple[FoldRecord, ...] = ()
    warnings: tuple[str, ...] = ()
    scoring_subpredictions: tuple[SubPrediction, ...] = ()
    meta_outputs: tuple[tuple[str, str, float], ...] = ()

    def best_sub_mcc(self) -> float | None:
        if not self.sub_models:
            return None
        return max(r.metrics.mcc for r in self.sub_models.values())


_DEFAULTS_NOTE = "forest defaults: bootstrap resampling, sqrt features per split, min leaf 1"


def _require_imputed(dataset: Dataset) -> float:
    if dataset.marker is None or np.isnan(dataset.values).any():
        raise DataError("pipeline requires an imputed dataset (no missing cells)")
    return float(dataset.marker)


def train_subunits(
    dataset: Dataset,
    partitions: Sequence[UnitPartition],
    params_per_unit: Mapping[str, ForestParams] | ForestParams,
    min_covered: int = 6,
) -> dict[str, ForestModel]:
    """One forest per unit, trained on the items that visited it."""
    _require_imputed(dataset)
    models: dict[str, ForestModel] = {}
    for part in partitions:
        params = (
            params_per_unit
            if isinstance(params_per_unit, ForestParams)
            else params_per_unit[part.unit_id]
        )
        covered = np.flatnonzero(part.coverage)
        if len(covered) < min_covered:
            warnings.warn(
                f"unit {part.unit_id} has only {len(covered)} covered items "
                f"(need {min_covered}); excluded",
                stacklevel=2,
            )
            continue
        X = dataset.values[np.ix_(covered, part.column_indices)]
        models[part.unit_id] = train_forest(
            X, dataset.labels[covered], params, classes=dataset.classes
        )
    return models


def emit_subpredictions(
    models: Mapping[str, ForestModel],
    dataset: Dataset,
    partitions: Sequence[UnitPartition],
    item_indices: Sequence[int] | np.ndarray | None = None,
) -> list[SubPrediction]:
    """One SubPrediction per (visited unit, item); nothing for unvisited pairs."""
    _require_imputed(dataset)
    if item_indices is None:
        item_indices = np.arange(dataset.n_items)
    item_indices = np.asarray(item_indices, dtype=np.int64)
    out: list[SubPrediction] = []
    for part in partitions:
        model = models.get(part.unit_id)
        if model is None:
            continue
        covered = item_indices[part.coverage[item_indices]]
        if len(covered) == 0:
            continue
        X = dataset.values[np.ix_(covered, part.column_indices)]
        probs = model.predict_proba_matrix(X)
        picks = np.argmax(probs, axis=1)
        certainties = probs[np.arange(len(covered)), picks]
        for row, item in enumerate(covered):
            out.append(
                SubPrediction(
                    part_id=dataset.items[item],
                    unit_id=part.unit_id,
                    label=dataset.classes[picks[row]],
                    certainty=float(certainties[row]),
                )
            )
    return out


def aggregate(
    subpredictions: Sequence[SubPrediction],
    expected_units: Sequence[str],
    marker: float,
    classes: Sequence[str],
    part_ids: Sequence[str] | None = None,
) -> list[MetaFeatureRow]:
    """Group sub-predictions by part into fixed-width rows (unit order).

    ``part_ids`` fixes the row universe and order; parts without any message
    get an all-absent row. Duplicate (part, unit) messages keep the last one.
    """
    unit_pos = {u: i for i, u in enumerate(expected_units)}
    class_code = {name: i for i, name in enumerate(classes)}
    slots: dict[str, list[tuple[int, float]]] = {}
    order: list[str] = []
    if part_ids is not None:
        for pid in part_ids:
            slots[pid] = [(ABSENT_CODE, marker)] * len(expected_units)
            order.append(pid)
    seen: set[tuple[str, str]] = set()
    for sp in subpredictions:
        if sp.unit_id not in unit_pos:
            raise DataError(f"sub-prediction from unexpected unit {sp.unit_id!r}")
        if sp.part_id not in slots:
            if part_ids is not None:
                raise DataError(f"sub-prediction for unknown part {sp.part_id!r}")
            slots[sp.part_id] = [(ABSENT_CODE, marker)] * len(expected_units)
            order.append(sp.part_id)
        key = (sp.part_id, sp.unit_id)
        if key in seen:
            warnings.warn(
                f"duplicate sub-prediction for part {sp.part_id} unit {sp.unit_id}; "
                "keeping the later one",
                stacklevel=2,
            )
        seen.add(key)
        slots[sp.part_id][unit_pos[sp.unit_id]] = (
            class_code[sp.label],
            float(sp.certainty),
        )
    return [MetaFeatureRow(pid, tuple(slots[pid])) for pid in order]


def rows_to_matrix(rows: Sequence[MetaFeatureRow]) -> np.ndarray:
    if not rows:
        return np.empty((0, 0))
    return np.array([r.flat() for r in rows], dtype=np.float64)


def _single_class(y: np.ndarray) -> bool:
    return len(np.unique(y)) < 2


def _model_report(
    name: str,
    classes: tuple[str, ...],
    per_fold: list[tuple[np.ndarray, np.ndarray]],
    best_params: list[ForestParams],
    grid_results: list[GridSearchResult],
) -> ModelReport:
    y_true = np.concatenate([t for t, _ in per_fold]) if per_fold else np.zeros(0, dtype=np.int64)
    y_pred = np.concatenate([p for _, p in per_fold]) if per_fold else np.zeros(0, dtype=np.int64)
    cm = confusion(y_true, y_pred, classes)
    fold_mccs = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for t, p in per_fold:
            fold_mccs.append(mcc(confusion(t, p, classes)))
    return ModelReport(
        name=name,
        confusion=cm,
        metrics=suite(cm),
        fold_mccs=tuple(fold_mccs),
        best_params=tuple(best_params),
        grid_results=tuple(grid_results),
        n_evaluated=len(y_true),
    )


def nested_cv_complete(
    dataset: Dataset,
    grid: ParamGrid,
    plan: CvPlan,
    name: str = "complete",
    item_indices: Sequence[int] | np.ndarray | None = None,
    column_indices: Sequence[int] | np.ndarray | None = None,
) -> EvaluationReport:
    """Single-stage nested CV: grid search inside each outer training fold,
    refit the winner, score the outer test fold, pool over folds."""
    _require_imputed(dataset)
    items = np.asarray(
        item_indices if item_indices is not None else np.arange(dataset.n_items),
        dtype=np.int64,
    )
    cols = np.asarray(
        column_indices if column_indices is not None else np.arange(dataset.n_columns),
        dtype=np.int64,
    )
    X = dataset.values[np.ix_(items, cols)]
    y = dataset.labels[items]
    if len(items) < plan.outer_folds * 2:
        raise ExperimentError(f"{name}: too few items ({len(items)}) for {plan.outer_folds} outer folds")
    outer = stratified_fold_ids(y, plan.outer_folds, derive_seed(plan.seed, name, "outer"))

    per_fold: list[tuple[np.ndarray, np.ndarray]] = []
    best_params: list[ForestParams] = []
    grid_results: list[GridSearchResult] = []
    notes: list[str] = []
    for f in range(plan.outer_folds):
        train_loc = np.flatnonzero(outer != f)
        test_loc = np.flatnonzero(outer == f)
        if _single_class(y[train_loc]) or _single_class(y[test_loc]):
            raise ExperimentError(
                f"{name}: outer fold {f} has a single class; cannot evaluate"
            )
        gs = grid_search(
            grid,
            X[train_loc],
            y[train_loc],
            inner_folds=plan.inner_folds,
            seed=derive_seed(plan.seed, name, "grid", f),
            base_params=ForestParams(
                1, 1, seed=derive_seed(plan.seed, name, "refit", f)
            ),
            classes=dataset.classes,
        )
        notes.extend(f"fold {f}: {w}" for w in gs.warnings)
        model = train_forest(X[train_loc], y[train_loc], gs.best, classes=dataset.classes)
        y_hat = model.predict_labels(X[test_loc])
        per_fold.append((y[test_loc], y_hat))
        best_params.append(gs.best)
        grid_results.append(gs)

    records = tuple(
        FoldRecord(
            item_id=dataset.items[items[i]],
            test_fold=int(outer[i]),
            roles=tuple(
                "test" if outer[i] == f else "train" for f in range(plan.outer_folds)
            ),
        )
        for i in range(len(items))
    )
    header = (
        f"protocol=complete outer={plan.outer_folds} stratified folds; per outer fold: "
        f"{plan.inner_folds}-fold grid search on the training side, winner refit on the "
        f"full training side, scored on the held-out fold; outer-test predictions pooled; "
        f"{_DEFAULTS_NOTE}"
    )
    return EvaluationReport(
        protocol="complete",
        header=header,
        plan=plan,
        model=_model_report(name, dataset.classes, per_fold, best_params, grid_results),
        fold_records=records,
        warnings=tuple(notes),
    )


def _trainable(y: np.ndarray, folds: int) -> bool:
    values, counts = np.unique(y, return_counts=True)
    return len(values) >= 2 and counts.min() >= folds


def nested_cv_meta(
    dataset: Dataset,
    partitions: Sequence[UnitPartition],
    grid: ParamGrid,
    plan: CvPlan,
) -> EvaluationReport:
    """Two-stage nested CV adapted to stacking, leak-free.

    Per outer fold the training side splits into inner halves A and B:
    sub-models are grid-searched (inner_folds-fold) and refit on their units'
    covered A items; their predictions for B build the meta training rows;
    the meta model is grid-searched on those rows (meta_folds-fold) and refit
    on all of B. Scoring sends the outer-test items through the A-trained
    sub-models and the B-trained meta model. No item ever contributes to
    both stages' training within a fold.
    """
    marker = _require_imputed(dataset)
    y = dataset.labels
    n = dataset.n_items
    classes = dataset.classes
    expected_units = [p.unit_id for p in partitions]
    if n < plan.outer_folds * 2:
        raise ExperimentError(f"too few items ({n}) for {plan.outer_folds} outer folds")
    outer = stratified_fold_ids(y, plan.outer_folds, derive_seed(plan.seed, "meta", "outer"))

    meta_per_fold: list[tuple[np.ndarray, np.ndarray]] = []
    meta_best: list[ForestParams] = []
    meta_grids: list[GridSearchResult] = []
    sub_per_fold: dict[str, list[tuple[np.ndarray, np.ndarray]]] = {
        u: [] for u in expected_units
    }
    sub_best: dict[str, list[ForestParams]] = {u: [] for u in expected_units}
    sub_grids: dict[str, list[GridSearchResult]] = {u: [] for u in expected_units}
    notes: list[str] = []
    scoring_preds: list[SubPrediction] = []
    meta_outputs: list[tuple[str, str, float]] = []
    inner_role = np.full(n, -1, dtype=np.int64)  # A=0, B=1 per item in its train folds
    role_by_fold = np.full((plan.outer_folds, n), "", dtype=object)

    for f in range(plan.outer_folds):
        train_idx = np.flatnonzero(outer != f)
        test_idx = np.flatnonzero(outer == f)
        if _single_class(y[train_idx]) or _single_class(y[test_idx]):
            raise ExperimentError(f"outer fold {f} has a single class; cannot evaluate")
        inner = stratified_fold_ids(
            y[train_idx], plan.inner_folds, derive_seed(plan.seed, "meta", "inner", f)
        )
        a_idx = train_idx[inner != plan.inner_folds - 1]
        b_idx = train_idx[inner == plan.inner_folds - 1]
        assert len(np.intersect1d(a_idx, b_idx)) == 0
        assert len(a_idx) + len(b_idx) == len(train_idx)
        role_by_fold[f, a_idx] = "sub-train"
        role_by_fold[f, b_idx] = "meta-train"
        role_by_fold[f, test_idx] = "test"
        if _single_class(y[b_idx]):
            raise ExperimentError(
                f"outer fold {f}: meta training half has a single class"
            )

        def _fit_unit(part: UnitPartition):
            cov_a = a_idx[part.coverage[a_idx]]
            if len(cov_a) < 2 * plan.inner_folds or not _trainable(y[cov_a], plan.inner_folds):
                return part.unit_id, None, None, (
                    f"fold {f}: unit {part.unit_id} untrainable on the sub-model half "
                    f"({len(cov_a)} covered items); its slot is absent-coded"
                )
            Xu = dataset.values[np.ix_(cov_a, part.column_indices)]
            gs = grid_search(
                grid,
                Xu,
                y[cov_a],
                inner_folds=plan.inner_folds,
                seed=derive_seed(plan.seed, "meta", "sub-grid", f, part.unit_id),
                base_params=ForestParams(
                    1, 1, seed=derive_seed(plan.seed, "meta", "sub-refit", f, part.unit_id)
                ),
                classes=classes,
            )
            model = train_forest(Xu, y[cov_a], gs.best, classes=classes)
            return part.unit_id, model, gs, None

        models: dict[str, ForestModel] = {}
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fitted = pmap(_fit_unit, list(partitions))
        for unit_id, model, gs, note in fitted:
            if note:
                warnings.warn(note, stacklevel=2)
                notes.append(note)
                continue
            models[unit_id] = model
            sub_best[unit_id].append(gs.best)
            sub_grids[unit_id].append(gs)
            notes.extend(f"fold {f} unit {unit_id}: {w}" for w in gs.warnings)

        # stage 2: meta rows from the B half
        preds_b = emit_subpredictions(models, dataset, partitions, b_idx)
        rows_b = aggregate(
            preds_b, expected_units, marker, classes,
            part_ids=[dataset.items[i] for i in b_idx],
        )
        Xm_b = rows_to_matrix(rows_b)
        gs_meta = grid_search(
            grid,
            Xm_b,
            y[b_idx],
            inner_folds=plan.meta_folds,
            seed=derive_seed(plan.seed, "meta", "meta-grid", f),
            base_params=ForestParams(
                1, 1, seed=derive_seed(plan.seed, "meta", "meta-refit", f)
            ),
            classes=classes,
        )
        notes.extend(f"fold {f} meta: {w}" for w in gs_meta.warnings)
        meta_model = train_forest(Xm_b, y[b_idx], gs_meta.best, classes=classes)
        meta_best.append(gs_meta.best)
        meta_grids.append(gs_meta)

        # scoring: outer test through A-trained subs, then the meta model
        preds_t = emit_subpredictions(models, dataset, partitions, test_idx)
        scoring_preds.extend(preds_t)
        rows_t = aggregate(
            preds_t, expected_units, marker, classes,
            part_ids=[dataset.items[i] for i in test_idx],
        )
        Xm_t = rows_to_matrix(rows_t)
        probs_t = meta_model.predict_proba_matrix(Xm_t)
        picks = np.argmax(probs_t, axis=1)
        meta_per_fold.append((y[test_idx], picks))
        for pos, i in enumerate(test_idx):
            meta_outputs.append(
                (dataset.items[i], classes[picks[pos]], float(probs_t[pos, picks[pos]]))
            )

        # per-unit outer-test reports (covered items only)
        by_unit: dict[str, list[SubPrediction]] = {}
        for sp in preds_t:
            by_unit.setdefault(sp.unit_id, []).append(sp)
        class_code = {name: i for i, name in enumerate(classes)}
        item_pos = {dataset.items[i]: i for i in test_idx}
        for unit_id, preds in by_unit.items():
            yt = np.array([y[item_pos[sp.part_id]] for sp in preds], dtype=np.int64)
            yp = np.array([class_code[sp.label] for sp in preds], dtype=np.int64)
            sub_per_fold[unit_id].append((yt, yp))

    records = tuple(
        FoldRecord(
            item_id=dataset.items[i],
            test_fold=int(outer[i]),
            roles=tuple(role_by_fold[f, i] for f in range(plan.outer_folds)),
        )
        for i in range(n)
    )
    header = (
        f"protocol=meta outer={plan.outer_folds} stratified folds; per outer fold the "
        f"training side splits into halves A/B ({plan.inner_folds} inner folds): sub-models "
        f"grid-searched ({plan.inner_folds}-fold) and refit on covered A items; meta model "
        f"grid-searched ({plan.meta_folds}-fold) on B's aggregated sub-predictions and refit "
        f"on all B rows; scored on the outer test fold via A-trained sub-models; pooled; "
        f"{_DEFAULTS_NOTE}"
    )
    sub_models = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for u in expected_units:
            if sub_per_fold[u]:
                sub_models[u] = _model_report(
                    f"sub {u}", classes, sub_per_fold[u], sub_best[u], sub_grids[u]
                )
    return EvaluationReport(
        protocol="meta",
        header=header,
        plan=plan,
        model=_model_report("meta", classes, meta_per_fold, meta_best, meta_grids),
        sub_models=sub_models,
        fold_records=records,
        warnings=tuple(notes),
        scoring_subpredictions=tuple(scoring_preds),
        meta_outputs=tuple(meta_outputs),
    )


def write_fold_audit(report: EvaluationReport, path: str | Path) -> None:
    """One line per item: id, outer test fold, per-fold role assignments."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("item_id,test_fold,roles\n")
        for rec in report.fold_records:
            roles = ";".join(f"{f}:{r}" for f, r in enumerate(rec.roles))
            fh.write(f"{rec.item_id},{rec.test_fold},{roles}\n")


def verify_leak_freedom(report: EvaluationReport) -> bool:
    """Check from the bookkeeping that no item fed both training stages of a
    fold and that every item is tested exactly once."""
    for rec in report.fold_records:
        if rec.roles[rec.test_fold] != "test":
            return False
        if sum(1 for r in rec.roles if r == "test") != 1:
            return False
        if report.protocol == "meta":
            for r in rec.roles:
                if r not in ("test", "sub-train", "meta-train"):
                    return False
    return True
