"""Scenario benchmarking (isolated / stacked / shared pool), the additive
noising baseline, and the privacy-cost comparison."""

from __future__ import annotations

from dataclasses import dataclass, replace as dc_replace
from pathlib import Path
from typing import Sequence

import numpy as np

from ._util import derive_seed
from .errors import DataError
from .features import Dataset, UnitPartition, partition_by_unit
from .forest import ParamGrid
from .metrics import MetricSuite
from .stacking import (
    CvPlan,
    EvaluationReport,
    nested_cv_complete,
    nested_cv_meta,
)
from .transport import (
    AuditVerdict,
    BoundaryMessage,
    Transcript,
    TrafficSummary,
    VolumeAccount,
    account_volume,
    audit_confidentiality,
    build_raw_value_index,
    measure_traffic,
    meta_prediction_message,
    raw_row_message,
    sub_prediction_message,
)

SUB_OUTPUT_FEATURES = 2  # each sub-model ships (prediction, probability)


@dataclass(frozen=True)
class ScenarioReport:
    scenario: int
    eval_reports: dict[str, EvaluationReport]
    volume: VolumeAccount
    traffic: TrafficSummary
    audit: AuditVerdict
    transcript: Transcript

    def model_reports(self):
        """Flattened name -> ModelReport view across the scenario's models."""
        out = {}
        for rep in self.eval_reports.values():
            out[rep.model.name] = rep.model
            for unit_id, sub in rep.sub_models.items():
                out[f"sub {unit_id}"] = sub
        return out

    def mcc_of(self, name: str) -> float:
        return self.model_reports()[name].metrics.mcc

    def headline_mcc(self) -> float:
        """The scenario's comparison value: best sub (1), meta (2), complete (3)."""
        if self.scenario == 1:
            return max(r.metrics.mcc for r in self.model_reports().values())
        if self.scenario == 2:
            return self.mcc_of("meta")
        return self.mcc_of("complete")


def _feature_id_set(dataset: Dataset) -> set[str]:
    ids = set()
    for col in dataset.columns:
        ids.add(col.fid.text)
        ids.add(col.fid.header(col.kind))
    return ids


def _scenario2_transcript(
    report: EvaluationReport, transcript: Transcript
) -> None:
    """Boundary traffic of one full scoring pass: per part, every visited
    unit's sub-prediction crosses to the meta unit, and the meta prediction
    crosses back."""
    by_part: dict[str, list] = {}
    for sp in report.scoring_subpredictions:
        by_part.setdefault(sp.part_id, []).append(sp)
    for part_id, label, certainty in report.meta_outputs:
        for sp in by_part.get(part_id, ()):
            transcript.append(
                sub_prediction_message(sp.part_id, sp.unit_id, sp.label, sp.certainty)
            )
        transcript.append(meta_prediction_message(part_id, label, certainty))


def _scenario3_transcript(
    dataset: Dataset, partitions: Sequence[UnitPartition], transcript: Transcript
) -> None:
    """Centralization traffic: every unit ships its observed raw slice of
    every visited part to the shared pool."""
    observed = dataset.observed_mask()
    headers = dataset.column_headers()
    for i, part_id in enumerate(dataset.items):
        for part in partitions:
            if not part.coverage[i]:
                continue
            features = {
                headers[j]: float(dataset.values[i, j])
                for j in part.column_indices
                if observed[i, j]
            }
            transcript.append(raw_row_message(part_id, part.unit_id, features))


def run_scenario(
    dataset: Dataset,
    scenario: int,
    grid: ParamGrid,
    plan: CvPlan,
    partitions: Sequence[UnitPartition] | None = None,
    transcript_path: str | Path | None = None,
) -> ScenarioReport:
    """Run one comparison scenario end to end, recording and auditing the
    boundary traffic it implies.

    1: each unit evaluates alone on its own columns and covered items.
    2: the stacked two-stage protocol.
    3: one model over the shared column pool.
    """
    if scenario not in (1, 2, 3):
        raise DataError(f"unknown scenario {scenario}")
    partitions = list(partitions) if partitions is not None else partition_by_unit(dataset)
    volume = account_volume(
        k=len(partitions),
        m=SUB_OUTPUT_FEATURES,
        n_i=[p.width for p in partitions],
    )
    transcript = Transcript(transcript_path)
    reports: dict[str, EvaluationReport] = {}

    if scenario == 1:
        for part in partitions:
            covered = np.flatnonzero(part.coverage)
            reports[f"sub {part.unit_id}"] = nested_cv_complete(
                dataset,
                grid,
                plan,
                name=f"sub {part.unit_id}",
                item_indices=covered,
                column_indices=part.column_indices,
            )
    elif scenario == 2:
        meta_report = nested_cv_meta(dataset, partitions, grid, plan)
        reports["meta"] = meta_report
        _scenario2_transcript(meta_report, transcript)
    else:
        reports["complete"] = nested_cv_complete(dataset, grid, plan, name="complete")
        _scenario3_transcript(dataset, partitions, transcript)

    audit = audit_confidentiality(
        transcript,
        _feature_id_set(dataset),
        build_raw_value_index(dataset, partitions),
    )
    return ScenarioReport(
        scenario=scenario,
        eval_reports=reports,
        volume=volume,
        traffic=measure_traffic(transcript),
        audit=audit,
        transcript=transcript,
    )


def add_noise(dataset: Dataset, lam: float, seed: int) -> Dataset:
    """Add lam * sigma_j white noise to every observed numeric cell.

    sigma_j is the per-column sample standard deviation over observed cells;
    marker cells are imputation artifacts and stay untouched. lam = 0 returns
    the dataset unchanged.
    """
    if lam < 0:
        raise DataError("noise ratio must be >= 0")
    if lam == 0:
        return dataset
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal(dataset.values.shape)
    numeric = np.array([c.kind == "numeric" for c in dataset.columns], dtype=bool)
    observed = dataset.observed_mask() & numeric[None, :]
    sigmas = column_sigmas(dataset)
    values = dataset.values.copy()
    values[observed] += lam * (sigmas[None, :] * eps)[observed]
    return dc_replace(dataset, values=values)


def column_sigmas(dataset: Dataset) -> np.ndarray:
    """Per-column sample std over observed cells (0 for non-numeric columns)."""
    numeric = np.array([c.kind == "numeric" for c in dataset.columns], dtype=bool)
    observed = dataset.observed_mask() & numeric[None, :]
    sigmas = np.zeros(dataset.n_columns)
    for j in range(dataset.n_columns):
        cells = dataset.values[observed[:, j], j]
        if len(cells) >= 2:
            sigmas[j] = float(np.std(cells, ddof=1))
    return sigmas


DEFAULT_LAMBDAS = tuple(round(0.1 * i, 1) for i in range(11))


@dataclass(frozen=True)
class NoiseSweepResult:
    lambdas: tuple[float, ...]
    mccs: tuple[float, ...]
    sigmas: tuple[float, ...]
    suites: tuple[MetricSuite, ...]


def noising_sweep(
    dataset: Dataset,
    grid: ParamGrid,
    plan: CvPlan,
    lambdas: Sequence[float] = DEFAULT_LAMBDAS,
    noise_seed: int | None = None,
) -> NoiseSweepResult:
    """Shared-pool protocol per noise ratio; lam = 0 equals the unnoised run."""
    if noise_seed is None:
        noise_seed = derive_seed(plan.seed, "noise")
    mccs = []
    suites = []
    for lam in lambdas:
        noised = add_noise(dataset, float(lam), noise_seed)
        report = nested_cv_complete(noised, grid, plan, name="complete")
        mccs.append(report.model.metrics.mcc)
        suites.append(report.model.metrics)
    return NoiseSweepResult(
        lambdas=tuple(float(l) for l in lambdas),
        mccs=tuple(mccs),
        sigmas=tuple(column_sigmas(dataset)),
        suites=tuple(suites),
    )


@dataclass(frozen=True)
class PriceOfPrivacy:
    """Both renderings of the stacked-vs-pool gap: the relative gap
    (mcc3 - mcc2) / mcc3 and the complete-model excess mcc3 / mcc2 - 1."""

    mcc_meta: float
    mcc_complete: float
    relative_gap: float | None  # (mcc3 - mcc2) / mcc3
    complete_excess: float | None  # mcc3 / mcc2 - 1
    note: str = ""


def price_of_privacy(report2: ScenarioReport, report3: ScenarioReport) -> PriceOfPrivacy:
    m2 = report2.mcc_of("meta")
    m3 = report3.mcc_of("complete")
    note = ""
    gap = excess = None
    if m3 > 0:
        gap = (m3 - m2) / m3
    else:
        note = "undefined: shared-pool MCC is not positive"
    if m2 > 0:
        excess = m3 / m2 - 1.0
    elif not note:
        note = "excess rendering undefined: stacked MCC is not positive"
    return PriceOfPrivacy(
        mcc_meta=m2, mcc_complete=m3, relative_gap=gap, complete_excess=excess, note=note
    )
