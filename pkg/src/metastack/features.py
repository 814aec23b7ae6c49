"""Tabular core: dataset model, CSV ingestion, unit partitioning, marker
imputation, date compression, and the planted-pattern synthetic generator."""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DataError

NUMERIC = "numeric"
DATE = "date"

_FID_RE = re.compile(r"^L(\d+)_S(\d+)_([FD])(\d+)$")

# Station / feature-number block reserved for date-compression columns.
DATE_SUMMARY_STATION = 999
DATE_SUMMARY_BASE = 9000


@dataclass(frozen=True, order=True)
class FeatureId:
    """Identifies one measured feature: unit (line), station, feature number."""

    unit: int
    station: int
    number: int

    @property
    def text(self) -> str:
        return f"L{self.unit}_S{self.station}_F{self.number}"

    def header(self, kind: str = NUMERIC) -> str:
        """Column-header rendering; date columns use the D letter."""
        letter = "D" if kind == DATE else "F"
        return f"L{self.unit}_S{self.station}_{letter}{self.number}"

    @classmethod
    def parse(cls, text: str) -> "FeatureId":
        fid, _ = cls.parse_header(text)
        return fid

    @classmethod
    def parse_header(cls, text: str) -> tuple["FeatureId", str]:
        """Parse a column header, returning the id and the kind it implies."""
        m = _FID_RE.match(text)
        if m is None:
            raise DataError(f"not a feature column name: {text!r}")
        unit, station, letter, number = m.groups()
        kind = DATE if letter == "D" else NUMERIC
        return cls(int(unit), int(station), int(number)), kind


class Column(NamedTuple):
    fid: FeatureId
    kind: str


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Dataset:
    """Immutable item x column grid with optional (NaN) cells and class labels.

    ``marker`` is None until :func:`impute_marker` has run; afterwards every
    cell equal to ``marker`` is an imputation artifact, not an observation.
    """

    items: tuple[str, ...]
    columns: tuple[Column, ...]
    values: np.ndarray
    labels: np.ndarray
    classes: tuple[str, ...]
    marker: float | None = None

    def __post_init__(self):
        if len(self.classes) < 2:
            raise DataError("class list needs at least 2 entries")
        if self.values.shape != (len(self.items), len(self.columns)):
            raise DataError(
                f"grid shape {self.values.shape} does not match "
                f"{len(self.items)} items x {len(self.columns)} columns"
            )
        if len(self.labels) != len(self.items):
            raise DataError("one label per item required")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.classes)):
            raise DataError("label index out of range")
        fids = [c.fid for c in self.columns]
        if len(set(fids)) != len(fids):
            raise DataError("duplicate feature ids")
        _frozen(self.values)
        _frozen(self.labels)

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def n_columns(self) -> int:
        return len(self.columns)

    def column_headers(self) -> list[str]:
        return [c.fid.header(c.kind) for c in self.columns]

    def observed_mask(self) -> np.ndarray:
        """True where a cell holds a real observation (not missing, not marker)."""
        mask = ~np.isnan(self.values)
        if self.marker is not None:
            mask &= self.values != self.marker
        return mask

    def missing_count(self) -> int:
        return int(np.isnan(self.values).sum())


@dataclass(frozen=True)
class UnitPartition:
    """One unit's column slice plus the per-item visited flag."""

    unit_id: str
    unit_index: int
    column_indices: np.ndarray
    coverage: np.ndarray

    def __post_init__(self):
        _frozen(self.column_indices)
        _frozen(self.coverage)

    @property
    def width(self) -> int:
        return len(self.column_indices)


@dataclass(frozen=True)
class ImputationConfig:
    marker: float


@dataclass(frozen=True)
class CsvSchema:
    """Ingestion options: which columns are dates, id/label wiring."""

    date_columns: frozenset[str] = frozenset()
    all_features_date: bool = False
    id_column: str = "Id"
    response_column: str = "Response"
    classes: tuple[str, ...] = ("no scrap", "scrap")


def load_csv(path: str | Path, schema: CsvSchema | None = None) -> Dataset:
    """Read one comma-separated file: Id column, feature columns, Response.

    Empty cells are missing. Column kind comes from the header letter (D for
    dates) unless overridden through ``schema``. Reads row by row, so large
    files stream without loading the text into memory at once.
    """
    schema = schema or CsvSchema()
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, header row required") from None
        if schema.id_column not in header or schema.response_column not in header:
            raise DataError(
                f"{path}: header must carry {schema.id_column!r} and "
                f"{schema.response_column!r} columns"
            )
        id_pos = header.index(schema.id_column)
        resp_pos = header.index(schema.response_column)
        columns: list[Column] = []
        feat_pos: list[int] = []
        for pos, name in enumerate(header):
            if pos in (id_pos, resp_pos):
                continue
            fid, kind = FeatureId.parse_header(name)
            if schema.all_features_date or name in schema.date_columns:
                kind = DATE
            columns.append(Column(fid, kind))
            feat_pos.append(pos)

        items: list[str] = []
        labels: list[int] = []
        rows: list[np.ndarray] = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            items.append(row[id_pos])
            raw_label = row[resp_pos].strip()
            try:
                label = int(raw_label)
            except ValueError:
                raise DataError(f"{path}:{lineno}: unknown label value {raw_label!r}") from None
            if not 0 <= label < len(schema.classes):
                raise DataError(f"{path}:{lineno}: unknown label value {raw_label!r}")
            labels.append(label)
            vals = np.full(len(columns), np.nan)
            for j, pos in enumerate(feat_pos):
                cell = row[pos].strip()
                if cell == "":
                    continue
                try:
                    vals[j] = float(cell)
                except ValueError:
                    raise DataError(
                        f"{path}:{lineno}: non-numeric cell {cell!r} in column "
                        f"{header[pos]}"
                    ) from None
            rows.append(vals)

    values = np.vstack(rows) if rows else np.empty((0, len(columns)))
    return Dataset(
        items=tuple(items),
        columns=tuple(columns),
        values=values,
        labels=np.array(labels, dtype=np.int64),
        classes=schema.classes,
    )


def to_csv(dataset: Dataset, path: str | Path) -> None:
    """Write the dataset in the same dialect load_csv reads (round-trips)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["Id", *dataset.column_headers(), "Response"])
        for i, item in enumerate(dataset.items):
            cells = [
                "" if math.isnan(v) else repr(float(v))
                for v in dataset.values[i]
            ]
            writer.writerow([item, *cells, int(dataset.labels[i])])


def partition_by_unit(dataset: Dataset) -> list[UnitPartition]:
    """Group columns by the unit index of their FeatureId; compute coverage.

    Coverage counts real observations only, so partitioning an imputed
    dataset still reflects pre-imputation missingness.
    """
    by_unit: dict[int, list[int]] = {}
    for j, col in enumerate(dataset.columns):
        by_unit.setdefault(col.fid.unit, []).append(j)
    observed = dataset.observed_mask()
    partitions = []
    for unit in sorted(by_unit):
        idx = np.array(by_unit[unit], dtype=np.int64)
        coverage = observed[:, idx].any(axis=1) if dataset.n_items else np.zeros(0, dtype=bool)
        partitions.append(
            UnitPartition(
                unit_id=f"L{unit}",
                unit_index=unit,
                column_indices=idx,
                coverage=coverage,
            )
        )
    return partitions


def default_marker(dataset: Dataset) -> float:
    """Out-of-range sentinel: floor(global_min - 2 * observed range)."""
    observed = dataset.observed_mask()
    numeric = np.array([c.kind == NUMERIC for c in dataset.columns], dtype=bool)
    cells = dataset.values[:, numeric][observed[:, numeric]] if dataset.n_items else np.array([])
    if cells.size == 0:
        return -1.0
    lo = float(cells.min())
    hi = float(cells.max())
    marker = math.floor(lo - 2.0 * (hi - lo))
    if marker >= lo:
        marker = math.floor(lo) - 1.0
    return float(marker)


def impute_marker(dataset: Dataset, config: ImputationConfig | None = None) -> Dataset:
    """Replace missing numeric cells with the marker; observed cells untouched.

    The marker must lie strictly outside every numeric column's observed
    range. Imputing twice with the same marker is a no-op.
    """
    config = config or ImputationConfig(default_marker(dataset))
    marker = float(config.marker)
    if dataset.marker is not None and dataset.marker != marker:
        raise DataError(
            f"dataset already imputed with marker {dataset.marker}, got {marker}"
        )
    numeric = [j for j, c in enumerate(dataset.columns) if c.kind == NUMERIC]
    observed = dataset.observed_mask()
    for j in numeric:
        col = dataset.values[:, j][observed[:, j]]
        if col.size and float(col.min()) <= marker <= float(col.max()):
            raise DataError(
                f"marker {marker} lies inside the observed range "
                f"[{col.min()}, {col.max()}] of column {dataset.columns[j].fid.text}"
            )
    values = dataset.values.copy()
    nan_mask = np.isnan(values)
    nan_mask[:, [j for j in range(dataset.n_columns) if j not in set(numeric)]] = False
    values[nan_mask] = marker
    return replace(dataset, values=values, marker=marker)


def compress_dates(dataset: Dataset, per_unit: bool = True) -> Dataset:
    """Replace date columns with 4 summary columns per scope:
    (min, max, max - min, count of populated date cells).

    Scope is one unit when ``per_unit`` is set, else all date columns at once.
    Items with no populated date cells in a scope get missing summaries (or
    marker values when the dataset is already imputed) and count 0.
    """
    date_idx = [j for j, c in enumerate(dataset.columns) if c.kind == DATE]
    if not date_idx:
        return dataset
    if per_unit:
        scopes: dict[int, list[int]] = {}
        for j in date_idx:
            scopes.setdefault(dataset.columns[j].fid.unit, []).append(j)
        scope_list = sorted(scopes.items())
    else:
        scope_list = [(0, date_idx)]

    keep_idx = [j for j in range(dataset.n_columns) if j not in set(date_idx)]
    observed = dataset.observed_mask()
    absent = np.nan if dataset.marker is None else dataset.marker

    new_cols: list[Column] = [dataset.columns[j] for j in keep_idx]
    blocks: list[np.ndarray] = [dataset.values[:, keep_idx]]
    existing = {c.fid for c in new_cols}
    for scope_pos, (unit, idx) in enumerate(scope_list):
        sub = dataset.values[:, idx]
        obs = observed[:, idx]
        cnt = obs.sum(axis=1)
        mn = np.where(obs, sub, np.inf).min(axis=1)
        mx = np.where(obs, sub, -np.inf).max(axis=1)
        empty = cnt == 0
        mn = np.where(empty, absent, mn)
        mx = np.where(empty, absent, mx)
        dur = np.where(empty, absent, mx - mn)
        block = np.column_stack([mn, mx, dur, cnt.astype(float)])
        blocks.append(block)
        for k in range(4):
            fid = FeatureId(unit, DATE_SUMMARY_STATION, DATE_SUMMARY_BASE + 4 * scope_pos + k)
            if fid in existing:
                raise DataError(f"date summary id collides with existing column {fid.text}")
            new_cols.append(Column(fid, NUMERIC))

    values = np.hstack(blocks) if dataset.n_items else np.empty((0, len(new_cols)))
    return replace(dataset, columns=tuple(new_cols), values=values)


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the planted-pattern generator."""

    unit_feature_counts: tuple[int, ...] = (16, 16, 16, 16)
    n_items: int = 20_000
    visit_probabilities: tuple[float, ...] = (1.0, 0.3, 0.3, 0.87)
    signal_strength: float = 0.9
    class_prior: float = 0.3
    seed: int = 7
    classes: tuple[str, ...] = ("no scrap", "scrap")

    def __post_init__(self):
        if len(self.unit_feature_counts) != len(self.visit_probabilities):
            raise DataError("one visit probability per unit required")
        if any(n < 1 for n in self.unit_feature_counts):
            raise DataError("unit feature counts must be >= 1")
        if any(not 0.0 < p <= 1.0 for p in self.visit_probabilities):
            raise DataError("visit probabilities must lie in (0, 1]")
        if not 0.0 < self.class_prior < 1.0:
            raise DataError("class prior must lie in (0, 1)")
        if not 0.0 <= self.signal_strength <= 1.0:
            raise DataError("signal strength must lie in [0, 1]")
        if self.n_items < 0:
            raise DataError("n_items must be >= 0")


DEFAULT_SYNTH = SynthSpec()


def _planted_scores(values: np.ndarray, visits: np.ndarray, counts: Sequence[int]):
    """Per-item unit votes and tie-break key of the planted pattern.

    Each unit's latent is the mean of its first up-to-3 features; a visited
    unit contributes sign(latent), an unvisited unit contributes 0. The
    tie-break key ranks items within one vote level: it reads a single
    feature that feeds no latent (the 4th feature of the item's first
    visited unit), falling back to the summed latents when no visited unit
    is wide enough. Keeping the key outside the latents makes it invisible
    to per-unit vote abstraction while trivially learnable from raw cells.
    """
    n = values.shape[0]
    vote_sum = np.zeros(n)
    cont_sum = np.zeros(n)
    tiebreak = np.full(n, np.nan)
    offset = 0
    for u, width in enumerate(counts):
        lead = values[:, offset : offset + min(3, width)]
        g = np.where(visits[:, u], np.nan_to_num(lead).mean(axis=1), 0.0)
        vote_sum += np.sign(g)
        cont_sum += g
        if width >= 4:
            unset = np.isnan(tiebreak) & visits[:, u]
            tiebreak[unset] = values[unset, offset + 3]
        offset += width
    tiebreak = np.where(np.isnan(tiebreak), cont_sum, tiebreak)
    return vote_sum, tiebreak


def generate_synthetic(spec: SynthSpec) -> Dataset:
    """Plant a cross-unit pattern: the label thresholds the summed unit votes.

    The threshold is placed so that, after label flips with probability
    (1 - signal_strength) / 2, the expected positive rate equals the class
    prior. Ties at the critical vote count are broken by a per-item key
    read from raw cells (see _planted_scores), keeping the label a
    deterministic function of the features.
    """
    rng = np.random.default_rng(spec.seed)
    k = len(spec.unit_feature_counts)
    total = sum(spec.unit_feature_counts)
    n = spec.n_items

    visits = rng.random((n, k)) < np.array(spec.visit_probabilities)
    values = rng.standard_normal((n, total))
    offset = 0
    for u, width in enumerate(spec.unit_feature_counts):
        # the first latent feature carries most of the variance so the unit
        # vote is axis-detectable; otherwise the sign of a 3-feature mean is
        # a diagonal boundary that understates every tree learner at once
        values[:, offset] *= 3.0
        values[~visits[:, u], offset : offset + width] = np.nan
        offset += width

    flip_p = (1.0 - spec.signal_strength) / 2.0
    if spec.signal_strength > 0:
        target = (spec.class_prior - flip_p) / (1.0 - 2.0 * flip_p)
        if not 0.0 <= target <= 1.0:
            raise DataError(
                f"class prior {spec.class_prior} unreachable at signal "
                f"{spec.signal_strength}: pre-flip rate {target:.3f} infeasible"
            )
    else:
        target = spec.class_prior

    votes, tiebreak = _planted_scores(values, visits, spec.unit_feature_counts)
    n_pos = int(round(target * n))
    order = np.lexsort((tiebreak, votes))
    labels = np.zeros(n, dtype=np.int64)
    if n_pos:
        labels[order[n - n_pos :]] = 1
    if flip_p > 0 and n:
        flips = rng.random(n) < flip_p
        labels[flips] = 1 - labels[flips]

    columns = []
    for u, width in enumerate(spec.unit_feature_counts):
        for j in range(width):
            columns.append(Column(FeatureId(u, 0, j), NUMERIC))
    items = tuple(f"#{i:06d}" for i in range(n))
    return Dataset(
        items=items,
        columns=tuple(columns),
        values=values,
        labels=labels,
        classes=spec.classes,
    )
