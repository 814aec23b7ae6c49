"""Unit-boundary message layer: canonical encoding, transcripts, the
confidentiality auditor, and analytic + empirical data-volume accounting."""

from __future__ import annotations

import json
import re
import threading
import warnings
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import DataError
from .features import Dataset, UnitPartition

SUB_PREDICTION = "sub_prediction"
META_PREDICTION = "meta_prediction"
RAW_ROW = "raw_row"

# allowed payload fields per message kind
_SCHEMAS: dict[str, frozenset] = {
    SUB_PREDICTION: frozenset({"part_id", "unit_id", "prediction", "probability"}),
    META_PREDICTION: frozenset({"part_id", "prediction", "probability"}),
    RAW_ROW: frozenset({"part_id", "unit_id", "features"}),
}

# payload entries that count as data fields in the volume algebra (the part
# identifier and addressing fields are transport overhead, not data)
_DATA_FIELDS: dict[str, frozenset] = {
    SUB_PREDICTION: frozenset({"prediction", "probability"}),
    META_PREDICTION: frozenset({"prediction", "probability"}),
    RAW_ROW: frozenset({"features"}),
}

_FEATURE_NAME_RE = re.compile(r"^L\d+_S\d+_[FD]\d+$")


@dataclass(frozen=True)
class BoundaryMessage:
    """One message crossing a unit boundary; payload is kind-specific."""

    kind: str
    payload: Mapping[str, object]

    @property
    def byte_size(self) -> int:
        return len(encode(self))

    def data_field_count(self) -> int:
        n = 0
        for name in _DATA_FIELDS[self.kind]:
            value = self.payload.get(name)
            if isinstance(value, Mapping):
                n += len(value)
            else:
                n += 1
        return n


def sub_prediction_message(part_id: str, unit_id: str, prediction: str, probability: float) -> BoundaryMessage:
    return BoundaryMessage(
        SUB_PREDICTION,
        {"part_id": part_id, "unit_id": unit_id, "prediction": prediction, "probability": float(probability)},
    )


def meta_prediction_message(part_id: str, prediction: str, probability: float) -> BoundaryMessage:
    return BoundaryMessage(
        META_PREDICTION,
        {"part_id": part_id, "prediction": prediction, "probability": float(probability)},
    )


def raw_row_message(part_id: str, unit_id: str, features: Mapping[str, float]) -> BoundaryMessage:
    return BoundaryMessage(
        RAW_ROW,
        {"part_id": part_id, "unit_id": unit_id, "features": dict(features)},
    )


def _validate(message: BoundaryMessage) -> None:
    schema = _SCHEMAS.get(message.kind)
    if schema is None:
        raise DataError(f"unknown message kind: {message.kind!r}")
    fields = set(message.payload)
    if not fields:
        raise DataError("empty message payload")
    if fields != schema:
        raise DataError(
            f"{message.kind} payload fields {sorted(fields)} do not match "
            f"schema {sorted(schema)}"
        )


def encode(message: BoundaryMessage) -> bytes:
    """Canonical bytes: UTF-8 JSON, sorted keys, no spaces, shortest floats."""
    _validate(message)
    doc = {"kind": message.kind, **message.payload}
    try:
        text = json.dumps(
            doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False
        )
    except ValueError as exc:
        raise DataError(f"unencodable message: {exc}") from exc
    return text.encode("utf-8")


def decode(data: bytes) -> BoundaryMessage:
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"malformed message bytes: {exc}") from exc
    if not isinstance(doc, dict) or "kind" not in doc:
        raise DataError("message must be an object with a 'kind' field")
    kind = doc.pop("kind")
    message = BoundaryMessage(kind, doc)
    _validate(message)
    return message


class Transcript:
    """Append-only record of boundary messages behind an exclusive writer."""

    def __init__(self, path: str | Path | None = None):
        self._messages: list[BoundaryMessage] = []
        self._lock = threading.Lock()
        self._path = Path(path) if path else None
        self._fh = open(self._path, "wb") if self._path else None

    def append(self, message: BoundaryMessage) -> None:
        data = encode(message)
        with self._lock:
            self._messages.append(message)
            if self._fh is not None:
                self._fh.write(data + b"\n")
                self._fh.flush()

    def extend(self, messages: Iterable[BoundaryMessage]) -> None:
        for m in messages:
            self.append(m)

    @property
    def messages(self) -> tuple[BoundaryMessage, ...]:
        with self._lock:
            return tuple(self._messages)

    def __len__(self) -> int:
        return len(self._messages)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            for m in self.messages:
                fh.write(encode(m) + b"\n")

    @classmethod
    def load(cls, path: str | Path) -> "Transcript":
        t = cls()
        with open(path, "rb") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    t.append(decode(line))
        return t


@dataclass(frozen=True)
class VolumeAccount:
    """Analytic per-item transfer volume of the three scenarios.

    k sub-units each ship m output features per item in the stacked setup;
    centralizing instead ships all n_i input features. s is the volume of
    one feature. All totals are exact rationals.
    """

    k: int
    m: int
    n_i: tuple[int, ...]
    s: Fraction
    scenario1: Fraction
    scenario2: Fraction
    scenario3: Fraction
    savings: Fraction
    ratio: Fraction

    def ratio_percent(self, digits: int = 2) -> str:
        return f"{float(self.ratio) * 100:.{digits}f}%"


def account_volume(k: int, m: int, n_i: Sequence[int], s: float | Fraction = 1) -> VolumeAccount:
    if k < 1 or m < 1 or any(n < 1 for n in n_i):
        raise DataError("unit count, output count and feature counts must be positive")
    if len(n_i) != k:
        raise DataError("one feature count per unit required")
    if m > min(n_i):
        warnings.warn(
            f"sub-model output count m={m} exceeds the smallest input width "
            f"{min(n_i)}; the stacked scenario transfers more than centralizing that unit",
            stacklevel=2,
        )
    s = Fraction(s)
    total = sum(n_i)
    return VolumeAccount(
        k=k,
        m=m,
        n_i=tuple(n_i),
        s=s,
        scenario1=Fraction(0),
        scenario2=k * m * s,
        scenario3=total * s,
        savings=(total - k * m) * s,
        ratio=Fraction(k * m, total),
    )


@dataclass(frozen=True)
class KindTraffic:
    message_count: int
    data_field_count: int
    byte_total: int


@dataclass(frozen=True)
class TrafficSummary:
    """Empirical counterpart of the volume algebra, split by message kind."""

    per_kind: dict[str, KindTraffic]

    @property
    def total_bytes(self) -> int:
        return sum(t.byte_total for t in self.per_kind.values())

    @property
    def total_messages(self) -> int:
        return sum(t.message_count for t in self.per_kind.values())

    def kind(self, kind: str) -> KindTraffic:
        return self.per_kind.get(kind, KindTraffic(0, 0, 0))


def measure_traffic(transcript: Transcript | Sequence[BoundaryMessage]) -> TrafficSummary:
    messages = transcript.messages if isinstance(transcript, Transcript) else tuple(transcript)
    acc: dict[str, list[int]] = {}
    for m in messages:
        row = acc.setdefault(m.kind, [0, 0, 0])
        row[0] += 1
        row[1] += m.data_field_count()
        row[2] += m.byte_size
    return TrafficSummary(
        per_kind={k: KindTraffic(*v) for k, v in sorted(acc.items())}
    )


@dataclass(frozen=True)
class AuditVerdict:
    messages_scanned: int
    violations: tuple[tuple[int, str], ...]

    @property
    def passed(self) -> bool:
        return not self.violations


def render_value(value: float) -> str:
    """Decimal rendering used for exact raw-value matching."""
    return repr(float(value))


def build_raw_value_index(
    dataset: Dataset, partitions: Sequence[UnitPartition]
) -> dict[str, frozenset[str]]:
    """Per unit, the rendered set of that unit's observed raw cell values."""
    observed = dataset.observed_mask()
    index = {}
    for part in partitions:
        block = dataset.values[:, part.column_indices]
        obs = observed[:, part.column_indices]
        index[part.unit_id] = frozenset(render_value(v) for v in block[obs])
    return index


def audit_confidentiality(
    transcript: Transcript | Sequence[BoundaryMessage],
    raw_feature_ids: Iterable[str],
    raw_values_index: Mapping[str, frozenset[str]],
) -> AuditVerdict:
    """Scan every boundary message for raw-data exposure.

    A message violates confidentiality when it (i) is a raw_row, (ii) carries
    a field named like a feature id, or (iii) carries a numeric value exactly
    matching an observed raw cell of the sending unit.
    """
    messages = transcript.messages if isinstance(transcript, Transcript) else tuple(transcript)
    id_set = set(raw_feature_ids)
    violations: list[tuple[int, str]] = []
    for i, message in enumerate(messages):
        if message.kind == RAW_ROW:
            violations.append((i, "kind=raw_row"))
        flat: list[tuple[str, object]] = []
        for name, value in message.payload.items():
            if isinstance(value, Mapping):
                flat.extend(value.items())
            else:
                flat.append((name, value))
        unit = message.payload.get("unit_id")
        unit_values = raw_values_index.get(unit, frozenset()) if unit else frozenset()
        for name, value in flat:
            if name in id_set or _FEATURE_NAME_RE.match(name):
                violations.append((i, f"field name {name}"))
            if isinstance(value, (int, float)) and not isinstance(value, bool):
                if render_value(value) in unit_values:
                    violations.append((i, f"raw value match {name}={render_value(value)}"))
    return AuditVerdict(messages_scanned=len(messages), violations=tuple(violations))
