"""Microservice deployment mode: one HTTP service per sub-unit, one meta
service, and a replay driver that streams parts through the mesh.

Every service answers exactly one route, POST /predict, with canonically
encoded bodies. Sub-unit services never forward feature fields; the only
payload crossing to the meta service is a sub-prediction message.
"""

from __future__ import annotations

import http.client
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError
from .features import Dataset, UnitPartition
from .forest import ForestModel
from .stacking import SubPrediction, aggregate, rows_to_matrix
from .transport import (
    BoundaryMessage,
    SUB_PREDICTION,
    Transcript,
    decode,
    encode,
    meta_prediction_message,
    sub_prediction_message,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RetryPolicy:
    attempts: int = 3
    backoff_seconds: float = 0.05


@dataclass
class ServiceConfig:
    unit_id: str
    host: str = "127.0.0.1"
    port: int = 0
    meta_host: str = "127.0.0.1"
    meta_port: int = 0
    model_path: str = ""
    feature_order: tuple[str, ...] = ()
    expected_units: tuple[str, ...] = ()
    marker: float = 0.0
    retry: RetryPolicy = field(default_factory=RetryPolicy)


def _post(host: str, port: int, body: bytes, timeout: float = 10.0):
    conn = http.client.HTTPConnection(host, port, timeout=timeout)
    try:
        conn.request(
            "POST", "/predict", body=body, headers={"Content-Type": "application/json"}
        )
        resp = conn.getresponse()
        return resp.status, resp.read()
    finally:
        conn.close()


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    service = None  # set per server subclass

    def log_message(self, fmt, *args):
        log.debug("%s - %s", self.address_string(), fmt % args)

    def _reply(self, status: int, body: bytes) -> None:
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _reject(self, status: int, reason: str) -> None:
        body = json.dumps({"error": reason}, separators=(",", ":")).encode()
        self._reply(status, body)

    def do_GET(self):  # single-endpoint rule
        self._reject(404, "not found")

    def do_PUT(self):
        self._reject(404, "not found")

    def do_DELETE(self):
        self._reject(404, "not found")

    def do_POST(self):
        if self.path != "/predict":
            self._reject(404, "not found")
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            body = self.rfile.read(length)
        except (TypeError, ValueError):
            self._reject(400, "unreadable body")
            return
        try:
            status, reply = self.service.handle(body)
        except DataError as exc:
            self._reject(400, str(exc))
            return
        except _Unprocessable as exc:
            self._reject(422, str(exc))
            return
        self._reply(status, reply)


class _Unprocessable(Exception):
    pass


class _BaseService:
    """Shared server lifecycle for the two service types."""

    def __init__(self, config: ServiceConfig, transcript: Transcript | None = None):
        self.config = config
        self.transcript = transcript
        handler = type("BoundHandler", (_Handler,), {"service": self})
        self._server = ThreadingHTTPServer((config.host, config.port), handler)
        self._server.daemon_threads = True
        self.port = self._server.server_address[1]
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return (self.config.host, self.port)

    def start(self) -> None:
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread:
            self._thread.join(timeout=5)

    def _record(self, message: BoundaryMessage) -> None:
        if self.transcript is not None:
            self.transcript.append(message)


class SubUnitService(_BaseService):
    """Owns one unit's model; accepts raw observations restricted to the
    unit's columns, predicts, forwards only the sub-prediction downstream."""

    def __init__(
        self,
        config: ServiceConfig,
        model: ForestModel,
        transcript: Transcript | None = None,
    ):
        super().__init__(config, transcript)
        self.model = model
        if len(config.feature_order) != model.feature_width:
            raise DataError("feature order and model width disagree")
        self._positions = {name: i for i, name in enumerate(config.feature_order)}

    def handle(self, body: bytes) -> tuple[int, bytes]:
        try:
            doc = json.loads(body.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataError(f"malformed body: {exc}") from exc
        if (
            not isinstance(doc, dict)
            or set(doc) != {"part_id", "features"}
            or not isinstance(doc.get("features"), dict)
        ):
            raise DataError("body must be {part_id, features}")
        part_id = str(doc["part_id"])
        row = np.full(self.model.feature_width, self.config.marker)
        for name, value in doc["features"].items():
            pos = self._positions.get(name)
            if pos is None:
                raise _Unprocessable(f"unknown feature id {name!r}")
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise DataError(f"feature {name!r} is not numeric")
            row[pos] = float(value)
        probs = self.model.predict_proba_matrix(row.reshape(1, -1))[0]
        pick = int(np.argmax(probs))
        message = sub_prediction_message(
            part_id, self.config.unit_id, self.model.classes[pick], float(probs[pick])
        )
        reply = encode(message)
        forwarded = self._forward(reply, message)
        return (200 if forwarded else 502), reply

    def _forward(self, body: bytes, message: BoundaryMessage) -> bool:
        # synchronous forward so callers observe a settled meta buffer
        policy = self.config.retry
        for attempt in range(policy.attempts):
            try:
                status, _ = _post(self.config.meta_host, self.config.meta_port, body)
                if status == 200:
                    self._record(message)
                    return True
                log.warning("meta rejected forward with status %s", status)
                self._record(message)
                return True  # delivered, even if meta refused it
            except OSError as exc:
                if attempt + 1 < policy.attempts:
                    time.sleep(policy.backoff_seconds * (attempt + 1))
                else:
                    log.warning(
                        "dropping forward for part %s after %d attempts: %s",
                        message.payload.get("part_id"),
                        policy.attempts,
                        exc,
                    )
        return False


class AssemblyBuffer:
    """Per-part collection of received sub-predictions, last writer wins."""

    def __init__(self):
        self._parts: dict[str, dict[str, SubPrediction]] = {}
        self._last_meta: dict[str, tuple[str, float]] = {}
        self._lock = threading.Lock()

    def upsert(self, sp: SubPrediction) -> dict[str, SubPrediction]:
        with self._lock:
            entry = self._parts.setdefault(sp.part_id, {})
            entry[sp.unit_id] = sp
            return dict(entry)

    def set_meta(self, part_id: str, label: str, certainty: float) -> None:
        with self._lock:
            self._last_meta[part_id] = (label, certainty)

    def last_meta(self, part_id: str) -> tuple[str, float] | None:
        with self._lock:
            return self._last_meta.get(part_id)

    def __len__(self) -> int:
        with self._lock:
            return len(self._parts)


class MetaService(_BaseService):
    """Aggregates incoming sub-predictions and re-predicts on every arrival."""

    def __init__(
        self,
        config: ServiceConfig,
        model: ForestModel,
        transcript: Transcript | None = None,
    ):
        super().__init__(config, transcript)
        self.model = model
        if not config.expected_units:
            raise DataError("meta service needs the expected unit list")
        if model.feature_width != 2 * len(config.expected_units):
            raise DataError("meta model width must be 2 x expected units")
        self.buffer = AssemblyBuffer()

    def handle(self, body: bytes) -> tuple[int, bytes]:
        message = decode(body)
        if message.kind != SUB_PREDICTION:
            raise DataError(f"meta service accepts {SUB_PREDICTION} messages only")
        payload = message.payload
        unit_id = str(payload["unit_id"])
        if unit_id not in self.config.expected_units:
            raise _Unprocessable(f"unknown unit_id {unit_id!r}")
        label = str(payload["prediction"])
        if label not in self.model.classes:
            raise _Unprocessable(f"unknown prediction label {label!r}")
        sp = SubPrediction(
            part_id=str(payload["part_id"]),
            unit_id=unit_id,
            label=label,
            certainty=float(payload["probability"]),
        )
        entry = self.buffer.upsert(sp)
        rows = aggregate(
            list(entry.values()),
            self.config.expected_units,
            self.config.marker,
            self.model.classes,
            part_ids=[sp.part_id],
        )
        probs = self.model.predict_proba_matrix(rows_to_matrix(rows))[0]
        pick = int(np.argmax(probs))
        reply_msg = meta_prediction_message(
            sp.part_id, self.model.classes[pick], float(probs[pick])
        )
        self.buffer.set_meta(sp.part_id, self.model.classes[pick], float(probs[pick]))
        self._record(reply_msg)
        return 200, encode(reply_msg)


@dataclass
class Mesh:
    """A running set of services sharing one transcript."""

    subs: dict[str, SubUnitService]
    meta: MetaService
    transcript: Transcript

    def stop(self) -> None:
        for service in self.subs.values():
            service.stop()
        self.meta.stop()

    def sub_address(self, unit_id: str) -> tuple[str, int]:
        return self.subs[unit_id].address

    @property
    def meta_address(self) -> tuple[str, int]:
        return self.meta.address


def start_mesh(
    sub_models: Mapping[str, ForestModel],
    meta_model: ForestModel,
    partitions: Sequence[UnitPartition],
    feature_orders: Mapping[str, Sequence[str]],
    marker: float,
    transcript: Transcript | None = None,
    host: str = "127.0.0.1",
) -> Mesh:
    """Launch the meta service plus one sub service per modeled unit on
    ephemeral localhost ports."""
    transcript = transcript if transcript is not None else Transcript()
    expected = tuple(p.unit_id for p in partitions)
    meta = MetaService(
        ServiceConfig(
            unit_id="meta",
            host=host,
            expected_units=expected,
            marker=marker,
        ),
        meta_model,
        transcript,
    )
    meta.start()
    subs = {}
    for part in partitions:
        model = sub_models.get(part.unit_id)
        if model is None:
            continue
        config = ServiceConfig(
            unit_id=part.unit_id,
            host=host,
            meta_host=host,
            meta_port=meta.port,
            feature_order=tuple(feature_orders[part.unit_id]),
            marker=marker,
        )
        service = SubUnitService(config, model, transcript)
        service.start()
        subs[part.unit_id] = service
    return Mesh(subs=subs, meta=meta, transcript=transcript)


@dataclass(frozen=True)
class ReplayOutcome:
    part_id: str
    prediction: str | None
    probability: float | None
    units_sent: int
    failed: bool


def replay(
    dataset: Dataset,
    partitions: Sequence[UnitPartition],
    sub_addresses: Mapping[str, tuple[str, int]],
    meta_address: tuple[str, int],
    rate: float | None = None,
    item_indices: Sequence[int] | None = None,
) -> list[ReplayOutcome]:
    """Stream each part's per-unit observed rows to the owning services.

    The final meta prediction per part is obtained by re-posting the part's
    last sub-prediction to the meta service: the buffer upsert is a no-op
    (last writer wins on identical content), and the response is the meta
    prediction that includes every delivered unit.
    """
    observed = dataset.observed_mask()
    headers = dataset.column_headers()
    outcomes: list[ReplayOutcome] = []
    indices = item_indices if item_indices is not None else range(dataset.n_items)
    for i in indices:
        part_id = dataset.items[i]
        last_reply: bytes | None = None
        sent = 0
        failed = False
        for part in partitions:
            if not part.coverage[i] or part.unit_id not in sub_addresses:
                continue
            features = {
                headers[j]: float(dataset.values[i, j])
                for j in part.column_indices
                if observed[i, j]
            }
            body = json.dumps(
                {"features": features, "part_id": part_id},
                sort_keys=True,
                separators=(",", ":"),
                ensure_ascii=False,
            ).encode("utf-8")
            host, port = sub_addresses[part.unit_id]
            try:
                status, reply = _post(host, port, body)
            except OSError:
                failed = True
                continue
            if status not in (200, 502):
                failed = True
                continue
            sent += 1
            last_reply = reply
        prediction = probability = None
        if last_reply is not None:
            try:
                host, port = meta_address
                status, meta_reply = _post(host, port, last_reply)
                if status == 200:
                    doc = json.loads(meta_reply.decode("utf-8"))
                    prediction = doc["prediction"]
                    probability = float(doc["probability"])
                else:
                    failed = True
            except OSError:
                failed = True
        outcomes.append(
            ReplayOutcome(
                part_id=part_id,
                prediction=prediction,
                probability=probability,
                units_sent=sent,
                failed=failed,
            )
        )
        if rate:
            time.sleep(1.0 / rate)
    return outcomes
