import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metastack.errors import DataError
from metastack.features import SynthSpec, generate_synthetic, impute_marker, partition_by_unit
from metastack.transport import (
    BoundaryMessage,
    Transcript,
    account_volume,
    audit_confidentiality,
    build_raw_value_index,
    decode,
    encode,
    measure_traffic,
    meta_prediction_message,
    raw_row_message,
    render_value,
    sub_prediction_message,
)

part_ids = st.text(min_size=1, max_size=12).filter(lambda s: s.strip())
probabilities = st.floats(0.0, 1.0, allow_nan=False)


class TestEncoding:
    def test_typical_message_round_trips(self):
        msg = sub_prediction_message("#001", "L0", "no scrap", 0.9724)
        data = encode(msg)
        assert data == (
            b'{"kind":"sub_prediction","part_id":"#001","prediction":"no scrap",'
            b'"probability":0.9724,"unit_id":"L0"}'
        )
        back = decode(data)
        assert back == msg
        assert msg.byte_size == len(data)

    def test_canonical_key_order_and_no_whitespace(self):
        msg = meta_prediction_message("p", "scrap", 0.5)
        text = encode(msg).decode()
        assert " " not in text
        keys = list(json.loads(text))
        assert keys == sorted(keys)

    def test_empty_payload_rejected(self):
        with pytest.raises(DataError):
            encode(BoundaryMessage("sub_prediction", {}))

    def test_unknown_kind_rejected(self):
        with pytest.raises(DataError):
            encode(BoundaryMessage("telemetry", {"a": 1}))
        with pytest.raises(DataError):
            decode(b'{"kind":"telemetry","a":1}')

    def test_non_finite_rejected(self):
        with pytest.raises(DataError):
            encode(sub_prediction_message("p", "L0", "scrap", float("nan")))
        with pytest.raises(DataError):
            encode(sub_prediction_message("p", "L0", "scrap", float("inf")))

    def test_schema_mismatch_rejected(self):
        with pytest.raises(DataError):
            encode(BoundaryMessage("sub_prediction", {"part_id": "p"}))
        with pytest.raises(DataError):
            decode(b'{"kind":"sub_prediction","part_id":"p","extra":1,'
                   b'"prediction":"a","probability":0.5,"unit_id":"L0"}')

    def test_malformed_bytes_rejected(self):
        with pytest.raises(DataError):
            decode(b"\xff\xfe")
        with pytest.raises(DataError):
            decode(b"[1,2]")

    @given(part_ids, part_ids, probabilities)
    @settings(max_examples=100, deadline=None)
    def test_round_trip_property(self, part, unit, prob):
        msg = sub_prediction_message(part, f"L{abs(hash(unit)) % 10}", "scrap", prob)
        assert decode(encode(msg)) == msg

    def test_injective_over_random_payloads(self):
        rng = np.random.default_rng(0)
        seen = {}
        for i in range(300):
            msg = sub_prediction_message(
                f"p{rng.integers(100)}", f"L{rng.integers(4)}",
                ("scrap", "no scrap")[rng.integers(2)], float(rng.random()),
            )
            data = encode(msg)
            if data in seen:
                assert seen[data] == msg
            seen[data] = msg
        assert len(seen) > 100


class TestTranscript:
    def test_save_load_round_trip(self, tmp_path):
        t = Transcript()
        t.append(sub_prediction_message("a", "L0", "scrap", 0.7))
        t.append(meta_prediction_message("a", "no scrap", 0.6))
        path = tmp_path / "t.ndjson"
        t.save(path)
        back = Transcript.load(path)
        assert back.messages == t.messages

    def test_streaming_file_write(self, tmp_path):
        path = tmp_path / "live.ndjson"
        t = Transcript(path)
        t.append(sub_prediction_message("a", "L0", "scrap", 0.7))
        t.close()
        assert len(Transcript.load(path)) == 1


class TestVolumeAccount:
    def test_production_line_ratio(self):
        account = account_volume(k=4, m=2, n_i=[173, 519, 48, 251])
        assert account.ratio == Fraction(8, 991)
        assert account.ratio_percent() == "0.81%"
        assert account.scenario1 == 0
        assert account.scenario2 == 8
        assert account.scenario3 == 991
        assert account.savings == 983

    def test_sensor_group_ratio(self):
        # six sensor groups, 46 features in total
        account = account_volume(k=6, m=2, n_i=[8, 8, 8, 8, 7, 7])
        assert account.ratio == Fraction(12, 46)
        assert account.ratio_percent() == "26.09%"

    def test_degenerate_single_unit(self):
        account = account_volume(k=1, m=5, n_i=[5])
        assert account.ratio == 1
        assert account.savings == 0

    def test_scaling_by_s(self):
        account = account_volume(k=2, m=2, n_i=[4, 4], s=Fraction(3, 2))
        assert account.scenario2 == Fraction(6)
        assert account.scenario3 == Fraction(12)

    def test_m_larger_than_smallest_unit_warns(self):
        with pytest.warns(UserWarning):
            account_volume(k=2, m=5, n_i=[3, 10])

    def test_invalid_rejected(self):
        with pytest.raises(DataError):
            account_volume(k=0, m=1, n_i=[])
        with pytest.raises(DataError):
            account_volume(k=2, m=1, n_i=[3])


class TestMeasureTraffic:
    def test_empty_transcript(self):
        summary = measure_traffic([])
        assert summary.total_bytes == 0
        assert summary.total_messages == 0

    def test_counts_by_kind(self):
        msgs = [
            sub_prediction_message("a", "L0", "scrap", 0.5),
            sub_prediction_message("a", "L1", "scrap", 0.25),
            meta_prediction_message("a", "scrap", 0.4),
            raw_row_message("a", "L0", {"L0_S0_F0": 1.5, "L0_S0_F1": 2.5}),
        ]
        summary = measure_traffic(msgs)
        assert summary.kind("sub_prediction").message_count == 2
        assert summary.kind("sub_prediction").data_field_count == 4
        assert summary.kind("meta_prediction").message_count == 1
        assert summary.kind("raw_row").data_field_count == 2
        assert summary.total_bytes == sum(m.byte_size for m in msgs)


class TestAudit:
    def fixture_data(self):
        spec = SynthSpec(
            unit_feature_counts=(4, 4), n_items=60,
            visit_probabilities=(0.9, 0.7), seed=19,
        )
        ds = impute_marker(generate_synthetic(spec))
        parts = partition_by_unit(ds)
        ids = {c.fid.text for c in ds.columns}
        index = build_raw_value_index(ds, parts)
        return ds, parts, ids, index

    def test_clean_traffic_passes(self):
        ds, parts, ids, index = self.fixture_data()
        msgs = [
            sub_prediction_message(ds.items[i], p.unit_id, "scrap", 0.75)
            for p in parts
            for i in range(10)
            if p.coverage[i]
        ]
        verdict = audit_confidentiality(msgs, ids, index)
        assert verdict.passed
        assert verdict.messages_scanned == len(msgs)

    def test_smuggled_feature_field_flagged_twice(self):
        ds, parts, ids, index = self.fixture_data()
        observed = ds.observed_mask()
        i, j = np.argwhere(observed).tolist()[0]
        fid = ds.columns[j].fid.text
        value = float(ds.values[i, j])
        unit = f"L{ds.columns[j].fid.unit}"
        bad = BoundaryMessage(
            "sub_prediction",
            {"part_id": "x", "unit_id": unit, "prediction": "scrap",
             "probability": value, fid: value},
        )
        # bypass schema validation to simulate a hostile writer
        verdict = audit_confidentiality([bad], ids, index)
        assert not verdict.passed
        reasons = {r for _, r in verdict.violations}
        assert any("field name" in r for r in reasons)
        assert any("raw value" in r for r in reasons)

    def test_raw_row_always_flagged(self):
        ds, parts, ids, index = self.fixture_data()
        msg = raw_row_message("p", parts[0].unit_id, {"L0_S0_F0": 1.0})
        verdict = audit_confidentiality([msg], ids, index)
        assert not verdict.passed
        assert any("raw_row" in reason for _, reason in verdict.violations)

    def test_insertion_soundness(self):
        # inserting any observed (feature id, value) pair flips the verdict
        ds, parts, ids, index = self.fixture_data()
        observed = ds.observed_mask()
        rng = np.random.default_rng(2)
        cells = np.argwhere(observed)
        for _ in range(25):
            i, j = cells[rng.integers(len(cells))]
            unit = f"L{ds.columns[j].fid.unit}"
            clean = sub_prediction_message("p", unit, "scrap", 0.5)
            tainted = BoundaryMessage(
                clean.kind,
                {**clean.payload, ds.columns[j].fid.text: float(ds.values[i, j])},
            )
            assert audit_confidentiality([clean], ids, index).passed
            assert not audit_confidentiality([tainted], ids, index).passed

    def test_value_match_is_sender_scoped(self):
        ds, parts, ids, index = self.fixture_data()
        observed = ds.observed_mask()
        # a value observed only at unit 0 does not implicate unit 1 senders
        cells0 = [
            (i, j)
            for i, j in np.argwhere(observed).tolist()
            if ds.columns[j].fid.unit == 0
        ]
        i, j = cells0[0]
        value = float(ds.values[i, j])
        if render_value(value) in index.get("L1", frozenset()):
            pytest.skip("value collision across units")
        msg = BoundaryMessage(
            "sub_prediction",
            {"part_id": "p", "unit_id": "L1", "prediction": "scrap",
             "probability": value},
        )
        assert audit_confidentiality([msg], ids, index).passed
