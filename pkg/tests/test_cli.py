import json

import pytest

from metastack.cli import main
from metastack.features import load_csv
from metastack.service import MetaService, ServiceConfig, SubUnitService
from metastack.transport import Transcript

SMALL_SYNTH = json.dumps(
    {
        "unit_feature_counts": [5, 5],
        "n_items": 320,
        "visit_probabilities": [1.0, 0.7],
        "signal_strength": 0.9,
        "class_prior": 0.3,
    }
)

TINY_GRID = "6,10x3,5"


class TestBasics:
    def test_usage_error_exit_code(self, capsys):
        assert main(["compare", "--grid", "nonsense"]) == 1
        assert main(["no-such-command"]) == 1

    def test_missing_dataset_is_usage_error(self):
        assert main(["compare"]) == 1

    def test_missing_file_is_data_error(self):
        assert main(["compare", "--csv", "/definitely/not/here.csv"]) == 2

    def test_single_class_dataset_is_experiment_failure(self, tmp_path):
        rows = ["Id,L0_S0_F0,Response"] + [f"#{i},{i / 10},0" for i in range(30)]
        path = tmp_path / "flat.csv"
        path.write_text("\n".join(rows) + "\n")
        code = main([
            "compare", "--csv", str(path), "--grid", TINY_GRID,
            "--scenarios", "3", "--out", str(tmp_path / "out"),
        ])
        assert code == 3


class TestSynthAndIngest:
    def test_synth_writes_loadable_csv(self, tmp_path, capsys):
        out = tmp_path / "synth.csv"
        assert main(["synth", "--synth", SMALL_SYNTH, "--seed", "5", "--out", str(out)]) == 0
        ds = load_csv(out)
        assert ds.n_items == 320
        assert "positive rate" in capsys.readouterr().out

    def test_ingest_summarizes(self, tmp_path, capsys):
        out = tmp_path / "synth.csv"
        main(["synth", "--synth", SMALL_SYNTH, "--seed", "5", "--out", str(out)])
        assert main(["ingest", "--csv", str(out)]) == 0
        text = capsys.readouterr().out
        assert "unit L0" in text and "unit L1" in text

    def test_ingest_prepared_copy_round_trips(self, tmp_path):
        out = tmp_path / "synth.csv"
        main(["synth", "--synth", SMALL_SYNTH, "--seed", "5", "--out", str(out)])
        prepared = tmp_path / "prepared.csv"
        assert main(["ingest", "--csv", str(out), "--prepared", str(prepared)]) == 0
        ds = load_csv(prepared)
        assert ds.missing_count() == 0  # marker-imputed


class TestCompare:
    @pytest.fixture(scope="class")
    def run_dir(self, tmp_path_factory):
        out = tmp_path_factory.mktemp("cmp")
        code = main([
            "compare", "--synth", SMALL_SYNTH, "--seed", "9",
            "--grid", TINY_GRID, "--out", str(out),
        ])
        assert code == 0
        return out

    def test_artifacts_written(self, run_dir):
        for name in (
            "report.txt", "report.json", "metrics.csv", "visit_shares.csv",
            "transcript_s1.ndjson", "transcript_s2.ndjson", "transcript_s3.ndjson",
        ):
            assert (run_dir / name).exists(), name

    def test_report_text_shape(self, run_dir):
        text = (run_dir / "report.txt").read_text()
        assert "MODEL PERFORMANCE" in text
        assert "meta (scenario 2)" in text
        assert "complete (scenario 3)" in text
        assert "scenario 2 audit: PASS" in text
        assert "scenario 3 audit: FAIL" in text
        assert "PRICE OF PRIVACY" in text

    def test_text_numbers_exist_in_machine_report(self, run_dir):
        doc = json.loads((run_dir / "report.json").read_text())
        meta_doc = doc["scenarios"]["2"]["evaluations"]["meta"]
        mcc = meta_doc["model"]["metrics"]["mcc"]
        assert f"{mcc:.4f}" in (run_dir / "report.txt").read_text()
        assert doc["scenarios"]["2"]["volume"]["ratio_percent"].endswith("%")

    def test_fold_audit_files(self, run_dir):
        assert list(run_dir.glob("folds_s2_*.csv"))

    def test_scenario_subset(self, tmp_path):
        out = tmp_path / "only3"
        code = main([
            "compare", "--synth", SMALL_SYNTH, "--seed", "9",
            "--grid", TINY_GRID, "--scenarios", "3", "--out", str(out),
        ])
        assert code == 0
        doc = json.loads((out / "report.json").read_text())
        assert list(doc["scenarios"]) == ["3"]
        assert "price_of_privacy" not in doc


class TestDeterminism:
    def test_same_config_same_bytes(self, tmp_path):
        args = ["compare", "--synth", SMALL_SYNTH, "--seed", "11",
                "--grid", TINY_GRID, "--scenarios", "2,3"]
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        assert main(args + ["--out", str(out_a)]) == 0
        assert main(args + ["--out", str(out_b)]) == 0
        a = (out_a / "report.json").read_bytes()
        b = (out_b / "report.json").read_bytes()
        # the config echo contains the differing out dirs; normalize it away
        doc_a = json.loads(a)
        doc_b = json.loads(b)
        assert doc_a["config"].pop("out") != doc_b["config"].pop("out")
        assert doc_a == doc_b

    def test_transcripts_identical(self, tmp_path):
        args = ["compare", "--synth", SMALL_SYNTH, "--seed", "11",
                "--grid", TINY_GRID, "--scenarios", "2"]
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        main(args + ["--out", str(out_a)])
        main(args + ["--out", str(out_b)])
        assert (out_a / "transcript_s2.ndjson").read_bytes() == (
            out_b / "transcript_s2.ndjson"
        ).read_bytes()


class TestNoiseSweep:
    def test_sweep_artifacts(self, tmp_path):
        out = tmp_path / "sweep"
        code = main([
            "noise-sweep", "--synth", SMALL_SYNTH, "--seed", "3",
            "--grid", TINY_GRID, "--lambdas", "0,0.5,1.0", "--out", str(out),
        ])
        assert code == 0
        lines = (out / "sweep.csv").read_text().strip().splitlines()
        assert lines[0] == "lambda,mcc"
        assert len(lines) == 4
        assert (out / "sweep.plt").read_text().startswith("set datafile")
        doc = json.loads((out / "sweep.json").read_text())
        assert doc["lambdas"] == [0.0, 0.5, 1.0]


class TestAuditCommand:
    def test_pass_and_fail_verdicts(self, tmp_path, capsys):
        out = tmp_path / "cmp"
        main([
            "compare", "--synth", SMALL_SYNTH, "--seed", "13",
            "--grid", TINY_GRID, "--scenarios", "2,3", "--out", str(out),
        ])
        capsys.readouterr()
        assert main([
            "audit", str(out / "transcript_s2.ndjson"),
            "--synth", SMALL_SYNTH, "--seed", "13",
        ]) == 0
        assert capsys.readouterr().out.startswith("PASS, 0 violations")
        main([
            "audit", str(out / "transcript_s3.ndjson"),
            "--synth", SMALL_SYNTH, "--seed", "13",
        ])
        assert capsys.readouterr().out.startswith("FAIL")


class TestTrainServeReplay:
    def test_train_then_replay_through_mesh(self, tmp_path, capsys):
        data = tmp_path / "synth.csv"
        main(["synth", "--synth", SMALL_SYNTH, "--seed", "17", "--out", str(data)])
        out = tmp_path / "train"
        assert main([
            "train", "--csv", str(data), "--seed", "17",
            "--grid", TINY_GRID, "--out", str(out),
        ]) == 0
        mesh_doc = json.loads((out / "mesh.json").read_text())
        assert mesh_doc["units"]

        # bring the mesh up on ephemeral ports, then point replay at them
        from metastack.cli import _load_mesh

        doc, meta_model, units = _load_mesh(out / "mesh.json")
        transcript = Transcript()
        meta = MetaService(
            ServiceConfig(
                unit_id="meta", port=0,
                expected_units=tuple(doc["meta"]["expected_units"]),
                marker=doc["marker"],
            ),
            meta_model, transcript,
        )
        meta.start()
        subs = []
        try:
            patched = dict(doc)
            patched["meta"] = dict(doc["meta"], port=meta.port)
            patched_units = {}
            for unit_id, info in units.items():
                svc = SubUnitService(
                    ServiceConfig(
                        unit_id=unit_id, port=0, meta_port=meta.port,
                        feature_order=info["features"], marker=doc["marker"],
                    ),
                    info["model"], transcript,
                )
                svc.start()
                subs.append(svc)
                patched_units[unit_id] = {
                    "model": f"models/sub_{unit_id}.json",
                    "port": svc.port,
                    "features": list(info["features"]),
                }
            patched["units"] = patched_units
            (out / "mesh_live.json").write_text(json.dumps(patched))
            replay_out = tmp_path / "replay"
            code = main([
                "replay", "--mesh", str(out / "mesh_live.json"),
                "--csv", str(data), "--seed", "17", "--out", str(replay_out),
            ])
            assert code == 0
            lines = (replay_out / "replay_outcomes.csv").read_text().strip().splitlines()
            assert lines[0] == "part_id,prediction,probability,units_sent,failed"
            assert len(lines) == 321
            assert all(line.endswith(",0") for line in lines[1:])
        finally:
            for svc in subs:
                svc.stop()
            meta.stop()
