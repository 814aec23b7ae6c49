"""Command-line entry point: data prep, training, scenario comparison,
noising sweep, transcript audit, and the service mesh."""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import baselines, reports, service
from ._util import derive_seed
from .errors import DataError, ExperimentError
from .features import (
    CsvSchema,
    Dataset,
    ImputationConfig,
    SynthSpec,
    compress_dates,
    default_marker,
    generate_synthetic,
    impute_marker,
    load_csv,
    partition_by_unit,
    to_csv,
)
from .forest import (
    ForestModel,
    ForestParams,
    ParamGrid,
    REDUCED_GRID,
    stratified_fold_ids,
    train_forest,
)
from .stacking import (
    CvPlan,
    aggregate,
    emit_subpredictions,
    rows_to_matrix,
    write_fold_audit,
)
from .transport import Transcript, audit_confidentiality, build_raw_value_index

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_EXPERIMENT = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); remap to usage error
        raise UsageError(message)


@dataclass
class RunConfig:
    """Everything a run needs; a run is reproducible from this plus nothing."""

    csv: str | None = None
    synth: dict | str | None = None
    date_columns: tuple[str, ...] = ()
    all_dates: bool = False
    marker: float | None = None
    grid_estimators: tuple[int, ...] = REDUCED_GRID.n_estimators
    grid_depths: tuple[int, ...] = REDUCED_GRID.max_depth
    outer_folds: int = 3
    inner_folds: int = 2
    meta_folds: int = 3
    scenarios: tuple[int, ...] = (1, 2, 3)
    lambdas: tuple[float, ...] = baselines.DEFAULT_LAMBDAS
    seed: int = 7
    out: str = "out"
    base_port: int = 8100

    def echo(self) -> dict:
        doc = asdict(self)
        for key in ("date_columns", "grid_estimators", "grid_depths", "scenarios", "lambdas"):
            doc[key] = list(doc[key])
        return doc

    def grid(self) -> ParamGrid:
        return ParamGrid(self.grid_estimators, self.grid_depths)

    def plan(self) -> CvPlan:
        return CvPlan(
            outer_folds=self.outer_folds,
            inner_folds=self.inner_folds,
            meta_folds=self.meta_folds,
            seed=self.seed,
        )


def _parse_grid(text: str) -> tuple[tuple[int, ...], tuple[int, ...]]:
    try:
        est_part, depth_part = text.split("x")
        ests = tuple(int(v) for v in est_part.split(",") if v)
        depths = tuple(int(v) for v in depth_part.split(",") if v)
    except ValueError:
        raise UsageError(f"bad --grid {text!r}; expected e.g. 25,50x10,25") from None
    if not ests or not depths:
        raise UsageError(f"bad --grid {text!r}: empty axis")
    return ests, depths


def _parse_lambdas(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v != "")
    except ValueError:
        raise UsageError(f"bad --lambdas {text!r}") from None


def _parse_synth(text: str) -> dict | str:
    if text == "default":
        return "default"
    if text.strip().startswith("{"):
        return json.loads(text)
    return json.loads(Path(text).read_text())


def _load_config(path: str) -> RunConfig:
    doc = json.loads(Path(path).read_text())
    cfg = RunConfig()
    for key, value in doc.items():
        if not hasattr(cfg, key):
            raise UsageError(f"unknown config key {key!r}")
        current = getattr(cfg, key)
        if isinstance(current, tuple) and value is not None:
            value = tuple(value)
        setattr(cfg, key, value)
    return cfg


def _config_from_args(args) -> RunConfig:
    cfg = _load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "csv", None):
        cfg.csv = args.csv
    if getattr(args, "synth", None):
        cfg.synth = _parse_synth(args.synth)
    if getattr(args, "dates", None):
        cfg.date_columns = tuple(args.dates.split(","))
    if getattr(args, "all_dates", False):
        cfg.all_dates = True
    if getattr(args, "marker", None) is not None:
        cfg.marker = args.marker
    if getattr(args, "grid", None):
        cfg.grid_estimators, cfg.grid_depths = _parse_grid(args.grid)
    if getattr(args, "scenarios", None):
        try:
            cfg.scenarios = tuple(int(s) for s in args.scenarios.split(","))
        except ValueError:
            raise UsageError(f"bad --scenarios {args.scenarios!r}") from None
    if getattr(args, "lambdas", None):
        cfg.lambdas = _parse_lambdas(args.lambdas)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.out = args.out
    if getattr(args, "base_port", None) is not None:
        cfg.base_port = args.base_port
    return cfg


def _synth_spec(cfg: RunConfig) -> SynthSpec:
    if cfg.synth == "default" or cfg.synth is None:
        return SynthSpec(seed=cfg.seed)
    doc = dict(cfg.synth)
    doc.setdefault("seed", cfg.seed)
    for key in ("unit_feature_counts", "visit_probabilities", "classes"):
        if key in doc:
            doc[key] = tuple(doc[key])
    return SynthSpec(**doc)


def _load_dataset(cfg: RunConfig) -> Dataset:
    """Materialize, compress dates, impute: the standard preparation."""
    if cfg.csv:
        schema = CsvSchema(
            date_columns=frozenset(cfg.date_columns),
            all_features_date=cfg.all_dates,
        )
        ds = load_csv(cfg.csv, schema)
    elif cfg.synth is not None:
        ds = generate_synthetic(_synth_spec(cfg))
    else:
        raise UsageError("no dataset: pass --csv or --synth")
    ds = compress_dates(ds, per_unit=True)
    config = ImputationConfig(cfg.marker) if cfg.marker is not None else None
    return impute_marker(ds, config)


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args) -> int:
    cfg = _config_from_args(args)
    spec = _synth_spec(cfg)
    ds = generate_synthetic(spec)
    out = Path(cfg.out)
    if out.suffix != ".csv":
        out = _outdir(cfg) / "synthetic.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    to_csv(ds, out)
    rate = float(ds.labels.mean()) if ds.n_items else 0.0
    print(
        f"wrote {out}: {ds.n_items} items, {ds.n_columns} columns, "
        f"positive rate {rate:.4f}, missing cells {ds.missing_count()}"
    )
    return EXIT_OK


def cmd_ingest(args) -> int:
    cfg = _config_from_args(args)
    if not cfg.csv and cfg.synth is None:
        raise UsageError("ingest needs --csv or --synth")
    ds = _load_dataset(cfg)
    parts = partition_by_unit(ds)
    print(
        f"dataset: {ds.n_items} items, {ds.n_columns} columns after preparation, "
        f"marker {ds.marker}, classes {list(ds.classes)}"
    )
    for part in parts:
        share = part.coverage.mean() * 100 if ds.n_items else 0.0
        print(f"  unit {part.unit_id}: {part.width} columns, visit share {share:.1f}%")
    if args.prepared:
        to_csv(ds, args.prepared)
        print(f"wrote prepared copy to {args.prepared}")
    return EXIT_OK


def _train_artifacts(cfg: RunConfig, ds: Dataset):
    """Leak-free production fit: sub-models on one stratified half, the meta
    model on the other half's aggregated sub-predictions, plus the shared-pool
    model on everything."""
    parts = partition_by_unit(ds)
    rng_seed = derive_seed(cfg.seed, "train-split")
    fold = stratified_fold_ids(ds.labels, 2, rng_seed)
    half_a = np.flatnonzero(fold == 0)
    half_b = np.flatnonzero(fold == 1)
    base = ForestParams(
        n_estimators=max(cfg.grid_estimators),
        max_depth=max(cfg.grid_depths),
        seed=derive_seed(cfg.seed, "train-subs"),
    )
    cover_a = {
        p.unit_id: np.intersect1d(np.flatnonzero(p.coverage), half_a) for p in parts
    }
    sub_models = {}
    for p in parts:
        idx = cover_a[p.unit_id]
        if len(idx) < 6 or len(np.unique(ds.labels[idx])) < 2:
            continue
        X = ds.values[np.ix_(idx, p.column_indices)]
        sub_models[p.unit_id] = train_forest(
            X, ds.labels[idx], replace(base, seed=derive_seed(cfg.seed, "sub", p.unit_id)),
            classes=ds.classes,
        )
    preds_b = emit_subpredictions(sub_models, ds, parts, half_b)
    rows_b = aggregate(
        preds_b, [p.unit_id for p in parts], float(ds.marker), ds.classes,
        part_ids=[ds.items[i] for i in half_b],
    )
    meta_model = train_forest(
        rows_to_matrix(rows_b), ds.labels[half_b],
        replace(base, seed=derive_seed(cfg.seed, "meta")), classes=ds.classes,
    )
    complete_model = train_forest(
        ds.values, ds.labels, replace(base, seed=derive_seed(cfg.seed, "complete")),
        classes=ds.classes,
    )
    return parts, sub_models, meta_model, complete_model


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    ds = _load_dataset(cfg)
    parts, sub_models, meta_model, complete_model = _train_artifacts(cfg, ds)
    out = _outdir(cfg)
    models_dir = out / "models"
    models_dir.mkdir(exist_ok=True)
    headers = ds.column_headers()
    mesh = {
        "marker": float(ds.marker),
        "classes": list(ds.classes),
        "meta": {
            "model": "models/meta.json",
            "port": cfg.base_port,
            "expected_units": [p.unit_id for p in parts],
        },
        "units": {},
    }
    (models_dir / "meta.json").write_text(meta_model.to_json())
    (models_dir / "complete.json").write_text(complete_model.to_json())
    for i, part in enumerate(parts):
        model = sub_models.get(part.unit_id)
        if model is None:
            continue
        name = f"sub_{part.unit_id}.json"
        (models_dir / name).write_text(model.to_json())
        mesh["units"][part.unit_id] = {
            "model": f"models/{name}",
            "port": cfg.base_port + 1 + i,
            "features": [headers[j] for j in part.column_indices],
        }
    (out / "mesh.json").write_text(reports.canonical_json(mesh))
    print(
        f"wrote {len(mesh['units'])} sub-unit models, the meta model and the "
        f"shared-pool model under {models_dir}; mesh config at {out / 'mesh.json'}"
    )
    return EXIT_OK


def _load_mesh(path: str):
    doc = json.loads(Path(path).read_text())
    base = Path(path).parent
    meta_model = ForestModel.from_json((base / doc["meta"]["model"]).read_text())
    units = {}
    for unit_id, info in doc["units"].items():
        units[unit_id] = {
            "model": ForestModel.from_json((base / info["model"]).read_text()),
            "port": info["port"],
            "features": tuple(info["features"]),
        }
    return doc, meta_model, units


def cmd_serve(args) -> int:
    doc, meta_model, units = _load_mesh(args.config)
    transcript = Transcript(args.transcript) if args.transcript else Transcript()
    meta = service.MetaService(
        service.ServiceConfig(
            unit_id="meta",
            port=doc["meta"]["port"],
            expected_units=tuple(doc["meta"]["expected_units"]),
            marker=doc["marker"],
        ),
        meta_model,
        transcript,
    )
    meta.start()
    subs = []
    for unit_id, info in units.items():
        svc = service.SubUnitService(
            service.ServiceConfig(
                unit_id=unit_id,
                port=info["port"],
                meta_port=meta.port,
                feature_order=info["features"],
                marker=doc["marker"],
            ),
            info["model"],
            transcript,
        )
        svc.start()
        subs.append(svc)
    print(f"meta service on :{meta.port}; sub-units " +
          ", ".join(f"{s.config.unit_id}:{s.port}" for s in subs))
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        for s in subs:
            s.stop()
        meta.stop()
    return EXIT_OK


def cmd_replay(args) -> int:
    cfg = _config_from_args(args)
    if not args.mesh_config:
        raise UsageError("replay needs --mesh pointing at a mesh.json")
    doc, meta_model, units = _load_mesh(args.mesh_config)
    ds = _load_dataset(cfg)
    parts = partition_by_unit(ds)
    out = _outdir(cfg)
    addresses = {u: ("127.0.0.1", info["port"]) for u, info in units.items()}
    outcomes = service.replay(
        ds, parts, addresses, ("127.0.0.1", doc["meta"]["port"]), rate=args.rate
    )
    lines = ["part_id,prediction,probability,units_sent,failed"]
    for o in outcomes:
        lines.append(
            f"{o.part_id},{o.prediction or ''},"
            f"{'' if o.probability is None else repr(o.probability)},{o.units_sent},{int(o.failed)}"
        )
    (out / "replay_outcomes.csv").write_text("\n".join(lines) + "\n")
    ok = sum(1 for o in outcomes if not o.failed)
    print(f"replayed {len(outcomes)} parts, {ok} complete; outcomes in {out / 'replay_outcomes.csv'}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _config_from_args(args)
    ds = _load_dataset(cfg)
    parts = partition_by_unit(ds)
    out = _outdir(cfg)
    grid, plan = cfg.grid(), cfg.plan()
    scenario_reports: dict[int, baselines.ScenarioReport] = {}
    for s in cfg.scenarios:
        rep = baselines.run_scenario(
            ds, s, grid, plan, partitions=parts,
            transcript_path=out / f"transcript_s{s}.ndjson",
        )
        scenario_reports[s] = rep
        for name, eval_rep in rep.eval_reports.items():
            safe = name.replace(" ", "_")
            if eval_rep.fold_records:
                write_fold_audit(eval_rep, out / f"folds_s{s}_{safe}.csv")
    price = None
    if 2 in scenario_reports and 3 in scenario_reports:
        price = baselines.price_of_privacy(scenario_reports[2], scenario_reports[3])
    shares = reports.visit_shares(parts)
    text = reports.render_comparison_text(scenario_reports, price, shares)
    (out / "report.txt").write_text(text)
    doc = reports.comparison_doc(scenario_reports, price, shares, cfg.echo())
    (out / "report.json").write_text(reports.canonical_json(doc))
    (out / "metrics.csv").write_text(reports.metrics_csv(scenario_reports))
    (out / "visit_shares.csv").write_text(reports.visit_shares_csv(shares))
    print(text, end="")
    print(f"reports written under {out}")
    return EXIT_OK


def cmd_noise_sweep(args) -> int:
    cfg = _config_from_args(args)
    ds = _load_dataset(cfg)
    out = _outdir(cfg)
    result = baselines.noising_sweep(
        ds, cfg.grid(), cfg.plan(), lambdas=cfg.lambdas,
        noise_seed=derive_seed(cfg.seed, "noise"),
    )
    (out / "sweep.csv").write_text(reports.sweep_csv(result))
    (out / "sweep.json").write_text(reports.canonical_json(reports.sweep_doc(result)))
    (out / "sweep.plt").write_text(reports.sweep_plot_layout("sweep.csv"))
    for lam, m in zip(result.lambdas, result.mccs):
        print(f"lambda {lam:4.1f}: MCC {m:.4f}")
    print(f"sweep data written under {out}")
    return EXIT_OK


def cmd_audit(args) -> int:
    cfg = _config_from_args(args)
    transcript = Transcript.load(args.transcript)
    ds = _load_dataset(cfg)
    parts = partition_by_unit(ds)
    ids = set()
    for col in ds.columns:
        ids.add(col.fid.text)
        ids.add(col.fid.header(col.kind))
    verdict = audit_confidentiality(transcript, ids, build_raw_value_index(ds, parts))
    status = "PASS" if verdict.passed else "FAIL"
    print(f"{status}, {len(verdict.violations)} violations over {verdict.messages_scanned} messages")
    for i, fieldname in verdict.violations[:10]:
        print(f"  message {i}: {fieldname}")
    return EXIT_OK


def _add_dataset_flags(p, include_marker=True):
    p.add_argument("--csv", help="dataset CSV path")
    p.add_argument("--synth", help="'default', inline JSON, or a JSON spec file")
    p.add_argument("--dates", help="comma-separated date column names")
    p.add_argument("--all-dates", action="store_true", dest="all_dates",
                   help="treat every feature column as a date")
    if include_marker:
        p.add_argument("--marker", type=float, help="imputation marker override")
    p.add_argument("--seed", type=int, help="run seed")
    p.add_argument("--config", help="RunConfig JSON file (flags override)")
    p.add_argument("--out", help="output directory")


def build_parser() -> _Parser:
    parser = _Parser(prog="metastack", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset CSV")
    _add_dataset_flags(p, include_marker=False)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("ingest", help="load, prepare and summarize a dataset")
    _add_dataset_flags(p)
    p.add_argument("--prepared", help="write the prepared dataset to this CSV")
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("train", help="fit deployment models and a mesh config")
    _add_dataset_flags(p)
    p.add_argument("--grid", help="hyperparameter grid, e.g. 25,50x10,25")
    p.add_argument("--base-port", type=int, dest="base_port")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("compare", help="run the scenario comparison")
    _add_dataset_flags(p)
    p.add_argument("--grid", help="hyperparameter grid, e.g. 25,50x10,25")
    p.add_argument("--scenarios", help="comma-separated subset of 1,2,3")
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("noise-sweep", help="additive-noise degradation sweep")
    _add_dataset_flags(p)
    p.add_argument("--grid", help="hyperparameter grid")
    p.add_argument("--lambdas", help="comma-separated noise ratios")
    p.set_defaults(fn=cmd_noise_sweep)

    p = sub.add_parser("audit", help="re-check a transcript for leaks")
    p.add_argument("transcript", help="ndjson transcript file")
    _add_dataset_flags(p)
    p.set_defaults(fn=cmd_audit)

    p = sub.add_parser("serve", help="launch the service mesh and block")
    p.add_argument("--config", required=True, help="mesh.json from train")
    p.add_argument("--transcript", help="append boundary messages to this file")
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("replay", help="stream a dataset through a running mesh")
    _add_dataset_flags(p)
    p.add_argument("--mesh", dest="mesh_config", help="mesh.json from train")
    p.add_argument("--rate", type=float, help="parts per second cap")
    p.set_defaults(fn=cmd_replay)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ExperimentError as exc:
        print(f"experiment failure: {exc}", file=sys.stderr)
        return EXIT_EXPERIMENT
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except json.JSONDecodeError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def entry() -> None:
    sys.exit(main())
