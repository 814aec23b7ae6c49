"""Report emission: aligned text tables for humans, canonical JSON and CSV
for machines. Every number shown in the text form also appears in the
machine-readable export."""

from __future__ import annotations

import json
from fractions import Fraction
from typing import Mapping, Sequence

from .baselines import NoiseSweepResult, PriceOfPrivacy, ScenarioReport
from .features import UnitPartition
from .forest import ForestParams, GridSearchResult
from .metrics import ConfusionMatrix, MetricSuite
from .stacking import EvaluationReport, ModelReport


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False)


def visit_shares(partitions: Sequence[UnitPartition]) -> dict[str, float]:
    """Share of parts passing each unit (the per-line visit statistic)."""
    out = {}
    for part in partitions:
        total = len(part.coverage)
        out[part.unit_id] = float(part.coverage.sum() / total) if total else 0.0
    return out


def _params_text(params: Sequence[ForestParams]) -> tuple[str, str]:
    ests = ",".join(str(p.n_estimators) for p in params)
    depths = ",".join(str(p.max_depth) for p in params)
    return ests, depths


def _suite_doc(s: MetricSuite) -> dict:
    return s.as_dict()


def _confusion_doc(cm: ConfusionMatrix) -> dict:
    return {"classes": list(cm.classes), "counts": cm.counts.tolist()}


def _grid_doc(g: GridSearchResult) -> dict:
    return {
        "best": {"n_estimators": g.best.n_estimators, "max_depth": g.best.max_depth},
        "table": [
            {
                "n_estimators": c.n_estimators,
                "max_depth": c.max_depth,
                "mean_metric": c.mean_metric,
                "fold_metrics": list(c.fold_metrics),
            }
            for c in g.table
        ],
        "warnings": list(g.warnings),
    }


def _model_doc(r: ModelReport) -> dict:
    return {
        "name": r.name,
        "metrics": _suite_doc(r.metrics),
        "confusion": _confusion_doc(r.confusion),
        "fold_mccs": list(r.fold_mccs),
        "best_params": [
            {"n_estimators": p.n_estimators, "max_depth": p.max_depth}
            for p in r.best_params
        ],
        "grid_searches": [_grid_doc(g) for g in r.grid_results],
        "n_evaluated": r.n_evaluated,
    }


def _eval_doc(rep: EvaluationReport) -> dict:
    return {
        "protocol": rep.protocol,
        "header": rep.header,
        "plan": {
            "outer_folds": rep.plan.outer_folds,
            "inner_folds": rep.plan.inner_folds,
            "meta_folds": rep.plan.meta_folds,
            "seed": rep.plan.seed,
        },
        "model": _model_doc(rep.model),
        "sub_models": {u: _model_doc(m) for u, m in rep.sub_models.items()},
        "warnings": list(rep.warnings),
    }


def _fraction_doc(f: Fraction) -> dict:
    return {"num": f.numerator, "den": f.denominator, "value": float(f)}


def scenario_doc(rep: ScenarioReport) -> dict:
    return {
        "scenario": rep.scenario,
        "evaluations": {name: _eval_doc(r) for name, r in rep.eval_reports.items()},
        "volume": {
            "k": rep.volume.k,
            "m": rep.volume.m,
            "n_i": list(rep.volume.n_i),
            "scenario1": _fraction_doc(rep.volume.scenario1),
            "scenario2": _fraction_doc(rep.volume.scenario2),
            "scenario3": _fraction_doc(rep.volume.scenario3),
            "savings": _fraction_doc(rep.volume.savings),
            "ratio": _fraction_doc(rep.volume.ratio),
            "ratio_percent": rep.volume.ratio_percent(),
        },
        "traffic": {
            kind: {
                "messages": t.message_count,
                "data_fields": t.data_field_count,
                "bytes": t.byte_total,
            }
            for kind, t in rep.traffic.per_kind.items()
        },
        "audit": {
            "messages_scanned": rep.audit.messages_scanned,
            "violations": len(rep.audit.violations),
            "passed": rep.audit.passed,
            "first_violations": [
                {"message": i, "field": f} for i, f in rep.audit.violations[:20]
            ],
        },
    }


def comparison_doc(
    scenarios: Mapping[int, ScenarioReport],
    price: PriceOfPrivacy | None,
    shares: Mapping[str, float],
    config_echo: Mapping | None = None,
) -> dict:
    doc = {
        "config": dict(config_echo or {}),
        "scenarios": {str(k): scenario_doc(v) for k, v in scenarios.items()},
        "visit_shares": dict(shares),
    }
    if price is not None:
        doc["price_of_privacy"] = {
            "mcc_meta": price.mcc_meta,
            "mcc_complete": price.mcc_complete,
            "relative_gap": price.relative_gap,
            "complete_excess": price.complete_excess,
            "note": price.note,
        }
    return doc


def render_comparison_text(
    scenarios: Mapping[int, ScenarioReport],
    price: PriceOfPrivacy | None,
    shares: Mapping[str, float],
) -> str:
    lines: list[str] = []
    lines.append("MODEL PERFORMANCE")
    lines.append(f"{'Model':<28}{'MCC':>9}  {'#estimators':>14}  {'max depth':>12}")
    order: list[tuple[str, ModelReport, int]] = []
    for s in sorted(scenarios):
        rep = scenarios[s]
        for name, model in sorted(rep.model_reports().items()):
            order.append((name, model, s))
    for name, model, s in order:
        ests, depths = _params_text(model.best_params)
        lines.append(
            f"{name + f' (scenario {s})':<28}{model.metrics.mcc:>9.4f}  {ests:>14}  {depths:>12}"
        )
    lines.append("")
    lines.append("VISIT SHARES (share of parts passing each unit)")
    for unit, share in shares.items():
        lines.append(f"  {unit:<8}{share * 100:6.1f}%")
    lines.append("")
    for s in sorted(scenarios):
        rep = scenarios[s]
        a = rep.audit
        verdict = "PASS" if a.passed else "FAIL"
        lines.append(
            f"scenario {s} audit: {verdict}, {len(a.violations)} violations over "
            f"{a.messages_scanned} messages"
        )
    lines.append("")
    any_rep = scenarios[sorted(scenarios)[0]]
    v = any_rep.volume
    lines.append("DATA VOLUME (per item, analytic; s = one feature)")
    lines.append(f"  scenario 1: {float(v.scenario1):g}")
    lines.append(f"  scenario 2: {float(v.scenario2):g}  (k*m = {v.k}*{v.m})")
    lines.append(f"  scenario 3: {float(v.scenario3):g}  (sum n_i = {sum(v.n_i)})")
    lines.append(
        f"  savings: {float(v.savings):g}  reduction ratio: {v.ratio.numerator}/"
        f"{v.ratio.denominator} = {v.ratio_percent()}"
    )
    for s in sorted(scenarios):
        t = scenarios[s].traffic
        lines.append(
            f"  measured scenario {s}: {t.total_messages} messages, {t.total_bytes} bytes"
        )
    if price is not None:
        lines.append("")
        lines.append("PRICE OF PRIVACY")
        lines.append(
            f"  meta MCC {price.mcc_meta:.4f} vs complete MCC {price.mcc_complete:.4f}"
        )
        if price.relative_gap is not None:
            lines.append(f"  relative gap (mcc3-mcc2)/mcc3: {price.relative_gap * 100:.2f}%")
        if price.complete_excess is not None:
            lines.append(f"  complete excess mcc3/mcc2-1: {price.complete_excess * 100:.2f}%")
        if price.note:
            lines.append(f"  note: {price.note}")
    return "\n".join(lines) + "\n"


def metrics_csv(scenarios: Mapping[int, ScenarioReport]) -> str:
    rows = ["scenario,model,metric,value"]
    for s in sorted(scenarios):
        for name, model in sorted(scenarios[s].model_reports().items()):
            for metric, value in model.metrics.as_dict().items():
                rows.append(f"{s},{name},{metric},{value!r}")
    return "\n".join(rows) + "\n"


def visit_shares_csv(shares: Mapping[str, float]) -> str:
    rows = ["unit,share"]
    for unit, share in shares.items():
        rows.append(f"{unit},{share!r}")
    return "\n".join(rows) + "\n"


def sweep_csv(result: NoiseSweepResult) -> str:
    rows = ["lambda,mcc"]
    for lam, m in zip(result.lambdas, result.mccs):
        rows.append(f"{lam!r},{m!r}")
    return "\n".join(rows) + "\n"


def sweep_doc(result: NoiseSweepResult) -> dict:
    return {
        "lambdas": list(result.lambdas),
        "mccs": list(result.mccs),
        "sigmas": list(result.sigmas),
        "suites": [s.as_dict() for s in result.suites],
    }


def sweep_plot_layout(csv_name: str) -> str:
    """gnuplot-compatible layout for the noising degradation curve."""
    return (
        "set datafile separator ','\n"
        "set key off\n"
        "set xlabel 'additive noise ratio (lambda)'\n"
        "set ylabel 'MCC'\n"
        "set yrange [0:*]\n"
        "set grid\n"
        f"plot '{csv_name}' using 1:2 skip 1 with linespoints pt 7\n"
    )
