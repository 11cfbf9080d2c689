"""Cohort-level comparison of questioning approaches.

Each applicant from a synthetic cohort runs one full session per
approach, answered by the scripted respondent. A gateway failure marks
that single record as failed and the run moves on; failed records stay
in the report but are excluded from the aggregates.
"""
from __future__ import annotations

import csv
import enum
import io
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

from .engine import (
    Done,
    EngineConfig,
    Mode,
    finalize,
    forecast,
    next_question,
    review,
    start_session,
    submit_answer,
)
from .errors import (
    ConfigError,
    DegenerateInput,
    EmptyInput,
    EndpointError,
    LengthMismatch,
    ParseError,
)
from .kb import KnowledgeBase
from .llm import MockModel
from .scoring import full_report
from .synth import ScriptedRespondent


class ApproachKind(enum.Enum):
    TRADITIONAL = "traditional"
    DYNAMIC_MOCK = "dynamic-mock"
    DYNAMIC_REMOTE = "dynamic-remote"


@dataclass(frozen=True)
class Approach:
    kind: ApproachKind
    model: str | None = None  # remote runs only

    @property
    def label(self) -> str:
        if self.model:
            return f"{self.kind.value}:{self.model}"
        return self.kind.value


def parse_approaches(spec: str) -> tuple[Approach, ...]:
    """Parse the comma-separated CLI form, e.g. "traditional,dynamic-mock"."""
    approaches = []
    for token in spec.split(","):
        token = token.strip()
        if not token:
            continue
        kind_name, _, model = token.partition(":")
        try:
            kind = ApproachKind(kind_name)
        except ValueError:
            valid = ", ".join(k.value for k in ApproachKind)
            raise ConfigError(f"unknown approach {kind_name!r}, expected one of: {valid}")
        if model and kind is not ApproachKind.DYNAMIC_REMOTE:
            raise ConfigError(f"approach {kind.value} does not take a model name")
        approaches.append(Approach(kind, model or None))
    if not approaches:
        raise ConfigError("no approaches requested")
    return tuple(approaches)


@dataclass(frozen=True)
class RunRecord:
    applicant_id: str
    approach: str  # Approach.label
    questions_answered: int
    raw_score: int
    true_score: int
    forecast_latency: float
    selection_latency: float
    trust_flag: bool
    failed: bool = False
    error: str = ""


@dataclass(frozen=True)
class ApproachAggregate:
    approach: str
    runs: int
    failures: int
    # None when no run of the approach succeeded (or, for pearson,
    # when the successful scores are too few or degenerate)
    mean_questions: float | None
    mae: float | None
    pearson_r: float | None
    mean_forecast_latency: float | None
    mean_selection_latency: float | None
    trust_flag_rate: float | None


@dataclass(frozen=True)
class EvalReport:
    aggregates: tuple  # of ApproachAggregate, first-seen order
    records: tuple  # of RunRecord


# ---------------------------------------------------------------------------
# metrics

def mae(scores, truths) -> float:
    if len(scores) != len(truths):
        raise LengthMismatch(f"{len(scores)} scores against {len(truths)} truths")
    if not scores:
        raise EmptyInput("mean absolute error of empty vectors")
    return math.fsum(abs(s - t) for s, t in zip(scores, truths)) / len(scores)


def pearson(x, y) -> float:
    if len(x) != len(y):
        raise LengthMismatch(f"{len(x)} points against {len(y)}")
    if len(x) < 2:
        raise DegenerateInput("correlation needs at least two points")
    mean_x = math.fsum(x) / len(x)
    mean_y = math.fsum(y) / len(y)
    dx = [v - mean_x for v in x]
    dy = [v - mean_y for v in y]
    sxx = math.fsum(d * d for d in dx)
    syy = math.fsum(d * d for d in dy)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateInput("zero variance")
    r = math.fsum(a * b for a, b in zip(dx, dy)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


# ---------------------------------------------------------------------------
# session driving

def _gateway_for(approach: Approach, respondent, kb: KnowledgeBase, endpoint_factory):
    if approach.kind is ApproachKind.TRADITIONAL:
        return None
    if approach.kind is ApproachKind.DYNAMIC_MOCK:
        return MockModel(kb, respondent.answer)
    if endpoint_factory is None:
        raise ConfigError("remote approach requested without an endpoint factory")
    return endpoint_factory(approach)


def run_single(applicant, approach: Approach, kb: KnowledgeBase, *,
               endpoint_factory=None, config: EngineConfig | None = None,
               sleep=time.sleep) -> RunRecord:
    respondent = ScriptedRespondent(applicant)
    gateway = _gateway_for(approach, respondent, kb, endpoint_factory)
    mode = Mode.TRADITIONAL if approach.kind is ApproachKind.TRADITIONAL else Mode.DYNAMIC
    session = start_session(applicant.profile, mode, kb, config)
    try:
        if mode is Mode.DYNAMIC:
            forecast(session, gateway, kb, sleep=sleep)
            for entry in list(session.prefilled):
                decision = respondent.adjudicate(entry.prediction)
                review(session, entry.prediction.factor_id, decision, kb)
        while True:
            action = next_question(session, gateway, kb, sleep=sleep)
            if isinstance(action, Done):
                break
            fid = action.factor.id
            submit_answer(session, fid, respondent.answer(fid), kb)
        questionnaire = finalize(session)
    except EndpointError as exc:
        return RunRecord(
            applicant_id=applicant.id,
            approach=approach.label,
            questions_answered=session.question_count(),
            raw_score=0,
            true_score=applicant.true_score,
            forecast_latency=session.clock["forecast"],
            selection_latency=session.clock["selection"],
            trust_flag=False,
            failed=True,
            error=str(exc),
        )
    report = full_report(questionnaire, kb)
    return RunRecord(
        applicant_id=applicant.id,
        approach=approach.label,
        questions_answered=session.question_count(),
        raw_score=report.raw_score,
        true_score=applicant.true_score,
        forecast_latency=session.clock["forecast"],
        selection_latency=session.clock["selection"],
        trust_flag=report.trust_flag,
    )


def run_experiment(cohort, kb: KnowledgeBase, approaches, *,
                   endpoint_factory=None, config: EngineConfig | None = None,
                   sleep=time.sleep) -> list:
    """One record per applicant and approach, cohort-major order.

    Regions ride on the cohort profiles, so no geography argument is
    needed here; attach them when reading the cohort.
    """
    return [
        run_single(applicant, approach, kb,
                   endpoint_factory=endpoint_factory, config=config, sleep=sleep)
        for applicant in cohort
        for approach in approaches
    ]


# ---------------------------------------------------------------------------
# aggregation

def _mean(values) -> float:
    return math.fsum(values) / len(values)


def build_report(records) -> EvalReport:
    if not records:
        raise EmptyInput("no run records")
    order: list[str] = []
    groups: dict[str, list] = {}
    for record in records:
        if record.approach not in groups:
            order.append(record.approach)
            groups[record.approach] = []
        groups[record.approach].append(record)

    aggregates = []
    for label in order:
        rows = groups[label]
        valid = [r for r in rows if not r.failed]
        if valid:
            raws = [r.raw_score for r in valid]
            trues = [r.true_score for r in valid]
            try:
                r_value = pearson(raws, trues)
            except DegenerateInput:
                r_value = None
            aggregate = ApproachAggregate(
                approach=label,
                runs=len(rows),
                failures=len(rows) - len(valid),
                mean_questions=_mean([r.questions_answered for r in valid]),
                mae=mae(raws, trues),
                pearson_r=r_value,
                mean_forecast_latency=_mean([r.forecast_latency for r in valid]),
                mean_selection_latency=_mean([r.selection_latency for r in valid]),
                trust_flag_rate=sum(r.trust_flag for r in valid) / len(valid),
            )
        else:
            aggregate = ApproachAggregate(
                approach=label, runs=len(rows), failures=len(rows),
                mean_questions=None, mae=None, pearson_r=None,
                mean_forecast_latency=None, mean_selection_latency=None,
                trust_flag_rate=None,
            )
        aggregates.append(aggregate)
    return EvalReport(aggregates=tuple(aggregates), records=tuple(records))


# ---------------------------------------------------------------------------
# serialization

def record_to_json(record: RunRecord) -> dict:
    return {
        "applicant_id": record.applicant_id,
        "approach": record.approach,
        "questions_answered": record.questions_answered,
        "raw_score": record.raw_score,
        "true_score": record.true_score,
        "forecast_latency": record.forecast_latency,
        "selection_latency": record.selection_latency,
        "trust_flag": record.trust_flag,
        "failed": record.failed,
        "error": record.error,
    }


def record_from_json(doc: dict) -> RunRecord:
    try:
        return RunRecord(
            applicant_id=str(doc["applicant_id"]),
            approach=str(doc["approach"]),
            questions_answered=int(doc["questions_answered"]),
            raw_score=int(doc["raw_score"]),
            true_score=int(doc["true_score"]),
            forecast_latency=float(doc["forecast_latency"]),
            selection_latency=float(doc["selection_latency"]),
            trust_flag=bool(doc["trust_flag"]),
            failed=bool(doc.get("failed", False)),
            error=str(doc.get("error", "")),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"run record: {exc}") from exc


def _aggregate_to_json(aggregate: ApproachAggregate) -> dict:
    return {
        "approach": aggregate.approach,
        "runs": aggregate.runs,
        "failures": aggregate.failures,
        "mean_questions": aggregate.mean_questions,
        "mae": aggregate.mae,
        "pearson_r": aggregate.pearson_r,
        "mean_forecast_latency": aggregate.mean_forecast_latency,
        "mean_selection_latency": aggregate.mean_selection_latency,
        "trust_flag_rate": aggregate.trust_flag_rate,
    }


def report_to_json(report: EvalReport) -> dict:
    return {
        "approaches": [_aggregate_to_json(a) for a in report.aggregates],
        "records": [record_to_json(r) for r in report.records],
    }


def report_from_json(doc: dict) -> EvalReport:
    """Rebuild the report from its JSON form, recomputing aggregates
    from the records so stale numbers cannot sneak back in."""
    try:
        records = [record_from_json(r) for r in doc["records"]]
    except (KeyError, TypeError) as exc:
        raise ParseError(f"evaluation report: {exc}") from exc
    return build_report(records)


def write_report(report: EvalReport, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(report_to_json(report), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def records_to_csv(records) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow([
        "applicant_id", "approach", "questions_answered", "raw_score",
        "true_score", "forecast_latency", "selection_latency",
        "trust_flag", "failed", "error",
    ])
    for r in records:
        writer.writerow([
            r.applicant_id, r.approach, r.questions_answered, r.raw_score,
            r.true_score, f"{r.forecast_latency:.6f}", f"{r.selection_latency:.6f}",
            int(r.trust_flag), int(r.failed), r.error,
        ])
    return buffer.getvalue()


def _cell(value, fmt: str) -> str:
    if value is None:
        return "-"
    return format(value, fmt)


def summary_table(report: EvalReport) -> str:
    headers = ["approach", "runs", "failed", "questions", "MAE", "pearson",
               "trust rate", "forecast s", "selection s"]
    rows = [headers]
    for a in report.aggregates:
        rows.append([
            a.approach,
            str(a.runs),
            str(a.failures),
            _cell(a.mean_questions, ".2f"),
            _cell(a.mae, ".3f"),
            _cell(a.pearson_r, ".4f"),
            _cell(a.trust_flag_rate, ".2%"),
            _cell(a.mean_forecast_latency, ".3f"),
            _cell(a.mean_selection_latency, ".3f"),
        ])
    widths = [max(len(row[i]) for row in rows) for i in range(len(headers))]
    lines = []
    for index, row in enumerate(rows):
        cells = [row[0].ljust(widths[0])]
        cells += [cell.rjust(widths[i]) for i, cell in enumerate(row) if i > 0]
        lines.append("  ".join(cells).rstrip())
        if index == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
