"""Monotonic additive risk scoring and guess-vs-answer trust analysis.

Risk starts at zero and only accumulates: answered choices contribute
their non-negative weights, and an interaction rule adds its bonus when
every one of its conditions is met. The trust analysis compares corrected
predictions against what the model guessed, flagging sessions where
confident guesses were overturned too often.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .engine import CompletedQuestionnaire, Provenance
from .errors import EmptyInput, InvalidChoice, MissingFactor, UnknownFactor
from .kb import KnowledgeBase
from .profiles import embed

#: corrections below this prediction confidence are never discrepancies
CONFIDENCE_GATE = 0.7
#: semantic test: corrected label must stay at least this close
SIMILARITY_FLOOR = 0.5
#: ordinal test: this many choice positions apart is a drastic correction
DISTANCE_GATE = 2
#: trust flag trips at this many discrepancies ...
TRUST_COUNT = 3
#: ... or this share of all prefilled predictions
TRUST_RATIO = 0.25


@dataclass(frozen=True)
class Discrepancy:
    factor_id: str
    predicted_index: int
    corrected_index: int
    prediction_confidence: float
    answer_similarity: float


@dataclass(frozen=True)
class RiskReport:
    session_id: str
    raw_score: int
    normalized_score: float
    contributions: tuple  # (factor id, points)
    interaction_hits: tuple  # (rule id, bonus)
    discrepancies: tuple
    trust_flag: bool


def _score_answers(answers, kb: KnowledgeBase):
    contributions = []
    for factor in kb.factors:
        if factor.id not in answers:
            continue
        index = answers[factor.id]
        if not factor.valid_choice(index):
            raise InvalidChoice(f"choice {index} invalid for factor {factor.id!r}")
        contributions.append((factor.id, factor.choices[index].weight))
    hits = []
    for rule in kb.interactions:
        if all(fid in answers and answers[fid] >= floor for fid, floor in rule.condition):
            hits.append((rule.id, rule.bonus))
    return tuple(contributions), tuple(hits)


def risk_score(questionnaire: CompletedQuestionnaire, kb: KnowledgeBase) -> RiskReport:
    """Score a completed questionnaire; unanswered factors contribute zero."""
    for fid in questionnaire.final_answers:
        if not kb.has_factor(fid):
            raise UnknownFactor(f"unknown factor {fid!r}")
    contributions, hits = _score_answers(questionnaire.final_answers, kb)
    raw = sum(points for _, points in contributions) + sum(bonus for _, bonus in hits)
    ceiling = kb.max_possible_score()
    # an all-zero catalog can only yield raw = 0; display it as 0.0
    return RiskReport(
        session_id=questionnaire.session_id,
        raw_score=raw,
        normalized_score=100.0 * raw / ceiling if ceiling else 0.0,
        contributions=contributions,
        interaction_hits=hits,
        discrepancies=(),
        trust_flag=False,
    )


def true_risk_score(ground_truth, kb: KnowledgeBase) -> int:
    """Same formula applied to a total answer map over every catalog factor."""
    for fid in ground_truth:
        if not kb.has_factor(fid):
            raise UnknownFactor(f"unknown factor {fid!r}")
    missing = [f.id for f in kb.factors if f.id not in ground_truth]
    if missing:
        raise MissingFactor(f"ground truth lacks {len(missing)} factors, first {missing[0]!r}")
    contributions, hits = _score_answers(ground_truth, kb)
    return sum(points for _, points in contributions) + sum(bonus for _, bonus in hits)


def _label_similarity(a: str, b: str, embed_fn) -> float:
    try:
        u = embed_fn(a)
        v = embed_fn(b)
    except EmptyInput:
        # a tokenless label has no usable semantics; treat as maximally far
        return 0.0
    norm = math.sqrt(sum(x * x for x in u)) * math.sqrt(sum(x * x for x in v))
    if norm == 0.0:
        return 0.0
    return float(sum(x * y for x, y in zip(u, v)) / norm)


def detect_discrepancies(
    questionnaire: CompletedQuestionnaire,
    kb: KnowledgeBase,
    embed_fn=embed,
    *,
    confidence_gate: float = CONFIDENCE_GATE,
    similarity_floor: float = SIMILARITY_FLOOR,
    distance_gate: int = DISTANCE_GATE,
    trust_count: int = TRUST_COUNT,
    trust_ratio: float = TRUST_RATIO,
):
    """Corrected predictions that were both confident and far off.

    A correction counts when the model was confident (at or above the
    gate) and the applicant's answer moved drastically: semantically (label
    cosine below the floor) or ordinally (at least distance_gate choice
    positions). Returns (discrepancies, trust_flag).
    """
    snapshot = {p.factor_id: p for p in questionnaire.predictions_snapshot}
    found = []
    for fid, kind in questionnaire.provenance.items():
        if kind is not Provenance.PREDICTED_CORRECTED:
            continue
        prediction = snapshot[fid]
        corrected = questionnaire.final_answers[fid]
        choices = kb.factor(fid).choices
        similarity = _label_similarity(
            choices[prediction.choice_index].label, choices[corrected].label, embed_fn
        )
        if prediction.confidence < confidence_gate:
            continue
        if similarity >= similarity_floor and abs(prediction.choice_index - corrected) < distance_gate:
            continue
        found.append(
            Discrepancy(
                factor_id=fid,
                predicted_index=prediction.choice_index,
                corrected_index=corrected,
                prediction_confidence=prediction.confidence,
                answer_similarity=similarity,
            )
        )
    found.sort(key=lambda d: d.factor_id)
    total = len(questionnaire.predictions_snapshot)
    flag = len(found) >= trust_count or (total > 0 and len(found) / total >= trust_ratio)
    return tuple(found), flag


def full_report(questionnaire: CompletedQuestionnaire, kb: KnowledgeBase, embed_fn=embed) -> RiskReport:
    """Risk score with the trust analysis folded in."""
    report = risk_score(questionnaire, kb)
    discrepancies, flag = detect_discrepancies(questionnaire, kb, embed_fn)
    return replace(report, discrepancies=discrepancies, trust_flag=flag)


def report_to_json(report: RiskReport) -> dict:
    return {
        "session_id": report.session_id,
        "raw_score": report.raw_score,
        "normalized_score": report.normalized_score,
        "contributions": [[fid, points] for fid, points in report.contributions],
        "interaction_hits": [[rid, bonus] for rid, bonus in report.interaction_hits],
        "discrepancies": [
            {
                "factor_id": d.factor_id,
                "predicted_index": d.predicted_index,
                "corrected_index": d.corrected_index,
                "prediction_confidence": d.prediction_confidence,
                "answer_similarity": d.answer_similarity,
            }
            for d in report.discrepancies
        ],
        "trust_flag": report.trust_flag,
    }
