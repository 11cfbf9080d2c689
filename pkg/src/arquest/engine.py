"""Underwriting session state machine.

A session runs one of two flows. Traditional walks the fixed 30-question
subset in catalog order. Dynamic first forecasts answers from linked
evidence, lets the applicant review each prediction, then asks adaptively
chosen questions until the model stops or the question budget is spent.
"""
from __future__ import annotations

import time
import uuid
from dataclasses import dataclass, field
from enum import Enum

from .errors import InvalidChoice, OutOfTurn, StateError, UnknownFactor
from .kb import Category, KnowledgeBase, RiskFactor, selection_catalog, traditional_subset
from .llm import Prediction, build_forecast_prompt, build_selection_prompt, request_forecast, request_next_action
from .profiles import UserProfile, retrieve_evidence, validate_details


class Mode(str, Enum):
    TRADITIONAL = "Traditional"
    DYNAMIC = "Dynamic"


class SessionState(str, Enum):
    CREATED = "Created"
    INSIGHTS_LINKED = "InsightsLinked"
    FORECASTED = "Forecasted"
    QUESTIONING = "Questioning"
    COMPLETED = "Completed"


class ReviewState(str, Enum):
    PENDING = "Pending"
    ACCEPTED = "Accepted"
    CORRECTED = "Corrected"


class Provenance(str, Enum):
    PREDICTED_ACCEPTED = "PredictedAccepted"
    PREDICTED_CORRECTED = "PredictedCorrected"
    ASKED_DIRECTLY = "AskedDirectly"


@dataclass(frozen=True)
class Accept:
    """Review decision: keep the predicted choice."""


@dataclass(frozen=True)
class Correct:
    """Review decision: replace the predicted choice."""

    choice_index: int


@dataclass
class PrefilledEntry:
    prediction: Prediction
    review: ReviewState = ReviewState.PENDING
    corrected_index: int | None = None

    @property
    def final_index(self) -> int:
        if self.review is ReviewState.CORRECTED:
            return self.corrected_index
        return self.prediction.choice_index


@dataclass(frozen=True)
class EngineConfig:
    # None defers to the traditional budget of the knowledge base
    question_cap: int | None = None
    skip_review: bool = False


@dataclass
class Session:
    id: str
    mode: Mode
    state: SessionState
    profile: UserProfile
    question_cap: int
    skip_review: bool = False
    prefilled: list[PrefilledEntry] = field(default_factory=list)
    asked: list[str] = field(default_factory=list)
    answers: dict[str, int] = field(default_factory=dict)
    clock: dict[str, float] = field(default_factory=lambda: {"forecast": 0.0, "selection": 0.0})

    def pending_ask(self) -> str | None:
        if self.asked and self.asked[-1] not in self.answers:
            return self.asked[-1]
        return None

    def question_count(self) -> int:
        return len(self.prefilled) + len(self.asked)

    def prefilled_ids(self) -> set[str]:
        return {entry.prediction.factor_id for entry in self.prefilled}


@dataclass(frozen=True)
class Ask:
    factor: RiskFactor


@dataclass(frozen=True)
class Done:
    reason: str = ""


@dataclass(frozen=True)
class CompletedQuestionnaire:
    session_id: str
    mode: Mode
    final_answers: dict
    provenance: dict
    predictions_snapshot: tuple


def start_session(profile: UserProfile, mode: Mode, kb: KnowledgeBase,
                  config: EngineConfig | None = None, session_id: str | None = None) -> Session:
    config = config or EngineConfig()
    validate_details(profile.details)
    cap = config.question_cap if config.question_cap is not None else len(kb.traditional_ids)
    return Session(
        id=session_id or uuid.uuid4().hex,
        mode=mode,
        state=SessionState.INSIGHTS_LINKED,
        profile=profile,
        question_cap=cap,
        skip_review=config.skip_review,
    )


def forecast(session: Session, gateway, kb: KnowledgeBase, *,
             sleep=time.sleep, on_exchange=None) -> Session:
    """Predict answers for every catalog factor from the linked evidence.

    A parse failure degrades to zero predictions; an endpoint failure
    propagates and leaves the session retryable.
    """
    if session.mode is not Mode.DYNAMIC:
        raise StateError("forecast applies to dynamic sessions only")
    if session.state is not SessionState.INSIGHTS_LINKED:
        raise StateError(f"cannot forecast in state {session.state.value}")
    factors = list(kb.factors)
    bundles = [retrieve_evidence(session.profile, factor) for factor in factors]
    prompt = build_forecast_prompt(factors, bundles, session.profile)
    started = time.perf_counter()
    predictions = request_forecast(gateway, prompt, factors, sleep=sleep, on_exchange=on_exchange)
    session.clock["forecast"] += time.perf_counter() - started
    session.prefilled = [PrefilledEntry(prediction=p) for p in predictions]
    session.state = SessionState.FORECASTED
    return session


def review(session: Session, factor_id: str, decision, kb: KnowledgeBase) -> Session:
    if session.state is not SessionState.FORECASTED:
        raise StateError(f"cannot review in state {session.state.value}")
    entry = next((e for e in session.prefilled if e.prediction.factor_id == factor_id), None)
    if entry is None:
        raise UnknownFactor(f"no prediction for factor {factor_id!r}")
    if entry.review is not ReviewState.PENDING:
        raise StateError(f"factor {factor_id!r} already reviewed")
    if isinstance(decision, Correct):
        if not kb.factor(factor_id).valid_choice(decision.choice_index):
            raise InvalidChoice(f"choice {decision.choice_index} invalid for factor {factor_id!r}")
        if decision.choice_index == entry.prediction.choice_index:
            entry.review = ReviewState.ACCEPTED
        else:
            entry.review = ReviewState.CORRECTED
            entry.corrected_index = decision.choice_index
    elif isinstance(decision, Accept):
        entry.review = ReviewState.ACCEPTED
    else:
        raise TypeError(f"unsupported review decision: {decision!r}")
    session.answers[factor_id] = entry.final_index
    if all(e.review is not ReviewState.PENDING for e in session.prefilled):
        session.state = SessionState.QUESTIONING
    return session


def _enter_questioning(session: Session) -> None:
    """Apply the implicit transitions into Questioning.

    Traditional sessions have no forecast phase, so the first question
    request moves them out of InsightsLinked. Dynamic sessions move out of
    Forecasted once nothing awaits review, or immediately when review is
    configured away (every pending prediction then counts as accepted).
    """
    if session.state in (SessionState.QUESTIONING, SessionState.COMPLETED):
        return
    if session.mode is Mode.TRADITIONAL and session.state is SessionState.INSIGHTS_LINKED:
        session.state = SessionState.QUESTIONING
        return
    if session.mode is Mode.DYNAMIC and session.state is SessionState.FORECASTED:
        pending = [e for e in session.prefilled if e.review is ReviewState.PENDING]
        if pending and not session.skip_review:
            raise StateError("predictions await review")
        for entry in pending:
            entry.review = ReviewState.ACCEPTED
            session.answers[entry.prediction.factor_id] = entry.prediction.choice_index
        session.state = SessionState.QUESTIONING
        return
    raise StateError(f"cannot ask questions in state {session.state.value}")


def _answered_pairs(session: Session, kb: KnowledgeBase) -> list[tuple[str, str]]:
    """(factor name, chosen label) pairs, reviewed predictions first.

    Corrected answers deliberately feed back into selection alongside
    accepted ones: a correction is the applicant's strongest signal.
    """
    pairs = []
    ordered = [e.prediction.factor_id for e in session.prefilled] + list(session.asked)
    for fid in ordered:
        if fid in session.answers:
            factor = kb.factor(fid)
            pairs.append((factor.name, factor.choices[session.answers[fid]].label))
    return pairs


def next_question(session: Session, gateway, kb: KnowledgeBase, *,
                  sleep=time.sleep, on_exchange=None):
    """Return the next Ask, or Done once the questionnaire is finished.

    Idempotent while an ask is outstanding: the same factor is returned
    and nothing is re-selected until the answer arrives.
    """
    _enter_questioning(session)
    if session.state is SessionState.COMPLETED:
        return Done("session complete")
    pending = session.pending_ask()
    if pending is not None:
        return Ask(kb.factor(pending))

    if session.mode is Mode.TRADITIONAL:
        for factor in traditional_subset(kb):
            if factor.id not in session.answers:
                session.asked.append(factor.id)
                return Ask(factor)
        session.state = SessionState.COMPLETED
        return Done("questionnaire complete")

    if session.question_count() >= session.question_cap:
        session.state = SessionState.COMPLETED
        return Done("question cap reached")
    exhausted = session.prefilled_ids() | set(session.asked)
    remaining = {
        factor.id
        for factor in kb.factors
        if factor.category is not Category.PERSONAL_DETAILS and factor.id not in exhausted
    }
    if not remaining:
        session.state = SessionState.COMPLETED
        return Done("factor pool exhausted")
    prompt = build_selection_prompt(
        selection_catalog(kb, remaining), _answered_pairs(session, kb), session.profile.region
    )
    started = time.perf_counter()
    action = request_next_action(gateway, prompt, remaining, sleep=sleep, on_exchange=on_exchange)
    session.clock["selection"] += time.perf_counter() - started
    if action.kind == "stop":
        session.state = SessionState.COMPLETED
        return Done(action.reason or "")
    session.asked.append(action.factor_id)
    return Ask(kb.factor(action.factor_id))


def submit_answer(session: Session, factor_id: str, choice_index: int, kb: KnowledgeBase) -> Session:
    if session.state is not SessionState.QUESTIONING:
        raise StateError(f"cannot answer in state {session.state.value}")
    if session.pending_ask() != factor_id:
        raise OutOfTurn(f"factor {factor_id!r} is not awaiting an answer")
    if not kb.factor(factor_id).valid_choice(choice_index):
        raise InvalidChoice(f"choice {choice_index} invalid for factor {factor_id!r}")
    session.answers[factor_id] = choice_index
    return session


def finalize(session: Session) -> CompletedQuestionnaire:
    """Freeze the finished session into an immutable questionnaire."""
    if session.state is not SessionState.COMPLETED:
        raise StateError(f"session is {session.state.value}, not Completed")
    provenance = {}
    for entry in session.prefilled:
        fid = entry.prediction.factor_id
        if entry.review is ReviewState.CORRECTED:
            provenance[fid] = Provenance.PREDICTED_CORRECTED
        else:
            provenance[fid] = Provenance.PREDICTED_ACCEPTED
    for fid in session.asked:
        if fid in session.answers:
            provenance[fid] = Provenance.ASKED_DIRECTLY
    return CompletedQuestionnaire(
        session_id=session.id,
        mode=session.mode,
        final_answers=dict(session.answers),
        provenance=provenance,
        predictions_snapshot=tuple(entry.prediction for entry in session.prefilled),
    )
