"""HTTP service for driving sessions, with append-only persistence.

Every mutation is appended to a per-session JSON Lines log before the
response goes out; a session is rebuilt by folding its log. The fold
trusts the log's ordering (the engine validated each step when it was
written) but refuses sequence gaps outright.

The completion transition inside a next-question call is not logged:
it is re-derivable, and a crashed client simply asks again. Finalize
appends the single terminal event.
"""
from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, HTTPException
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from .engine import (
    Accept,
    Ask,
    CompletedQuestionnaire,
    Correct,
    EngineConfig,
    Mode,
    PrefilledEntry,
    Session,
    SessionState,
    _enter_questioning,
    finalize,
    forecast,
    next_question,
    review,
    start_session,
    submit_answer,
)
from .errors import (
    ConfigError,
    CorruptLog,
    EmptyInput,
    EndpointError,
    InvalidChoice,
    InvalidProfile,
    MalformedReply,
    MissingFactor,
    OutOfTurn,
    ParseError,
    ProviderError,
    SchemaError,
    StateError,
    UnknownFactor,
    UnknownIndicator,
    UnknownMunicipality,
    ValidationError,
)
from .geo import load_region_profiles
from .kb import KnowledgeBase, RiskFactor, load_knowledge_base
from .llm import MockModel, Prediction, RemoteEndpoint
from .profiles import (
    ExternalSource,
    Gender,
    PersonalDetails,
    SourceKind,
    build_profile,
)
from .scoring import full_report, report_to_json

EVENT_KINDS = (
    "Started", "SourceLinked", "Forecasted", "Reviewed", "Asked", "Answered", "Finalized",
)


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class ServiceConfig:
    kb_path: Path
    geo_path: Path
    data_dir: Path
    listen_host: str = "127.0.0.1"
    listen_port: int = 8600
    gateway: dict = field(default_factory=lambda: {"kind": "mock"})
    review_phase: bool = True
    question_cap: int | None = None


def parse_service_config(doc: dict, base_dir: str | Path = ".") -> ServiceConfig:
    base = Path(base_dir)
    try:
        listen = str(doc.get("listen", "127.0.0.1:8600"))
        host, _, port_text = listen.rpartition(":")
        gateway = dict(doc.get("gateway", {"kind": "mock"}))
        config = ServiceConfig(
            kb_path=base / doc["kb_path"],
            geo_path=base / doc["geo_path"],
            data_dir=base / doc.get("data_dir", "sessions"),
            listen_host=host or "127.0.0.1",
            listen_port=int(port_text),
            gateway=gateway,
            review_phase=bool(doc.get("review_phase", True)),
            question_cap=None if doc.get("question_cap") is None else int(doc["question_cap"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"service config: {exc}") from exc
    if config.question_cap is not None and config.question_cap < 1:
        raise ConfigError(f"question cap must be >= 1, got {config.question_cap}")
    kind = config.gateway.get("kind")
    if kind not in ("mock", "remote"):
        raise ConfigError(f"gateway kind must be mock or remote, got {kind!r}")
    if kind == "remote" and not (config.gateway.get("base_url") and config.gateway.get("model")):
        raise ConfigError("remote gateway needs base_url and model")
    return config


def load_service_config(path: str | Path) -> ServiceConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"service config {path}: {exc}") from exc
    return parse_service_config(doc, base_dir=path.parent)


# ---------------------------------------------------------------------------
# mock gateway oracle

def service_oracle(profile, kb: KnowledgeBase):
    """Deterministic stand-in answers derived from the linked evidence:
    a factor whose keywords appear in any snippet reads as its riskiest
    choice, everything else as its safest."""
    texts = [snippet.text.lower() for snippet in profile.snippets]

    def answer(factor_id: str) -> int:
        factor = kb.factor(factor_id)
        hit = any(kw.lower() in text for kw in factor.evidence_keywords for text in texts)
        return len(factor.choices) - 1 if hit else 0

    return answer


# ---------------------------------------------------------------------------
# event log

def _append_line(path: Path, line: str) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(line + "\n")
        fh.flush()
        os.fsync(fh.fileno())


def read_events(path: Path) -> list:
    """Parse a session log, tolerating a truncated final line and
    skipping duplicate sequence numbers from crash re-appends."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    docs = []
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            docs.append(json.loads(line))
        except json.JSONDecodeError as exc:
            if number == len(lines):
                break
            raise CorruptLog(f"{path}:{number}: unreadable event: {exc}") from exc
    events = []
    expected = 0
    for doc in docs:
        try:
            seq = int(doc["seq"])
            kind = str(doc["kind"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptLog(f"{path}: event missing seq or kind: {exc}") from exc
        if seq < expected:
            continue
        if seq > expected:
            raise CorruptLog(f"{path}: sequence gap: expected {expected}, found {seq}")
        if kind not in EVENT_KINDS:
            raise CorruptLog(f"{path}: unknown event kind {kind!r}")
        events.append(doc)
        expected += 1
    return events


@dataclass
class SessionRuntime:
    session: Session
    details: PersonalDetails
    sources: list
    log_path: Path
    seq: int = 0
    questionnaire: CompletedQuestionnaire | None = None
    lock: threading.Lock = field(default_factory=threading.Lock)


def _parse_details(doc: dict) -> PersonalDetails:
    try:
        return PersonalDetails(
            age=int(doc["age"]),
            gender=Gender(doc["gender"]),
            municipality=str(doc["municipality"]),
            occupation=doc.get("occupation"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"personal details: {exc}") from exc


def _details_json(details: PersonalDetails) -> dict:
    return {
        "age": details.age,
        "gender": details.gender.value,
        "municipality": details.municipality,
        "occupation": details.occupation,
    }


def fold_events(events: list, kb: KnowledgeBase, regions: dict, log_path: Path) -> SessionRuntime:
    if not events or events[0]["kind"] != "Started":
        raise CorruptLog(f"{log_path}: log does not begin with a Started event")
    runtime: SessionRuntime | None = None
    for doc in events:
        kind = doc["kind"]
        payload = doc.get("payload", {})
        if runtime is not None and runtime.questionnaire is not None:
            raise CorruptLog(f"{log_path}: event {kind} after Finalized")
        try:
            if kind == "Started":
                if runtime is not None:
                    raise CorruptLog(f"{log_path}: second Started event")
                details = _parse_details(payload["personal_details"])
                region = regions.get(details.municipality)
                profile = build_profile(details, [], region=region)
                session = start_session(
                    profile,
                    Mode(payload["mode"]),
                    kb,
                    EngineConfig(
                        question_cap=payload.get("question_cap"),
                        skip_review=bool(payload.get("skip_review", False)),
                    ),
                    session_id=payload["session_id"],
                )
                runtime = SessionRuntime(
                    session=session, details=details, sources=[], log_path=log_path,
                )
            elif kind == "SourceLinked":
                source = ExternalSource(
                    kind=SourceKind(payload["kind"]), payload=payload["payload"]
                )
                runtime.sources.append(source)
                runtime.session.profile = build_profile(
                    runtime.details, runtime.sources,
                    region=regions.get(runtime.details.municipality),
                )
            elif kind == "Forecasted":
                runtime.session.prefilled = [
                    PrefilledEntry(prediction=Prediction(
                        factor_id=str(p["factor_id"]),
                        choice_index=int(p["choice_index"]),
                        confidence=float(p["confidence"]),
                        explanation=str(p["explanation"]),
                    ))
                    for p in payload["predictions"]
                ]
                runtime.session.state = SessionState.FORECASTED
            elif kind == "Reviewed":
                if payload["decision"] == "correct":
                    decision = Correct(int(payload["choice_index"]))
                else:
                    decision = Accept()
                review(runtime.session, payload["factor_id"], decision, kb)
            elif kind == "Asked":
                _enter_questioning(runtime.session)
                runtime.session.asked.append(str(payload["factor_id"]))
            elif kind == "Answered":
                submit_answer(
                    runtime.session, payload["factor_id"], int(payload["choice_index"]), kb
                )
            else:  # Finalized
                runtime.session.state = SessionState.COMPLETED
                runtime.questionnaire = finalize(runtime.session)
        except CorruptLog:
            raise
        except Exception as exc:
            raise CorruptLog(f"{log_path}: cannot apply event {doc.get('seq')}: {exc}") from exc
        runtime.seq = int(doc["seq"]) + 1
    return runtime


class SessionStore:
    def __init__(self, data_dir: Path, kb: KnowledgeBase, regions: dict):
        self._data_dir = Path(data_dir)
        self._data_dir.mkdir(parents=True, exist_ok=True)
        self._kb = kb
        self._regions = regions
        self._runtimes: dict[str, SessionRuntime] = {}
        self._lock = threading.Lock()

    def _path(self, session_id: str) -> Path:
        return self._data_dir / f"{session_id}.jsonl"

    def get(self, session_id: str) -> SessionRuntime | None:
        with self._lock:
            runtime = self._runtimes.get(session_id)
            if runtime is not None:
                return runtime
            path = self._path(session_id)
            if not path.exists():
                return None
            runtime = fold_events(read_events(path), self._kb, self._regions, path)
            self._runtimes[session_id] = runtime
            return runtime

    def register(self, runtime: SessionRuntime) -> None:
        with self._lock:
            self._runtimes[runtime.session.id] = runtime

    def evict(self, session_id: str) -> None:
        # drop the cached runtime so the next access refolds the log,
        # discarding any in-memory change whose append never landed
        with self._lock:
            self._runtimes.pop(session_id, None)

    def append_event(self, runtime: SessionRuntime, kind: str, payload: dict) -> None:
        record = {
            "session_id": runtime.session.id,
            "seq": runtime.seq,
            "ts": time.time(),
            "kind": kind,
            "payload": payload,
        }
        try:
            _append_line(runtime.log_path, json.dumps(record, sort_keys=True))
        except OSError:
            self.evict(runtime.session.id)
            raise
        runtime.seq += 1


# ---------------------------------------------------------------------------
# request bodies

class StartBody(BaseModel):
    mode: str
    personal_details: dict


class SourceBody(BaseModel):
    kind: str
    payload: dict
    terms_accepted: bool = False


class ReviewBody(BaseModel):
    factor_id: str
    decision: str
    choice_index: int | None = None


class AnswerBody(BaseModel):
    factor_id: str
    choice_index: int


# ---------------------------------------------------------------------------
# response rendering

def _ask_json(factor: RiskFactor) -> dict:
    return {
        "factor_id": factor.id,
        "name": factor.name,
        "category": factor.category.value,
        "question": factor.question_text,
        "choices": [choice.label for choice in factor.choices],
    }


def _prefilled_json(entry: PrefilledEntry, kb: KnowledgeBase) -> dict:
    card = _ask_json(kb.factor(entry.prediction.factor_id))
    card.update({
        "predicted_index": entry.prediction.choice_index,
        "confidence": entry.prediction.confidence,
        "explanation": entry.prediction.explanation,
        "review": entry.review.value,
        "final_index": entry.final_index,
    })
    return card


def _snapshot_json(runtime: SessionRuntime, kb: KnowledgeBase) -> dict:
    session = runtime.session
    pending = session.pending_ask()
    return {
        "session_id": session.id,
        "mode": session.mode.value,
        "state": session.state.value,
        "question_cap": session.question_cap,
        "personal_details": _details_json(runtime.details),
        "shared_kinds": sorted(kind.value for kind in session.profile.shared_kinds),
        "snippet_count": len(session.profile.snippets),
        "questions_answered": session.question_count(),
        "prefilled": [_prefilled_json(entry, kb) for entry in session.prefilled],
        "pending_ask": _ask_json(kb.factor(pending)) if pending else None,
        "answers": dict(session.answers),
        "finalized": runtime.questionnaire is not None,
    }


_STATUS_BY_ERROR = (
    ((StateError, OutOfTurn), 409),
    ((InvalidProfile, InvalidChoice, UnknownFactor, UnknownIndicator,
      UnknownMunicipality, MissingFactor, ValidationError, SchemaError,
      ParseError, EmptyInput), 422),
    ((EndpointError, ProviderError, MalformedReply), 502),
    ((CorruptLog,), 500),
)


# ---------------------------------------------------------------------------
# application

def create_app(config: ServiceConfig) -> FastAPI:
    kb = load_knowledge_base(config.kb_path)
    regions = load_region_profiles(config.geo_path)
    store = SessionStore(config.data_dir, kb, regions)
    engine_config = EngineConfig(
        question_cap=config.question_cap, skip_review=not config.review_phase
    )

    if config.gateway["kind"] == "mock":
        def gateway_for(profile):
            return MockModel(kb, service_oracle(profile, kb))
    else:
        endpoint = RemoteEndpoint(
            base_url=config.gateway["base_url"],
            model=config.gateway["model"],
            timeout=float(config.gateway.get("timeout", 30.0)),
        )

        def gateway_for(profile):
            return endpoint

    app = FastAPI(title="risk questioning service")
    app.state.store = store
    app.state.kb = kb

    for classes, status in _STATUS_BY_ERROR:
        for cls in classes:
            app.add_exception_handler(cls, _error_handler(status))

    def get_runtime(session_id: str) -> SessionRuntime:
        runtime = store.get(session_id)
        if runtime is None:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id!r}")
        return runtime

    @app.post("/sessions", status_code=201)
    def create_session(body: StartBody):
        try:
            mode = Mode(body.mode)
        except ValueError:
            raise ValidationError(f"unknown mode {body.mode!r}")
        details = _parse_details(body.personal_details)
        region = regions.get(details.municipality)
        profile = build_profile(details, [], region=region)
        session = start_session(profile, mode, kb, engine_config)
        runtime = SessionRuntime(
            session=session, details=details, sources=[],
            log_path=store._path(session.id),
        )
        store.append_event(runtime, "Started", {
            "session_id": session.id,
            "mode": mode.value,
            "personal_details": _details_json(details),
            "question_cap": session.question_cap,
            "skip_review": session.skip_review,
        })
        store.register(runtime)
        return {"session_id": session.id}

    @app.post("/sessions/{session_id}/sources")
    def link_source(session_id: str, body: SourceBody):
        runtime = get_runtime(session_id)
        with runtime.lock:
            if runtime.session.state is not SessionState.INSIGHTS_LINKED:
                raise StateError(
                    f"cannot link sources in state {runtime.session.state.value}"
                )
            if not body.terms_accepted:
                raise ValidationError("terms must be accepted before linking a source")
            try:
                kind = SourceKind(body.kind)
            except ValueError:
                raise ValidationError(f"unknown source kind {body.kind!r}")
            source = ExternalSource(kind=kind, payload=body.payload)
            profile = build_profile(
                runtime.details, runtime.sources + [source],
                region=regions.get(runtime.details.municipality),
            )
            runtime.sources.append(source)
            runtime.session.profile = profile
            store.append_event(runtime, "SourceLinked", {
                "kind": kind.value,
                "payload": body.payload,
                "terms_accepted": True,
            })
            return {
                "session_id": session_id,
                "shared_kinds": sorted(k.value for k in profile.shared_kinds),
                "snippet_count": len(profile.snippets),
            }

    @app.post("/sessions/{session_id}/forecast")
    def run_forecast(session_id: str):
        runtime = get_runtime(session_id)
        with runtime.lock:
            session = runtime.session
            forecast(session, gateway_for(session.profile), kb)
            store.append_event(runtime, "Forecasted", {
                "predictions": [
                    {
                        "factor_id": e.prediction.factor_id,
                        "choice_index": e.prediction.choice_index,
                        "confidence": e.prediction.confidence,
                        "explanation": e.prediction.explanation,
                    }
                    for e in session.prefilled
                ],
            })
            return {
                "session_id": session_id,
                "prefilled": [_prefilled_json(e, kb) for e in session.prefilled],
            }

    @app.post("/sessions/{session_id}/review")
    def review_prediction(session_id: str, body: ReviewBody):
        runtime = get_runtime(session_id)
        with runtime.lock:
            if body.decision == "accept":
                decision = Accept()
            elif body.decision == "correct":
                if body.choice_index is None:
                    raise ValidationError("correction needs a choice_index")
                decision = Correct(body.choice_index)
            else:
                raise ValidationError(f"decision must be accept or correct, got {body.decision!r}")
            review(runtime.session, body.factor_id, decision, kb)
            store.append_event(runtime, "Reviewed", {
                "factor_id": body.factor_id,
                "decision": body.decision,
                "choice_index": body.choice_index,
            })
            entry = next(
                e for e in runtime.session.prefilled
                if e.prediction.factor_id == body.factor_id
            )
            return {
                "session_id": session_id,
                "factor_id": body.factor_id,
                "review": entry.review.value,
                "state": runtime.session.state.value,
            }

    @app.post("/sessions/{session_id}/next")
    def ask_next(session_id: str):
        runtime = get_runtime(session_id)
        with runtime.lock:
            session = runtime.session
            asked_before = len(session.asked)
            action = next_question(session, gateway_for(session.profile), kb)
            if isinstance(action, Ask):
                if len(session.asked) > asked_before:
                    store.append_event(runtime, "Asked", {"factor_id": action.factor.id})
                return {"session_id": session_id, "ask": _ask_json(action.factor)}
            return {"session_id": session_id, "done": True, "reason": action.reason}

    @app.post("/sessions/{session_id}/answers")
    def answer(session_id: str, body: AnswerBody):
        runtime = get_runtime(session_id)
        with runtime.lock:
            submit_answer(runtime.session, body.factor_id, body.choice_index, kb)
            store.append_event(runtime, "Answered", {
                "factor_id": body.factor_id,
                "choice_index": body.choice_index,
            })
            return {
                "session_id": session_id,
                "answered": body.factor_id,
                "questions_answered": runtime.session.question_count(),
                "state": runtime.session.state.value,
            }

    @app.post("/sessions/{session_id}/finalize")
    def finalize_session(session_id: str):
        runtime = get_runtime(session_id)
        with runtime.lock:
            if runtime.questionnaire is None:
                runtime.questionnaire = finalize(runtime.session)
                store.append_event(runtime, "Finalized", {})
            return report_to_json(full_report(runtime.questionnaire, kb))

    @app.get("/sessions/{session_id}")
    def snapshot(session_id: str):
        runtime = get_runtime(session_id)
        with runtime.lock:
            return _snapshot_json(runtime, kb)

    return app


def _error_handler(status: int):
    def handle(request, exc):
        return JSONResponse({"detail": str(exc)}, status_code=status)

    return handle


def run_service(config: ServiceConfig) -> None:
    import uvicorn

    uvicorn.run(create_app(config), host=config.listen_host, port=config.listen_port)
