"""Chat-model gateway: prompt construction, reply parsing, confidence.

Two endpoints satisfy the same small protocol: a remote chat-completion
HTTP endpoint, and a deterministic mock whose replies are a pure function
of the prompt text plus injected oracle state. Sessions and tests run the
mock; the remote path is configuration-selected.
"""
from __future__ import annotations

import json
import logging
import math
import os
import re
import time
from dataclasses import dataclass, field

import httpx
import numpy as np

from .errors import EndpointError, MalformedReply, ProviderError
from .geo import RegionProfile
from .kb import KnowledgeBase, RiskFactor
from .profiles import UserProfile, snippet_by_id

log = logging.getLogger(__name__)

#: minimum top-hit similarity for the mock to predict a factor's answer
MOCK_PREDICTION_THRESHOLD = 0.35
#: selection stops when the best factor priority falls below this share
#: of the knowledge base's single largest factor weight
MOCK_STOP_SHARE = 0.1
ADVERSE_PRIORITY_BOOST = 0.25
FALLBACK_CONFIDENCE = 0.5
API_KEY_ENV = "ARQUEST_LLM_KEY"

DEFAULT_RETRIES = 2
DEFAULT_BASE_DELAY = 0.5
MAX_REPROMPTS = 2


@dataclass(frozen=True)
class Prompt:
    system: str
    user: str
    want_token_probs: bool = False


@dataclass(frozen=True)
class ModelReply:
    text: str
    token_probs: tuple | None = None  # ((token, probability), ...)
    latency: float = 0.0


@dataclass(frozen=True)
class Prediction:
    factor_id: str
    choice_index: int
    confidence: float
    explanation: str


@dataclass(frozen=True)
class NextAction:
    kind: str  # "ask" | "stop"
    factor_id: str | None = None
    reason: str | None = None

    @classmethod
    def ask(cls, factor_id: str) -> "NextAction":
        return cls(kind="ask", factor_id=factor_id)

    @classmethod
    def stop(cls, reason: str) -> "NextAction":
        return cls(kind="stop", reason=reason)


# ---------------------------------------------------------------------------
# prompt construction

FORECAST_SYSTEM = (
    "You are an underwriting assistant for a life-insurance application. "
    "Using only the evidence provided, predict the applicant's likely answers "
    "to the risk questions."
)

SELECTION_SYSTEM = (
    "You choose which risk question to ask next in an adaptive "
    "life-insurance interview."
)

_ADVERSE_HEADER = "## Adverse regional indicators"
_FACTOR_HEADER = "## Risk factors with evidence"
_ANSWERED_HEADER = "## Answers so far"
_REMAINING_HEADER = "## Remaining factors"

STOP_RULE = (
    "Stop when none of the remaining factors are both impactful or likely "
    "to yield a risky response."
)


def _region_block(region: RegionProfile | None) -> str:
    lines = [_ADVERSE_HEADER]
    if region is not None and region.adverse_ids:
        for iid in sorted(region.adverse_ids):
            lines.append(f"- {iid}: {region.labels[iid].display}")
    else:
        lines.append("- none")
    return "\n".join(lines) + "\n"


def build_forecast_prompt(factors, bundles, profile: UserProfile) -> Prompt:
    """Forecasting prompt: applicant block, adverse region labels, one block
    per factor that has evidence, then the reply-format instructions."""
    by_factor = {b.factor_id: b for b in bundles}
    details = profile.details
    parts = ["## Applicant", f"- age: {details.age}", f"- gender: {details.gender.value}",
             f"- municipality: {details.municipality}"]
    if details.occupation:
        parts.append(f"- occupation: {details.occupation}")
    out = "\n".join(parts) + "\n\n"
    out += _region_block(profile.region)
    out += "\n" + _FACTOR_HEADER + "\n"

    blocks = []
    for factor in factors:
        bundle = by_factor.get(factor.id)
        if bundle is None or not bundle.hits:
            continue
        lines = [f"### [{factor.id}] {factor.name}", f"Question: {factor.question_text}", "Choices:"]
        for i, choice in enumerate(factor.choices):
            lines.append(f"  {i}. {choice.label}")
        lines.append("Evidence:")
        for snippet_id, similarity in bundle.hits:
            snippet = snippet_by_id(profile, snippet_id)
            text = snippet.text if snippet else snippet_id
            lines.append(f"  - ({similarity:.3f}) {text}")
        blocks.append("\n".join(lines))
    out += "\n\n".join(blocks) + "\n" if blocks else "- none\n"

    out += (
        "\n## Instructions\n"
        "Predict an answer only where the evidence justifies it. "
        "Reply with exactly one JSON object of the form:\n"
        '{"predictions": [{"factor_id": "...", "choice_index": 0, "explanation": "..."}]}\n'
        "Use an empty predictions array when no factor's evidence is conclusive.\n"
    )
    return Prompt(system=FORECAST_SYSTEM, user=out, want_token_probs=True)


def build_selection_prompt(catalog, answered, region: RegionProfile | None) -> Prompt:
    """Next-question prompt over remaining factors (name + summary only)."""
    lines = [_ANSWERED_HEADER]
    if answered:
        for name, label in answered:
            lines.append(f"- {name}: {label}")
    else:
        lines.append("- none yet")
    out = "\n".join(lines) + "\n\n"
    out += _region_block(region)
    out += "\n" + _REMAINING_HEADER + "\n"
    for fid, name, summary in catalog:
        out += f"- [{fid}] {name}: {summary}\n"
    out += (
        "\n## Instructions\n"
        f"Choose the single most useful next question, or stop. {STOP_RULE}\n"
        'Reply with exactly one JSON object: {"action": "ask", "factor_id": "..."} '
        'or {"action": "stop", "reason": "..."}.\n'
    )
    return Prompt(system=SELECTION_SYSTEM, user=out, want_token_probs=False)


# ---------------------------------------------------------------------------
# reply parsing

def _first_json_object(text: str) -> dict:
    """First balanced {...} span that parses as JSON."""
    depth = 0
    start = None
    in_string = False
    escaped = False
    for i, ch in enumerate(text):
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            if depth > 0:
                in_string = True
        elif ch == "{":
            if depth == 0:
                start = i
            depth += 1
        elif ch == "}" and depth > 0:
            depth -= 1
            if depth == 0:
                try:
                    doc = json.loads(text[start : i + 1])
                except ValueError:
                    continue
                if isinstance(doc, dict):
                    return doc
    raise MalformedReply("no JSON object found in reply")


def parse_forecast_reply(reply: ModelReply, factors) -> list[Prediction]:
    """Predictions from a forecast reply; invalid entries are dropped, not fatal."""
    doc = _first_json_object(reply.text)
    raw = doc.get("predictions")
    if not isinstance(raw, list):
        raise MalformedReply("reply has no predictions array")
    by_id = {f.id: f for f in factors}
    predictions: list[Prediction] = []
    seen = set()
    for entry in raw:
        if not isinstance(entry, dict):
            log.warning("dropping non-object prediction entry")
            continue
        fid = entry.get("factor_id")
        factor = by_id.get(fid)
        if factor is None:
            log.warning("dropping prediction for unknown factor %r", fid)
            continue
        if fid in seen:
            log.warning("dropping duplicate prediction for %r", fid)
            continue
        index = entry.get("choice_index")
        if not isinstance(index, int) or isinstance(index, bool) or not factor.valid_choice(index):
            log.warning("dropping prediction for %r: bad choice_index %r", fid, index)
            continue
        seen.add(fid)
        explanation = str(entry.get("explanation") or "").strip() or "(no explanation given)"
        confidence = (
            answer_confidence(reply, fid)
            if reply.token_probs is not None
            else FALLBACK_CONFIDENCE
        )
        predictions.append(
            Prediction(factor_id=fid, choice_index=index, confidence=confidence, explanation=explanation)
        )
    return predictions


def parse_selection_reply(reply: ModelReply, remaining) -> NextAction:
    doc = _first_json_object(reply.text)
    action = doc.get("action")
    if action == "stop":
        return NextAction.stop(str(doc.get("reason") or ""))
    if action == "ask":
        fid = doc.get("factor_id")
        if fid not in remaining:
            raise MalformedReply(f"asked factor {fid!r} is not in the remaining set")
        return NextAction.ask(fid)
    raise MalformedReply(f"unknown action {action!r}")


def _choice_index_span(text: str, factor_id: str):
    """Char span of the choice_index value belonging to factor_id's entry."""
    anchor = re.search(r'"factor_id"\s*:\s*"' + re.escape(factor_id) + r'"', text)
    if anchor is None:
        return None
    value = re.compile(r'"choice_index"\s*:\s*(-?\d+)')
    next_anchor = text.find('"factor_id"', anchor.end())
    window_end = next_anchor if next_anchor != -1 else len(text)
    hit = value.search(text, anchor.end(), window_end)
    if hit is None:
        # field order may put the value before the id within the same object
        prev_anchor = text.rfind('"factor_id"', 0, anchor.start())
        window_start = prev_anchor if prev_anchor != -1 else 0
        for candidate in value.finditer(text, window_start, anchor.start()):
            hit = candidate
    if hit is None:
        return None
    return hit.span(1)


def answer_confidence(reply: ModelReply, factor_id: str) -> float:
    """Geometric mean of the probabilities of the tokens spelling the
    factor's choice_index value; 0.5 whenever that cannot be located."""
    if not reply.token_probs:
        return FALLBACK_CONFIDENCE
    span = _choice_index_span(reply.text, factor_id)
    if span is None:
        return FALLBACK_CONFIDENCE
    if sum(len(token) for token, _ in reply.token_probs) != len(reply.text):
        return FALLBACK_CONFIDENCE  # stream does not reconstruct the text
    start, end = span
    probs = []
    offset = 0
    for token, p in reply.token_probs:
        token_end = offset + len(token)
        if token_end > start and offset < end:
            probs.append(p)
        offset = token_end
        if offset >= end:
            break
    if not probs:
        return FALLBACK_CONFIDENCE
    if len(probs) == 1:
        return float(probs[0])
    return float(math.exp(sum(math.log(p) for p in probs) / len(probs)))


# ---------------------------------------------------------------------------
# endpoints

def complete(prompt: Prompt, endpoint, retries: int = DEFAULT_RETRIES,
             base_delay: float = DEFAULT_BASE_DELAY, sleep=time.sleep) -> ModelReply:
    """One completion with retry + exponential backoff around the endpoint."""
    failure = None
    for attempt in range(retries + 1):
        try:
            return endpoint.invoke(prompt)
        except EndpointError as exc:
            failure = exc
            if attempt < retries:
                sleep(base_delay * (2 ** attempt))
    raise EndpointError(f"model endpoint failed after {retries + 1} attempts: {failure}")


class RemoteEndpoint:
    """Chat-completion HTTP endpoint in the common completions wire format."""

    def __init__(self, base_url: str, model: str, api_key: str | None = None,
                 timeout: float = 30.0, max_in_flight: int = 4, client: httpx.Client | None = None):
        import threading

        key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        if not key:
            raise EndpointError(f"no API key: set {API_KEY_ENV} or pass api_key")
        self._model = model
        self._headers = {"Authorization": f"Bearer {key}"}
        self._url = base_url.rstrip("/") + "/chat/completions"
        self._client = client or httpx.Client(timeout=timeout)
        self._slots = threading.Semaphore(max_in_flight)

    def invoke(self, prompt: Prompt) -> ModelReply:
        body = {
            "model": self._model,
            "messages": [
                {"role": "system", "content": prompt.system},
                {"role": "user", "content": prompt.user},
            ],
        }
        if prompt.want_token_probs:
            body["logprobs"] = True
        started = time.perf_counter()
        with self._slots:
            try:
                response = self._client.post(self._url, json=body, headers=self._headers)
            except httpx.HTTPError as exc:
                raise EndpointError(f"chat endpoint unreachable: {exc}") from exc
        elapsed = time.perf_counter() - started
        if response.status_code != 200:
            raise EndpointError(f"chat endpoint returned HTTP {response.status_code}")
        try:
            doc = response.json()
            choice = doc["choices"][0]
            text = choice["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise EndpointError(f"chat endpoint reply malformed: {exc}") from exc
        token_probs = None
        logprobs = (choice.get("logprobs") or {}).get("content")
        if logprobs:
            try:
                token_probs = tuple(
                    (str(t["token"]), min(1.0, math.exp(float(t["logprob"]))))
                    for t in logprobs
                )
            except (KeyError, TypeError, ValueError):
                token_probs = None
        return ModelReply(text=text, token_probs=token_probs, latency=elapsed)


class RemoteEmbeddingProvider:
    """Embeddings HTTP endpoint; output is re-normalized to unit length."""

    def __init__(self, base_url: str, model: str, api_key: str | None = None,
                 timeout: float = 30.0, retries: int = DEFAULT_RETRIES,
                 base_delay: float = DEFAULT_BASE_DELAY, sleep=time.sleep,
                 client: httpx.Client | None = None):
        key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        if not key:
            raise ProviderError(f"no API key: set {API_KEY_ENV} or pass api_key")
        self._model = model
        self._headers = {"Authorization": f"Bearer {key}"}
        self._url = base_url.rstrip("/") + "/embeddings"
        self._client = client or httpx.Client(timeout=timeout)
        self._retries = retries
        self._base_delay = base_delay
        self._sleep = sleep

    def __call__(self, text: str) -> np.ndarray:
        failure = None
        for attempt in range(self._retries + 1):
            try:
                response = self._client.post(
                    self._url,
                    json={"model": self._model, "input": text},
                    headers=self._headers,
                )
                if response.status_code != 200:
                    raise ProviderError(f"embeddings endpoint returned HTTP {response.status_code}")
                vec = np.asarray(response.json()["data"][0]["embedding"], dtype=float)
                norm = np.linalg.norm(vec)
                if norm == 0:
                    raise ProviderError("embeddings endpoint returned a zero vector")
                return vec / norm
            except (httpx.HTTPError, ProviderError, KeyError, IndexError, ValueError) as exc:
                failure = exc
                if attempt < self._retries:
                    self._sleep(self._base_delay * (2 ** attempt))
        raise ProviderError(f"embeddings endpoint failed after {self._retries + 1} attempts: {failure}")


# ---------------------------------------------------------------------------
# deterministic mock

_FACTOR_BLOCK = re.compile(r"^### \[([^\]]+)\]", re.MULTILINE)
_EVIDENCE_LINE = re.compile(r"^  - \(([0-9.]+)\) (.*)$", re.MULTILINE)
_REMAINING_LINE = re.compile(r"^- \[([^\]]+)\]", re.MULTILINE)
_ANSWERED_LINE = re.compile(r"^- (.+): (.+)$", re.MULTILINE)


class MockModel:
    """Offline stand-in for the chat model.

    Replies are a pure function of the prompt text and the injected state:
    the knowledge base, a ground-truth oracle (factor id -> choice index),
    and the question cap.
    """

    def __init__(self, kb: KnowledgeBase, answer_oracle, question_cap: int = 30):
        self._kb = kb
        self._oracle = answer_oracle
        self._cap = question_cap
        global_max = max(f.max_weight for f in kb.factors)
        self._stop_threshold = MOCK_STOP_SHARE * global_max

    def invoke(self, prompt: Prompt) -> ModelReply:
        if _FACTOR_HEADER in prompt.user:
            return self._forecast(prompt.user)
        if _REMAINING_HEADER in prompt.user:
            return self._select(prompt.user)
        raise EndpointError("mock cannot classify this prompt")

    # forecast: predict ground truth wherever the top evidence is similar enough
    def _forecast(self, user: str) -> ModelReply:
        section = user.split(_FACTOR_HEADER, 1)[1]
        predictions = []
        blocks = list(_FACTOR_BLOCK.finditer(section))
        for i, match in enumerate(blocks):
            block_end = blocks[i + 1].start() if i + 1 < len(blocks) else len(section)
            block = section[match.start() : block_end]
            evidence = _EVIDENCE_LINE.search(block)
            if evidence is None:
                continue
            top_similarity = float(evidence.group(1))
            if top_similarity < MOCK_PREDICTION_THRESHOLD:
                continue
            fid = match.group(1)
            predictions.append(
                (
                    fid,
                    int(self._oracle(fid)),
                    min(0.95, FALLBACK_CONFIDENCE + top_similarity),
                    f"evidence: {evidence.group(2)}",
                )
            )
        segments: list[tuple[str, float]] = [('{"predictions": [', 1.0)]
        for j, (fid, index, confidence, explanation) in enumerate(predictions):
            if j:
                segments.append((", ", 1.0))
            segments.append((f'{{"factor_id": {json.dumps(fid)}, "choice_index": ', 1.0))
            segments.append((str(index), confidence))
            segments.append((f', "explanation": {json.dumps(explanation)}}}', 1.0))
        segments.append(("]}", 1.0))
        text = "".join(s for s, _ in segments)
        return ModelReply(text=text, token_probs=tuple(segments), latency=0.0)

    # selection: highest (max weight) x (0.5 + adverse boost), else stop
    def _select(self, user: str) -> ModelReply:
        answered_section = user.split(_ANSWERED_HEADER, 1)[1].split("##", 1)[0]
        answered = sum(
            1
            for m in _ANSWERED_LINE.finditer(answered_section)
            if m.group(0) != "- none yet"
        )
        adverse_section = user.split(_ADVERSE_HEADER, 1)[1].split("##", 1)[0]
        adverse = {
            m.group(1).split(":", 1)[0].strip()
            for m in re.finditer(r"^- ([a-z0-9_]+):", adverse_section, re.MULTILINE)
        }
        remaining_section = user.split(_REMAINING_HEADER, 1)[1]
        remaining = [m.group(1) for m in _REMAINING_LINE.finditer(remaining_section)]

        if answered >= self._cap:
            return self._stop_reply("question cap reached")
        best_fid = None
        best_priority = -1.0
        for fid in remaining:
            factor = self._kb.factor(fid)
            boost = ADVERSE_PRIORITY_BOOST if any(
                iid in adverse for iid in factor.linked_indicator_ids
            ) else 0.0
            priority = factor.max_weight * (0.5 + boost)
            if priority > best_priority:
                best_fid, best_priority = fid, priority
        if best_fid is None or best_priority < self._stop_threshold:
            return self._stop_reply("remaining factors low-impact")
        text = json.dumps({"action": "ask", "factor_id": best_fid})
        return ModelReply(text=text, token_probs=None, latency=0.0)

    @staticmethod
    def _stop_reply(reason: str) -> ModelReply:
        text = json.dumps({"action": "stop", "reason": reason})
        return ModelReply(text=text, token_probs=None, latency=0.0)


# ---------------------------------------------------------------------------
# request helpers owning the re-prompt policy

def _with_parse_complaint(prompt: Prompt, error: MalformedReply) -> Prompt:
    addendum = (
        f"\n\nYour previous reply could not be used ({error}). "
        "Reply again with exactly one JSON object in the required format."
    )
    return Prompt(system=prompt.system, user=prompt.user + addendum,
                  want_token_probs=prompt.want_token_probs)


def request_forecast(endpoint, prompt: Prompt, factors, *, retries: int = DEFAULT_RETRIES,
                     base_delay: float = DEFAULT_BASE_DELAY, sleep=time.sleep,
                     on_exchange=None) -> list[Prediction]:
    """Forecast with the documented re-prompt policy; fails open to []."""
    current = prompt
    for _ in range(MAX_REPROMPTS + 1):
        reply = complete(current, endpoint, retries=retries, base_delay=base_delay, sleep=sleep)
        if on_exchange is not None:
            on_exchange(current, reply)
        try:
            return parse_forecast_reply(reply, factors)
        except MalformedReply as exc:
            log.warning("forecast reply unusable: %s", exc)
            current = _with_parse_complaint(current, exc)
    return []


def request_next_action(endpoint, prompt: Prompt, remaining, *, retries: int = DEFAULT_RETRIES,
                        base_delay: float = DEFAULT_BASE_DELAY, sleep=time.sleep,
                        on_exchange=None) -> NextAction:
    """Next-question selection; fails open to Stop("parse-failure")."""
    current = prompt
    for _ in range(MAX_REPROMPTS + 1):
        reply = complete(current, endpoint, retries=retries, base_delay=base_delay, sleep=sleep)
        if on_exchange is not None:
            on_exchange(current, reply)
        try:
            return parse_selection_reply(reply, remaining)
        except MalformedReply as exc:
            log.warning("selection reply unusable: %s", exc)
            current = _with_parse_complaint(current, exc)
    return NextAction.stop("parse-failure")
