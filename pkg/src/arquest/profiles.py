"""Applicant profile: personal details, shared sources, evidence retrieval.

External source payloads are flattened into short text snippets once, at
ingest; retrieval ranks those snippets per risk factor with a deterministic
local embedding so offline runs are fully reproducible.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import EmptyInput, InvalidProfile, SchemaError
from .kb import RiskFactor

EMBEDDING_DIM = 256
RETRIEVAL_WIDTH = 5
SNIPPET_MAX_CHARS = 300

#: average daily steps -> activity band used in snippet text
FITNESS_BANDS = (
    (5000, "sedentary"),
    (7500, "low-active"),
    (10000, "somewhat-active"),
)


class SourceKind(str, Enum):
    HEALTH_RECORDS = "HealthRecords"
    FITNESS_TRACKER = "FitnessTracker"
    SOCIAL_POSTS = "SocialPosts"


class Gender(str, Enum):
    FEMALE = "female"
    MALE = "male"
    OTHER = "other"


@dataclass(frozen=True)
class PersonalDetails:
    age: int
    gender: Gender
    municipality: str
    occupation: str | None = None


@dataclass(frozen=True)
class ExternalSource:
    kind: SourceKind
    payload: dict


@dataclass(frozen=True)
class EvidenceSnippet:
    id: str
    text: str
    provenance: tuple  # (SourceKind, source-local reference)
    date: str | None = None


@dataclass(frozen=True)
class UserProfile:
    details: PersonalDetails
    snippets: tuple = ()
    shared_kinds: frozenset = frozenset()
    region: object | None = None  # geo.RegionProfile when a table is loaded


@dataclass(frozen=True)
class EvidenceBundle:
    factor_id: str
    hits: tuple  # ordered (snippet id, similarity), best first


def validate_details(details: PersonalDetails) -> None:
    if not 18 <= details.age <= 100:
        raise InvalidProfile(f"age {details.age} outside 18..100")
    if not details.municipality or not details.municipality.strip():
        raise InvalidProfile("municipality must be non-empty")


def _require(payload: dict, key: str, kind: SourceKind) -> list:
    try:
        value = payload[key]
    except (KeyError, TypeError):
        raise SchemaError(f"{kind.value} payload missing {key!r}") from None
    if not isinstance(value, list):
        raise SchemaError(f"{kind.value} payload field {key!r} must be a list")
    return value


def _entry_snippet(kind, noun, ref, index, name, date) -> EvidenceSnippet:
    if not isinstance(name, str) or not name.strip():
        raise SchemaError(f"{kind.value} {ref}[{index}]: empty name")
    text = f"{noun}: {name} ({date})" if date else f"{noun}: {name}"
    if len(text) > SNIPPET_MAX_CHARS:
        raise SchemaError(f"{kind.value} {ref}[{index}]: text over {SNIPPET_MAX_CHARS} chars")
    return EvidenceSnippet(
        id=f"ehr-{noun}-{index:03d}",
        text=text,
        provenance=(kind, f"{ref}[{index}]"),
        date=date,
    )


def snippetize(source: ExternalSource) -> list[EvidenceSnippet]:
    """Flatten one source payload into normalized evidence snippets."""
    kind = source.kind
    payload = source.payload
    if kind is SourceKind.HEALTH_RECORDS:
        snippets = []
        for noun, ref, date_key in (
            ("condition", "conditions", "onset_date"),
            ("medication", "medications", "start_date"),
            ("procedure", "procedures", "date"),
        ):
            for i, entry in enumerate(_require(payload, ref, kind)):
                if not isinstance(entry, dict):
                    raise SchemaError(f"{kind.value} {ref}[{i}]: not an object")
                snippets.append(
                    _entry_snippet(kind, noun, ref, i, entry.get("name"), entry.get(date_key))
                )
        # encounters are accepted but produce no snippets
        return snippets

    if kind is SourceKind.FITNESS_TRACKER:
        steps = _require(payload, "daily_steps", kind)
        if not steps:
            raise SchemaError("FitnessTracker payload has no daily_steps")
        if not all(isinstance(s, int) and s >= 0 for s in steps):
            raise SchemaError("FitnessTracker daily_steps must be non-negative integers")
        average = round(sum(steps) / len(steps))
        band = "active"
        for limit, name in FITNESS_BANDS:
            if average < limit:
                band = name
                break
        return [
            EvidenceSnippet(
                id="fitness-steps",
                text=f"average daily steps: {average} ({band})",
                provenance=(kind, "daily_steps"),
            )
        ]

    if kind is SourceKind.SOCIAL_POSTS:
        snippets = []
        for i, caption in enumerate(_require(payload, "captions", kind)):
            if not isinstance(caption, dict) or not str(caption.get("text", "")).strip():
                raise SchemaError(f"SocialPosts captions[{i}]: empty caption")
            text = str(caption["text"])
            if len(text) > SNIPPET_MAX_CHARS:
                raise SchemaError(f"SocialPosts captions[{i}]: text over {SNIPPET_MAX_CHARS} chars")
            snippets.append(
                EvidenceSnippet(
                    id=f"social-{i:03d}",
                    text=text,
                    provenance=(kind, f"captions[{i}]"),
                    date=caption.get("date"),
                )
            )
        return snippets

    raise SchemaError(f"unknown source kind {kind!r}")


_TOKEN = re.compile(r"[a-z0-9]+")


def _slot(token: str) -> int:
    digest = hashlib.md5(token.encode("utf-8")).hexdigest()
    return int(digest, 16) % EMBEDDING_DIM


def embed(text: str) -> np.ndarray:
    """Deterministic local embedding: hashed bag-of-words term frequencies."""
    tokens = _TOKEN.findall(text.lower())
    if not tokens:
        raise EmptyInput("cannot embed text without alphanumeric tokens")
    vec = np.zeros(EMBEDDING_DIM)
    for token in tokens:
        vec[_slot(token)] += 1.0
    return vec / np.linalg.norm(vec)


def build_profile(details: PersonalDetails, sources, region=None) -> UserProfile:
    """Aggregate sources into an immutable profile; one source per kind."""
    validate_details(details)
    snippets: list[EvidenceSnippet] = []
    kinds = set()
    for source in sources:
        if source.kind in kinds:
            raise SchemaError(f"source kind {source.kind.value} linked twice")
        kinds.add(source.kind)
        snippets.extend(snippetize(source))
    return UserProfile(
        details=details,
        snippets=tuple(snippets),
        shared_kinds=frozenset(kinds),
        region=region,
    )


def retrieve_evidence(
    profile: UserProfile,
    factor: RiskFactor,
    m: int = RETRIEVAL_WIDTH,
    embed_fn=embed,
) -> EvidenceBundle:
    """Top-m snippets by cosine similarity to the factor's name + summary."""
    if m < 1:
        raise EmptyInput("retrieval width must be at least 1")
    if not profile.snippets:
        return EvidenceBundle(factor_id=factor.id, hits=())
    query = embed_fn(factor.name + " " + factor.summary)
    scored = []
    for snippet in profile.snippets:
        similarity = float(np.dot(query, embed_fn(snippet.text)))
        if similarity < 0:
            continue
        scored.append((snippet.id, similarity))
    scored.sort(key=lambda hit: (-hit[1], hit[0]))
    return EvidenceBundle(factor_id=factor.id, hits=tuple(scored[:m]))


def snippet_by_id(profile: UserProfile, snippet_id: str):
    for snippet in profile.snippets:
        if snippet.id == snippet_id:
            return snippet
    return None
