"""Life-insurance risk-factor knowledge base: questions, weights, interactions.

The knowledge base is a single JSON document validated on load and immutable
afterwards, so it can be shared freely between sessions and worker threads.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .errors import ParseError, UnknownFactor, ValidationError

TRADITIONAL_PER_CATEGORY = 10
SUMMARY_MAX_CHARS = 120


class Category(str, Enum):
    PERSONAL_DETAILS = "PersonalDetails"
    LIFESTYLE_HABITS = "LifestyleHabits"
    FAMILY_HISTORY = "FamilyHistory"
    HEALTH_STATUS = "HealthStatus"


#: Categories whose factors appear in the traditional questionnaire.
QUESTIONNAIRE_CATEGORIES = (
    Category.LIFESTYLE_HABITS,
    Category.FAMILY_HISTORY,
    Category.HEALTH_STATUS,
)


@dataclass(frozen=True)
class AnswerChoice:
    label: str
    weight: int


@dataclass(frozen=True)
class RiskFactor:
    id: str
    category: Category
    name: str
    summary: str
    question_text: str
    choices: tuple[AnswerChoice, ...]
    evidence_keywords: tuple[str, ...] = ()
    linked_indicator_ids: tuple[str, ...] = ()

    @property
    def max_weight(self) -> int:
        return max(c.weight for c in self.choices)

    def valid_choice(self, index: int) -> bool:
        return 0 <= index < len(self.choices)


@dataclass(frozen=True)
class InteractionRule:
    id: str
    condition: tuple[tuple[str, int], ...]  # (factor_id, minimum choice index)
    bonus: int


@dataclass(frozen=True)
class KnowledgeBase:
    factors: tuple[RiskFactor, ...]
    interactions: tuple[InteractionRule, ...]
    traditional_ids: tuple[str, ...]
    _by_id: dict[str, RiskFactor] = field(repr=False, hash=False, compare=False, default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "_by_id", {f.id: f for f in self.factors})

    def factor(self, factor_id: str) -> RiskFactor:
        try:
            return self._by_id[factor_id]
        except KeyError:
            raise UnknownFactor(f"unknown factor id {factor_id!r}") from None

    def has_factor(self, factor_id: str) -> bool:
        return factor_id in self._by_id

    @property
    def factor_ids(self) -> tuple[str, ...]:
        return tuple(f.id for f in self.factors)

    def max_possible_score(self) -> int:
        """Highest raw score any total answer map can reach.

        Every interaction fires when all answers sit at their riskiest index,
        because rule thresholds are valid indices of their factors.
        """
        weights = sum(f.max_weight for f in self.factors)
        bonuses = sum(r.bonus for r in self.interactions)
        return weights + bonuses


def load_knowledge_base(path: str | Path) -> KnowledgeBase:
    """Load and fully validate a knowledge-base JSON document."""
    raw = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ParseError(f"knowledge base {path}: {exc}") from exc
    return parse_knowledge_base(doc)


def parse_knowledge_base(doc: dict) -> KnowledgeBase:
    if not isinstance(doc, dict):
        raise ParseError("knowledge base document must be a JSON object")
    for key in ("factors", "interactions", "traditional_ids"):
        if key not in doc:
            raise ParseError(f"knowledge base document missing {key!r}")

    factors = tuple(_parse_factor(item) for item in doc["factors"])
    interactions = tuple(_parse_interaction(item) for item in doc["interactions"])
    traditional_ids = tuple(doc["traditional_ids"])
    kb = KnowledgeBase(factors=factors, interactions=interactions, traditional_ids=traditional_ids)
    validate_knowledge_base(kb)
    return kb


def _parse_factor(item: dict) -> RiskFactor:
    try:
        category = Category(item["category"])
    except ValueError:
        raise ValidationError(
            f"factor {item.get('id', '?')!r}: unknown category {item.get('category')!r}"
        ) from None
    except (KeyError, TypeError) as exc:
        raise ParseError(f"malformed factor entry: {exc}") from exc
    try:
        choices = tuple(
            AnswerChoice(label=str(c["label"]), weight=int(c["weight"]))
            for c in item["choices"]
        )
        return RiskFactor(
            id=str(item["id"]),
            category=category,
            name=str(item["name"]),
            summary=str(item["summary"]),
            question_text=str(item["question_text"]),
            choices=choices,
            evidence_keywords=tuple(str(k).lower() for k in item.get("evidence_keywords", [])),
            linked_indicator_ids=tuple(str(i) for i in item.get("linked_indicator_ids", [])),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed factor entry {item.get('id', '?')!r}: {exc}") from exc


def _parse_interaction(item: dict) -> InteractionRule:
    try:
        condition = tuple((str(fid), int(idx)) for fid, idx in item["condition"])
        return InteractionRule(id=str(item["id"]), condition=condition, bonus=int(item["bonus"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed interaction entry {item.get('id', '?')!r}: {exc}") from exc


def validate_knowledge_base(kb: KnowledgeBase) -> None:
    """Check every structural invariant; failures name the offending id."""
    seen: set[str] = set()
    for f in kb.factors:
        if f.id in seen:
            raise ValidationError(f"factor {f.id!r}: duplicate id")
        seen.add(f.id)
        _validate_factor(f)

    for rule in kb.interactions:
        if rule.bonus <= 0:
            raise ValidationError(f"interaction {rule.id!r}: bonus must be positive")
        if len(rule.condition) < 2:
            raise ValidationError(f"interaction {rule.id!r}: condition needs at least 2 factors")
        for fid, min_index in rule.condition:
            if fid not in seen:
                raise ValidationError(f"interaction {rule.id!r}: unknown factor {fid!r}")
            factor = kb.factor(fid)
            if not factor.valid_choice(min_index):
                raise ValidationError(
                    f"interaction {rule.id!r}: choice index {min_index} out of range for {fid!r}"
                )

    _validate_traditional_ids(kb)


def _validate_factor(f: RiskFactor) -> None:
    if len(f.choices) < 2:
        raise ValidationError(f"factor {f.id!r}: needs at least 2 choices")
    if len(f.summary) > SUMMARY_MAX_CHARS:
        raise ValidationError(f"factor {f.id!r}: summary exceeds {SUMMARY_MAX_CHARS} characters")
    weights = [c.weight for c in f.choices]
    if any(w < 0 for w in weights):
        raise ValidationError(f"factor {f.id!r}: negative choice weight")
    # Personal-details factors are collected at insights time and never scored,
    # so they carry zero weight on every choice; every other factor has exactly
    # one optimal (zero-weight) choice.
    if f.category is Category.PERSONAL_DETAILS:
        if any(w != 0 for w in weights):
            raise ValidationError(f"factor {f.id!r}: personal-details choices must all weigh 0")
    else:
        zeros = weights.count(0)
        if zeros == 0:
            raise ValidationError(f"factor {f.id!r}: no zero-weight choice")
        if zeros > 1:
            raise ValidationError(f"factor {f.id!r}: multiple zero-weight choices")
    if any(a > b for a, b in zip(weights, weights[1:])):
        raise ValidationError(f"factor {f.id!r}: choice weights must be non-decreasing")


def _validate_traditional_ids(kb: KnowledgeBase) -> None:
    seen_traditional: set[str] = set()
    histogram = {cat: 0 for cat in QUESTIONNAIRE_CATEGORIES}
    for fid in kb.traditional_ids:
        if not kb.has_factor(fid):
            raise ValidationError(f"traditional list: unknown factor {fid!r}")
        if fid in seen_traditional:
            raise ValidationError(f"traditional list: duplicate factor {fid!r}")
        seen_traditional.add(fid)
        category = kb.factor(fid).category
        if category not in histogram:
            raise ValidationError(f"traditional list: factor {fid!r} has category {category.value}")
        histogram[category] += 1
    for cat, count in histogram.items():
        if count != TRADITIONAL_PER_CATEGORY:
            raise ValidationError(
                f"traditional list: {cat.value} has {count} factors, expected {TRADITIONAL_PER_CATEGORY}"
            )


def traditional_subset(kb: KnowledgeBase) -> list[RiskFactor]:
    """The fixed 30-question form, in the order the KB file lists it."""
    return [kb.factor(fid) for fid in kb.traditional_ids]


def selection_catalog(kb: KnowledgeBase, remaining: set[str]) -> list[tuple[str, str, str]]:
    """(id, name, summary) for each remaining factor, in KB file order.

    Names plus one-line summaries keep the selection prompt short without
    collapsing factors to bare labels.
    """
    for fid in remaining:
        if not kb.has_factor(fid):
            raise UnknownFactor(f"unknown factor id {fid!r}")
    return [(f.id, f.name, f.summary) for f in kb.factors if f.id in remaining]


def serialize_knowledge_base(kb: KnowledgeBase) -> dict:
    """Inverse of parse_knowledge_base (used by round-trip checks and tooling)."""
    return {
        "factors": [
            {
                "id": f.id,
                "category": f.category.value,
                "name": f.name,
                "summary": f.summary,
                "question_text": f.question_text,
                "choices": [{"label": c.label, "weight": c.weight} for c in f.choices],
                "evidence_keywords": list(f.evidence_keywords),
                "linked_indicator_ids": list(f.linked_indicator_ids),
            }
            for f in kb.factors
        ],
        "interactions": [
            {
                "id": r.id,
                "condition": [[fid, idx] for fid, idx in r.condition],
                "bonus": r.bonus,
            }
            for r in kb.interactions
        ],
        "traditional_ids": list(kb.traditional_ids),
    }
