"""Reproducible synthetic applicant cohort with scripted respondents.

Every applicant owns a derived random stream (global seed XOR applicant
index), so a single applicant can be regenerated without the rest. The
per-applicant draw order is fixed: age/gender bucket, age, municipality,
occupation, health records, daily steps, captions, one share coin per
source kind, then one ground-truth draw per catalog factor.

Ground truth favors the riskiest choice of a factor when the applicant's
health records mention one of its evidence keywords, and again when a
linked regional indicator reads adverse; the applicant holds their
records either way, so sharing never changes the ground truth.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import Accept, Correct
from .errors import ConfigError, ParseError, PoolExhausted, UnknownFactor
from .geo import OrdinalLabel, RegionProfile
from .kb import KnowledgeBase, RiskFactor
from .profiles import (
    EvidenceSnippet,
    ExternalSource,
    Gender,
    PersonalDetails,
    SourceKind,
    UserProfile,
    build_profile,
)
from .scoring import true_risk_score

DEFAULT_COHORT_SIZE = 85
#: odds multiplier on the riskiest choice when health records match a keyword
BETA_EHR = 4.0
#: odds multipliers when a linked regional indicator is adverse
BETA_GEO_HIGH = 1.5
BETA_GEO_EXTREME = 2.0
#: share of base probability mass on the safest choice
BASE_SAFE_MASS = 0.7
#: geometric decay over the riskier choices
BASE_TAIL_RATIO = 0.5

_DISTRIBUTION_TOLERANCE = 1e-9
_STEP_DAYS = 14
_CAPTION_DRAWS = (2, 5)


@dataclass(frozen=True)
class AgeGenderBucket:
    age_lo: int
    age_hi: int
    gender: Gender
    probability: float


@dataclass(frozen=True)
class OccupationRow:
    name: str
    probability: float
    mean_daily_steps: int


@dataclass(frozen=True)
class CohortConfig:
    size: int
    seed: int
    age_gender: tuple  # of AgeGenderBucket
    municipality_weights: dict
    occupations: tuple  # of OccupationRow
    share_probabilities: dict  # SourceKind -> float


@dataclass(frozen=True)
class EhrBand:
    age_lo: int
    age_hi: int
    gender: str  # Gender value or "any"
    records: tuple  # of payload dicts

    def matches(self, age: int, gender: Gender) -> bool:
        if not self.age_lo <= age <= self.age_hi:
            return False
        return self.gender == "any" or self.gender == gender.value


@dataclass(frozen=True)
class Persona:
    id: str
    captions: tuple


@dataclass(frozen=True)
class SyntheticApplicant:
    id: str
    profile: UserProfile
    ground_truth: dict
    true_score: int


# ---------------------------------------------------------------------------
# configuration and pools

def parse_cohort_config(doc: dict) -> CohortConfig:
    try:
        size = int(doc["size"])
        seed = int(doc["seed"])
        buckets = tuple(
            AgeGenderBucket(
                age_lo=int(b["age_lo"]),
                age_hi=int(b["age_hi"]),
                gender=Gender(b["gender"]),
                probability=float(b["probability"]),
            )
            for b in doc["age_gender_distribution"]
        )
        weights = {str(m): float(w) for m, w in doc["municipality_weights"].items()}
        occupations = tuple(
            OccupationRow(
                name=str(row["occupation"]),
                probability=float(row["probability"]),
                mean_daily_steps=int(row["mean_daily_steps"]),
            )
            for row in doc["occupation_table"]
        )
        shares = {SourceKind(k): float(p) for k, p in doc["share_probabilities"].items()}
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"cohort config: {exc}") from exc

    if size < 1:
        raise ConfigError(f"cohort size must be >= 1, got {size}")
    if not buckets:
        raise ConfigError("age_gender_distribution is empty")
    if abs(sum(b.probability for b in buckets) - 1.0) > _DISTRIBUTION_TOLERANCE:
        raise ConfigError("age_gender_distribution probabilities must sum to 1")
    for bucket in buckets:
        if bucket.age_lo > bucket.age_hi or not 0.0 <= bucket.probability <= 1.0:
            raise ConfigError(f"bad age/gender bucket {bucket}")
        if bucket.age_lo < 18 or bucket.age_hi > 100:
            raise ConfigError(f"bucket ages must stay within 18..100, got {bucket}")
    if not weights or any(w <= 0 for w in weights.values()):
        raise ConfigError("municipality weights must be positive")
    if not occupations:
        raise ConfigError("occupation_table is empty")
    if abs(sum(o.probability for o in occupations) - 1.0) > _DISTRIBUTION_TOLERANCE:
        raise ConfigError("occupation probabilities must sum to 1")
    for kind, p in shares.items():
        if not 0.0 <= p <= 1.0:
            raise ConfigError(f"share probability for {kind.value} outside [0,1]: {p}")
    return CohortConfig(
        size=size,
        seed=seed,
        age_gender=buckets,
        municipality_weights=weights,
        occupations=occupations,
        share_probabilities=shares,
    )


def load_cohort_config(path: str | Path) -> CohortConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"cohort config {path}: {exc}") from exc
    return parse_cohort_config(doc)


def load_ehr_pool(path: str | Path) -> tuple:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        bands = tuple(
            EhrBand(
                age_lo=int(b["age_lo"]),
                age_hi=int(b["age_hi"]),
                gender=str(b.get("gender", "any")),
                records=tuple(b["records"]),
            )
            for b in doc["bands"]
        )
    except json.JSONDecodeError as exc:
        raise ParseError(f"EHR pool {path}: {exc}") from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"EHR pool {path}: {exc}") from exc
    if not bands or all(not b.records for b in bands):
        raise ConfigError(f"EHR pool {path} holds no records")
    return bands


def load_caption_pool(path: str | Path) -> tuple:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        personas = tuple(
            Persona(id=str(p["id"]), captions=tuple(str(c) for c in p["captions"]))
            for p in doc["personas"]
        )
    except json.JSONDecodeError as exc:
        raise ParseError(f"caption pool {path}: {exc}") from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"caption pool {path}: {exc}") from exc
    if not personas:
        raise ConfigError(f"caption pool {path} holds no personas")
    return personas


# ---------------------------------------------------------------------------
# ground truth

def base_distribution(n_choices: int) -> np.ndarray:
    """Safest choice carries most of the mass; the rest decays geometrically."""
    if n_choices == 1:
        return np.array([1.0])
    tail = np.array([BASE_TAIL_RATIO**i for i in range(n_choices - 1)])
    tail *= (1.0 - BASE_SAFE_MASS) / tail.sum()
    return np.concatenate(([BASE_SAFE_MASS], tail))


def _ehr_entry_names(ehr_payload: dict) -> list:
    names = []
    for key in ("conditions", "medications", "procedures"):
        for entry in ehr_payload.get(key, []):
            names.append(str(entry.get("name", "")).lower())
    return names


def _keyword_hit(factor: RiskFactor, entry_names: list) -> bool:
    return any(
        kw.lower() in name.lower() for kw in factor.evidence_keywords for name in entry_names
    )


def _geo_boost(factor: RiskFactor, region: RegionProfile | None) -> float:
    if region is None:
        return 1.0
    boost = 1.0
    for iid in factor.linked_indicator_ids:
        if iid not in region.adverse_ids:
            continue
        extreme = region.labels[iid] in (OrdinalLabel.VERY_HIGH, OrdinalLabel.VERY_LOW)
        boost = max(boost, BETA_GEO_EXTREME if extreme else BETA_GEO_HIGH)
    return boost


def choice_distribution(factor: RiskFactor, entry_names: list, region: RegionProfile | None) -> np.ndarray:
    """Base distribution with the riskiest choice's odds scaled by the
    records and region multipliers."""
    probs = base_distribution(len(factor.choices))
    boost = 1.0
    if _keyword_hit(factor, entry_names):
        boost *= BETA_EHR
    boost *= _geo_boost(factor, region)
    if boost != 1.0:
        probs = probs.copy()
        probs[-1] *= boost
        probs /= probs.sum()
    return probs


def ground_truth_answers(ehr_payload: dict, kb: KnowledgeBase, region: RegionProfile | None,
                         rng: np.random.Generator) -> dict:
    """Total answer map over the catalog, sampled from the modified
    per-factor distributions with the applicant's stream."""
    entry_names = _ehr_entry_names(ehr_payload)
    answers = {}
    for factor in kb.factors:
        probs = choice_distribution(factor, entry_names, region)
        answers[factor.id] = int(rng.choice(len(probs), p=probs))
    return answers


# ---------------------------------------------------------------------------
# cohort generation

def _applicant_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(seed ^ index)


def _draw_ehr(bands, age: int, gender: Gender, rng) -> dict:
    records = []
    for band in bands:
        if band.matches(age, gender):
            records.extend(band.records)
    if not records:
        raise PoolExhausted(f"no EHR pool band covers age {age} ({gender.value})")
    return records[int(rng.integers(len(records)))]


def _draw_captions(personas, rng) -> list:
    persona = personas[int(rng.integers(len(personas)))]
    n = int(rng.integers(_CAPTION_DRAWS[0], _CAPTION_DRAWS[1] + 1))
    if n > len(persona.captions):
        raise PoolExhausted(f"persona {persona.id!r} has {len(persona.captions)} captions, need {n}")
    picks = rng.choice(len(persona.captions), size=n, replace=False)
    return [persona.captions[i] for i in picks]


def generate_applicant(index: int, config: CohortConfig, kb: KnowledgeBase, regions: dict,
                       ehr_bands, personas) -> SyntheticApplicant:
    rng = _applicant_rng(config.seed, index)

    bucket_probs = [b.probability for b in config.age_gender]
    bucket = config.age_gender[int(rng.choice(len(config.age_gender), p=bucket_probs))]
    age = int(rng.integers(bucket.age_lo, bucket.age_hi + 1))
    gender = bucket.gender

    municipalities = list(config.municipality_weights)
    weights = np.array([config.municipality_weights[m] for m in municipalities], dtype=float)
    municipality = municipalities[int(rng.choice(len(municipalities), p=weights / weights.sum()))]

    occ_probs = [o.probability for o in config.occupations]
    occupation = config.occupations[int(rng.choice(len(config.occupations), p=occ_probs))]

    ehr_payload = _draw_ehr(ehr_bands, age, gender, rng)

    mean_steps = occupation.mean_daily_steps * rng.uniform(0.85, 1.15)
    daily_steps = [int(round(mean_steps * rng.uniform(0.9, 1.1))) for _ in range(_STEP_DAYS)]

    captions = _draw_captions(personas, rng)

    sources = []
    for kind, payload in (
        (SourceKind.HEALTH_RECORDS, ehr_payload),
        (SourceKind.FITNESS_TRACKER, {"daily_steps": daily_steps}),
        (SourceKind.SOCIAL_POSTS, {"captions": [{"text": c} for c in captions]}),
    ):
        if rng.random() < config.share_probabilities.get(kind, 0.0):
            sources.append(ExternalSource(kind=kind, payload=payload))

    region = regions[municipality]
    details = PersonalDetails(
        age=age, gender=gender, municipality=municipality, occupation=occupation.name
    )
    profile = build_profile(details, sources, region=region)
    truth = ground_truth_answers(ehr_payload, kb, region, rng)
    return SyntheticApplicant(
        id=f"appl-{index:03d}",
        profile=profile,
        ground_truth=truth,
        true_score=true_risk_score(truth, kb),
    )


def generate_cohort(config: CohortConfig, kb: KnowledgeBase, regions: dict,
                    ehr_bands, personas) -> list:
    missing = [m for m in config.municipality_weights if m not in regions]
    if missing:
        raise ConfigError(f"no region profile for municipalities: {', '.join(sorted(missing))}")
    return [
        generate_applicant(i, config, kb, regions, ehr_bands, personas)
        for i in range(config.size)
    ]


# ---------------------------------------------------------------------------
# scripted respondent

class ScriptedRespondent:
    """Answers questions and adjudicates predictions from stored ground truth."""

    def __init__(self, applicant: SyntheticApplicant):
        self._truth = applicant.ground_truth

    def answer(self, factor_id: str) -> int:
        if factor_id not in self._truth:
            raise UnknownFactor(f"no ground truth for factor {factor_id!r}")
        return self._truth[factor_id]

    def adjudicate(self, prediction):
        truth = self.answer(prediction.factor_id)
        if prediction.choice_index == truth:
            return Accept()
        return Correct(truth)


# ---------------------------------------------------------------------------
# serialization

def applicant_to_json(applicant: SyntheticApplicant) -> dict:
    details = applicant.profile.details
    return {
        "applicant_id": applicant.id,
        "details": {
            "age": details.age,
            "gender": details.gender.value,
            "municipality": details.municipality,
            "occupation": details.occupation,
        },
        "shared_kinds": sorted(k.value for k in applicant.profile.shared_kinds),
        "snippets": [
            {
                "id": s.id,
                "text": s.text,
                "provenance": [s.provenance[0].value, s.provenance[1]],
                "date": s.date,
            }
            for s in applicant.profile.snippets
        ],
        "ground_truth": dict(applicant.ground_truth),
        "true_score": applicant.true_score,
    }


def applicant_from_json(doc: dict, regions: dict | None = None) -> SyntheticApplicant:
    try:
        details = PersonalDetails(
            age=int(doc["details"]["age"]),
            gender=Gender(doc["details"]["gender"]),
            municipality=str(doc["details"]["municipality"]),
            occupation=doc["details"].get("occupation"),
        )
        snippets = tuple(
            EvidenceSnippet(
                id=str(s["id"]),
                text=str(s["text"]),
                provenance=(SourceKind(s["provenance"][0]), s["provenance"][1]),
                date=s.get("date"),
            )
            for s in doc["snippets"]
        )
        shared = frozenset(SourceKind(k) for k in doc["shared_kinds"])
        truth = {str(fid): int(idx) for fid, idx in doc["ground_truth"].items()}
        region = (regions or {}).get(details.municipality)
        profile = UserProfile(details=details, snippets=snippets, shared_kinds=shared, region=region)
        return SyntheticApplicant(
            id=str(doc["applicant_id"]),
            profile=profile,
            ground_truth=truth,
            true_score=int(doc["true_score"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"applicant record: {exc}") from exc


def write_cohort(applicants, path: str | Path) -> None:
    lines = [json.dumps(applicant_to_json(a), sort_keys=True) for a in applicants]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_cohort(path: str | Path, regions: dict | None = None) -> list:
    applicants = []
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:{i + 1}: {exc}") from exc
        applicants.append(applicant_from_json(doc, regions))
    return applicants
