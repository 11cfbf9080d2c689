"""Municipality health indicators and ordinal risk labeling.

Raw indicator values are clustered per indicator across all municipalities
with 1-D k-means, so a label always means "relative to the whole table".
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from enum import Enum, IntEnum
from pathlib import Path

import numpy as np

from .errors import EmptyInput, ParseError, UnknownIndicator, UnknownMunicipality, ValidationError

INDICATOR_CATEGORIES = (
    "mortality",
    "morbidity",
    "healthcare",
    "lifestyle",
    "education",
    "socioeconomic",
    "environment",
    "infrastructure",
    "security",
)

DEFAULT_K = 5
_MAX_KMEANS_ITER = 100


class Polarity(str, Enum):
    HIGH_IS_ADVERSE = "HighIsAdverse"
    HIGH_IS_FAVORABLE = "HighIsFavorable"


class OrdinalLabel(IntEnum):
    """Five-point ordinal scale; the integer value is the rank."""

    VERY_LOW = 0
    LOW = 1
    MODERATE = 2
    HIGH = 3
    VERY_HIGH = 4

    @property
    def display(self) -> str:
        return self.name.replace("_", " ").lower()

    @classmethod
    def from_display(cls, text: str) -> "OrdinalLabel":
        try:
            return cls[text.strip().upper().replace(" ", "_")]
        except KeyError:
            raise ParseError(f"unknown ordinal label {text!r}") from None


@dataclass(frozen=True)
class IndicatorDef:
    id: str
    category: str
    polarity: Polarity


@dataclass(frozen=True)
class IndicatorTable:
    defs: tuple[IndicatorDef, ...]
    municipalities: tuple[str, ...]
    values: dict  # (municipality, indicator id) -> float

    def def_for(self, indicator_id: str) -> IndicatorDef:
        for d in self.defs:
            if d.id == indicator_id:
                return d
        raise UnknownIndicator(f"unknown indicator {indicator_id!r}")


@dataclass(frozen=True)
class RegionProfile:
    municipality: str
    labels: dict  # indicator id -> OrdinalLabel
    adverse_ids: frozenset


def load_indicator_defs(path: str | Path) -> list[IndicatorDef]:
    raw = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ParseError(f"indicator defs {path}: {exc}") from exc
    if not isinstance(doc, list):
        raise ParseError("indicator defs must be a JSON list")
    defs = []
    seen = set()
    for item in doc:
        try:
            d = IndicatorDef(
                id=str(item["id"]),
                category=str(item["category"]),
                polarity=Polarity(item["polarity"]),
            )
        except ValueError:
            raise ValidationError(
                f"indicator {item.get('id', '?')!r}: bad polarity {item.get('polarity')!r}"
            ) from None
        except (KeyError, TypeError) as exc:
            raise ParseError(f"malformed indicator entry: {exc}") from exc
        if d.category not in INDICATOR_CATEGORIES:
            raise ValidationError(f"indicator {d.id!r}: unknown category {d.category!r}")
        if d.id in seen:
            raise ValidationError(f"indicator {d.id!r}: duplicate id")
        seen.add(d.id)
        defs.append(d)
    return defs


def ingest_indicators(path: str | Path, defs: list[IndicatorDef]) -> IndicatorTable:
    """Read the municipality CSV; empty cells are recorded as absent, not zero."""
    known = {d.id for d in defs}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty CSV") from None
        if not header or header[0].strip() != "municipality":
            raise ParseError(f"{path}: first column must be 'municipality'")
        columns = [c.strip() for c in header[1:]]
        for col in columns:
            if col not in known:
                raise UnknownIndicator(f"unknown indicator column {col!r}")

        municipalities: list[str] = []
        values: dict = {}
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            name = row[0].strip()
            if not name:
                raise ParseError(f"{path}:{line_no}: empty municipality name")
            if name in municipalities:
                raise ParseError(f"{path}:{line_no}: duplicate municipality {name!r}")
            if len(row) != len(columns) + 1:
                raise ParseError(f"{path}:{line_no}: expected {len(columns) + 1} cells")
            municipalities.append(name)
            for col, cell in zip(columns, row[1:]):
                cell = cell.strip()
                if cell == "":
                    continue
                try:
                    values[(name, col)] = float(cell)
                except ValueError:
                    raise ParseError(f"{path}:{line_no}: bad number {cell!r} in {col}") from None
    return IndicatorTable(defs=tuple(defs), municipalities=tuple(municipalities), values=values)


def label_values(values, k: int = DEFAULT_K) -> list[OrdinalLabel]:
    """Label each value with Lloyd's 1-D k-means over the whole list.

    Deterministic: centroids start at the (i+0.5)/k' quantiles of the sorted
    distinct values and ties in assignment go to the lower cluster index.
    """
    values = list(values)
    if not values:
        raise EmptyInput("label_values needs at least one value")
    arr = np.asarray(values, dtype=float)
    distinct = np.unique(arr)
    k_eff = min(k, distinct.size)
    if k_eff == 1:
        return [OrdinalLabel.MODERATE] * len(values)

    quantiles = [(i + 0.5) / k_eff for i in range(k_eff)]
    centroids = np.quantile(distinct, quantiles)
    assignments = None
    for _ in range(_MAX_KMEANS_ITER):
        distance = np.abs(arr[:, None] - centroids[None, :])
        fresh = distance.argmin(axis=1)
        if assignments is not None and np.array_equal(fresh, assignments):
            break
        assignments = fresh
        for j in range(k_eff):
            members = arr[assignments == j]
            if members.size:
                centroids[j] = members.mean()

    order = np.argsort(centroids, kind="stable")
    cluster_rank = np.empty(k_eff, dtype=int)
    cluster_rank[order] = np.arange(k_eff)
    return [
        OrdinalLabel(round(cluster_rank[c] * 4 / (k_eff - 1)))
        for c in assignments
    ]


def _column_labels(table: IndicatorTable, indicator_id: str) -> dict:
    """municipality -> label for one indicator, skipping missing cells."""
    present = [m for m in table.municipalities if (m, indicator_id) in table.values]
    if not present:
        return {}
    column = [table.values[(m, indicator_id)] for m in present]
    labels = label_values(column)
    return dict(zip(present, labels))


def _is_adverse(polarity: Polarity, label: OrdinalLabel) -> bool:
    if polarity is Polarity.HIGH_IS_ADVERSE:
        return label >= OrdinalLabel.HIGH
    return label <= OrdinalLabel.LOW


def region_profile(table: IndicatorTable, municipality: str) -> RegionProfile:
    if municipality not in table.municipalities:
        raise UnknownMunicipality(f"unknown municipality {municipality!r}")
    labels = {}
    adverse = set()
    for d in table.defs:
        by_muni = _column_labels(table, d.id)
        label = by_muni.get(municipality)
        if label is None:
            continue
        labels[d.id] = label
        if _is_adverse(d.polarity, label):
            adverse.add(d.id)
    return RegionProfile(municipality=municipality, labels=labels, adverse_ids=frozenset(adverse))


def all_region_profiles(table: IndicatorTable) -> dict:
    """Profiles for every municipality, labeling each column once."""
    per_indicator = {d.id: _column_labels(table, d.id) for d in table.defs}
    polarity = {d.id: d.polarity for d in table.defs}
    profiles = {}
    for m in table.municipalities:
        labels = {}
        adverse = set()
        for d in table.defs:
            label = per_indicator[d.id].get(m)
            if label is None:
                continue
            labels[d.id] = label
            if _is_adverse(polarity[d.id], label):
                adverse.add(d.id)
        profiles[m] = RegionProfile(municipality=m, labels=labels, adverse_ids=frozenset(adverse))
    return profiles


def region_profiles_to_json(profiles: dict) -> dict:
    return {
        m: {
            "labels": {iid: label.display for iid, label in p.labels.items()},
            "adverse_ids": sorted(p.adverse_ids),
        }
        for m, p in profiles.items()
    }


def load_region_profiles(path: str | Path) -> dict:
    raw = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ParseError(f"region profiles {path}: {exc}") from exc
    profiles = {}
    try:
        for m, entry in doc.items():
            labels = {
                iid: OrdinalLabel.from_display(text) for iid, text in entry["labels"].items()
            }
            adverse = frozenset(str(i) for i in entry["adverse_ids"])
            profiles[m] = RegionProfile(municipality=m, labels=labels, adverse_ids=adverse)
    except (AttributeError, KeyError, TypeError) as exc:
        raise ParseError(f"region profiles {path}: malformed entry ({exc})") from exc
    return profiles
