"""Regenerate the bundled municipality indicator CSV.

Values are synthetic but shaped per indicator (plausible ranges, a few
deliberate extremes so every label appears somewhere in the table).
Run from the repo root:  python3 scripts/make_fixtures.py
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

DATA = Path(__file__).resolve().parent.parent / "src" / "arquest" / "data"

MUNICIPALITIES = [
    "Aveiro", "Beja", "Braga", "Braganca", "Castelo Branco", "Coimbra",
    "Evora", "Faro", "Guarda", "Leiria", "Lisboa", "Portalegre", "Porto",
    "Santarem", "Setubal", "Viana do Castelo", "Vila Real", "Viseu",
    "Funchal", "Ponta Delgada", "Almada", "Amadora", "Cascais", "Gondomar",
    "Loures", "Matosinhos", "Odivelas", "Oeiras", "Seixal", "Sintra",
]

# (id, low, high, decimals): uniform draw per municipality, then extremes.
RANGES = [
    ("alcohol_mortality", 5.0, 40.0, 1),
    ("circulatory_mortality", 80.0, 260.0, 1),
    ("premature_mortality", 150.0, 420.0, 1),
    ("diabetes_prevalence", 4.0, 12.0, 2),
    ("obesity_rate", 10.0, 28.0, 2),
    ("gp_per_capita", 0.4, 2.2, 2),
    ("mental_health_access", 0.1, 1.5, 2),
    ("smoking_prevalence", 12.0, 30.0, 2),
    ("physical_inactivity", 30.0, 70.0, 1),
    ("school_dropout", 2.0, 14.0, 2),
    ("higher_education", 10.0, 40.0, 1),
    ("unemployment", 4.0, 16.0, 2),
    ("median_income", 700.0, 1600.0, 0),
    ("air_quality_index", 15.0, 60.0, 1),
    ("green_space", 5.0, 45.0, 1),
    ("sports_facilities", 0.5, 4.0, 2),
    ("road_accidents", 1.0, 9.0, 2),
    ("crime_rate", 20.0, 60.0, 1),
    ("emergency_response", 6.0, 20.0, 1),
]


def main() -> None:
    rng = np.random.default_rng(20240817)
    n = len(MUNICIPALITIES)
    table: dict[str, list[float]] = {}
    for iid, lo, hi, dec in RANGES:
        col = rng.uniform(lo, hi, size=n)
        # push two municipalities to the edges so extreme labels exist
        hi_at, lo_at = rng.choice(n, size=2, replace=False)
        col[hi_at] = hi + (hi - lo) * 0.12
        col[lo_at] = lo - (lo - 0.0) * 0.10
        table[iid] = [round(float(v), dec) for v in col]

    # one missing cell exercises the absent-value path end to end
    missing = {("Guarda", "green_space")}

    out = DATA / "municipalities.csv"
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["municipality"] + [r[0] for r in RANGES])
        for i, m in enumerate(MUNICIPALITIES):
            row: list[object] = [m]
            for iid, _, _, dec in RANGES:
                if (m, iid) in missing:
                    row.append("")
                else:
                    v = table[iid][i]
                    row.append(f"{v:.{dec}f}" if dec else f"{int(v)}")
            writer.writerow(row)
    print(f"wrote {out}")

    defs = json.loads((DATA / "geo_defs.json").read_text())
    assert [d["id"] for d in defs] == [r[0] for r in RANGES], "defs/CSV drifted apart"


if __name__ == "__main__":
    main()
