"""Four reference cases shaped like the study's patient table and a 24-decision log.

Writes tests/data/concordance/: references.json, decisions.jsonl and
expected.json with per condition x reference counts tallied below.
"""
import json
import pathlib

OUT = pathlib.Path(__file__).resolve().parent.parent / "data" / "concordance"

INC, DEC, NC = "increase", "decrease", "no_change"


def pair(f, v):
    return {"fluid": f, "vaso": v}


CASES = {
    "ruth-silva": dict(pseudonym="Ruth Silva", fluid=0.0, vaso=0.0,
                       ai=pair(NC, INC), orig=pair(INC, NC), maj=pair(INC, NC)),
    "loretta-sturtevant": dict(pseudonym="Loretta Sturtevant", fluid=500.0, vaso=0.0,
                               ai=pair(INC, INC), orig=pair(INC, NC), maj=pair(INC, NC)),
    "jeffrey-williams": dict(pseudonym="Jeffrey Williams", fluid=0.0, vaso=0.45,
                             ai=pair(INC, DEC), orig=pair(INC, DEC), maj=pair(INC, DEC)),
    "victoria-thompson": dict(pseudonym="Victoria Thompson", fluid=250.0, vaso=0.1,
                              ai=pair(INC, NC), orig=pair(NC, INC), maj=pair(INC, NC)),
}
ORDER = list(CASES)
CONDITIONS = ["no_ai", "text_only", "feature_explanation", "alternative_treatments"]
ROLES = ["attending", "attending", "attending", "fellow", "app", "app"]

# choice[participant][condition index]; participant p sees case (p + j) % 4 under condition j.
CHOICES = [
    [pair(INC, NC), pair(INC, INC), pair(INC, DEC), pair(NC, NC)],
    [pair(INC, NC), pair(INC, DEC), pair(INC, NC), pair(NC, INC)],
    [pair(INC, DEC), pair(INC, NC), pair(NC, INC), pair(INC, INC)],
    [pair(NC, NC), pair(NC, INC), pair(INC, INC), pair(INC, DEC)],
    [pair(INC, NC), pair(INC, NC), pair(INC, DEC), pair(NC, INC)],
    [pair(NC, INC), pair(INC, NC), pair(INC, NC), pair(INC, NC)],
]


def write_fixture():
    OUT.mkdir(parents=True, exist_ok=True)
    refs = {"schema_version": 1, "cases": {}}
    for i, (cid, c) in enumerate(CASES.items()):
        refs["cases"][cid] = {
            "patient_id": f"P{i + 1}", "bin": 3, "pseudonym": c["pseudonym"], "vignette": "",
            "current_dose": {"fluid_ml": c["fluid"], "vaso_mcg_kg_min": c["vaso"]},
            "ai": c["ai"], "original_clinician": c["orig"], "majority_attending": c["maj"],
        }
    (OUT / "references.json").write_text(json.dumps(refs, indent=1) + "\n")
    lines = []
    for p, row in enumerate(CHOICES):
        for j, choice in enumerate(row):
            cond = CONDITIONS[j]
            likert = {"confidence": 1 + (p + j) % 7, "difficulty": 1 + (2 * p + j) % 7}
            if cond != "no_ai":
                likert["usefulness"] = 1 + (p + 2 * j) % 7
                likert["ai_confidence_effect"] = 1 + (3 * p + j) % 7
            lines.append(json.dumps({
                "schema_version": 1, "record_id": f"D{len(lines) + 1:06d}",
                "idempotency_key": f"k{p}-{j}", "participant_id": f"u{p + 1}",
                "role": ROLES[p], "years_experience": "5-10",
                "case_id": ORDER[(p + j) % 4], "condition": cond,
                "fluid_choice": choice["fluid"], "vaso_choice": choice["vaso"],
                "likert": likert, "timestamp": "2150-01-01T00:00:00Z", "supersedes": None}))
    (OUT / "decisions.jsonl").write_text("\n".join(lines) + "\n")


def tally():
    refkey = {"ai": "ai", "original_clinician": "orig", "majority_attending": "maj"}
    cells = []
    for j, cond in enumerate(CONDITIONS):
        for ref, key in refkey.items():
            n = full = anyc = 0
            for p, row in enumerate(CHOICES):
                r = CASES[ORDER[(p + j) % 4]][key]
                f = row[j]["fluid"] == r["fluid"]
                v = row[j]["vaso"] == r["vaso"]
                n += 1
                full += f and v
                anyc += f or v
            cells.append({"condition": cond, "reference": ref, "n": n,
                          "full_count": full, "any_count": anyc})
    return cells


if __name__ == "__main__":
    write_fixture()
    cells = tally()
    (OUT / "expected.json").write_text(json.dumps({"cells": cells}, indent=1) + "\n")
    for c in cells:
        print(c)
