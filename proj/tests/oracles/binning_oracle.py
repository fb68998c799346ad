"""Writes a 3-patient event fixture and its hand-binned golden trajectories.

Output in tests/data/binning/: events.csv, demographics.csv, schema.json,
golden.json. The binning below is a straight transcription of the rules:
4-hour bins anchored at each patient's first event, mean for observations,
sum for fluids, max for vasopressor rate, forward fill, then the cohort median
of observed bin values (reference-range midpoint when nothing was observed).
"""
import datetime as dt
import json
import pathlib
import statistics

OUT = pathlib.Path(__file__).resolve().parent.parent / "data" / "binning"

SCHEMA = [
    {"name": "age", "lo": 18, "hi": 90, "group": "demographics"},
    {"name": "weight", "lo": 40, "hi": 150, "group": "demographics"},
    {"name": "hr", "lo": 60, "hi": 100, "group": "vitals"},
    {"name": "map", "lo": 65, "hi": 110, "group": "vitals"},
    {"name": "lactate", "lo": 0.5, "hi": 2.0, "group": "labs"},
    {"name": "temp", "lo": 36.5, "hi": 37.5, "group": "vitals"},
    {"name": "fio2", "lo": 0.21, "hi": 0.5, "group": "ventilation"},
]
OBSERVED = ["hr", "map", "lactate", "temp", "fio2"]

BASE = dt.datetime(2150, 3, 1, 8, 0, tzinfo=dt.timezone.utc)

# (patient, minutes after BASE, channel, value)
EVENTS = [
    ("P1", 30, "hr", 80), ("P1", 150, "hr", 90),
    ("P1", 10, "fluid", 100), ("P1", 250, "fluid", 150),
    ("P1", 40, "map", 70), ("P1", 260, "map", 64),
    ("P1", 20, "vaso", 0.05), ("P1", 200, "vaso", 0.12), ("P1", 300, "vaso", 0.08),
    ("P1", 15, "sofa", 6), ("P1", 320, "sofa", 8), ("P1", 320, "sirs", 3),
    ("P1", 35, "mech_vent", 1), ("P1", 45, "fio2", 0.4),
    ("P1", 600, "hr", 110),  # bin 2; bin 1 carries map/fio2 forward
    ("P1", 610, "glucose", 140),  # not in the schema: rejected
    ("P2", 1000, "hr", 70), ("P2", 1000, "lactate", 3.0), ("P2", 1005, "lactate", 4.0),
    ("P2", 1240, "lactate", 1.0),  # exactly 240 minutes after the anchor: bin 1
    ("P2", 1300, "fluid", 500), ("P2", 1310, "fluid", 250),
    ("P2", 1700, "map", 90),  # bin 2, bin 1 has the lactate only
    ("P2", 1001, "sirs", 2),
    ("P3", 5, "map", 60), ("P3", 5, "fio2", 0.3),
    ("P3", 5 + 240 * 3, "map", 75),  # bins 1 and 2 are empty
    ("P3", 6 + 240 * 3, "vaso", 0.2), ("P3", 7 + 240 * 3, "vaso", 0.2),
]

DEMOGRAPHICS = [
    ("P1", 71, "F", 62.5, 1, {"chf": 1, "diabetes": 0}),
    ("P2", 45, "M", 88.0, 0, {"chf": 0, "diabetes": 1}),
    ("P3", 80, "F", 55.0, 0, {"chf": 0, "diabetes": 0}),
]


def iso(minutes):
    return (BASE + dt.timedelta(minutes=minutes)).strftime("%Y-%m-%dT%H:%M:%SZ")


def write_inputs():
    OUT.mkdir(parents=True, exist_ok=True)
    lines = ["patient_id,timestamp,channel,value"]
    for pid, m, ch, v in EVENTS:
        lines.append(f"{pid},{iso(m)},{ch},{v}")
    (OUT / "events.csv").write_text("\n".join(lines) + "\n")
    lines = ["patient_id,age,gender,weight,died,chf,diabetes"]
    for pid, age, g, w, died, c in DEMOGRAPHICS:
        lines.append(f"{pid},{age},{g},{w},{died},{c['chf']},{c['diabetes']}")
    (OUT / "demographics.csv").write_text("\n".join(lines) + "\n")
    (OUT / "schema.json").write_text(json.dumps({"schema_version": 1, "features": SCHEMA}, indent=1) + "\n")


def golden():
    by_patient = {}
    for pid, m, ch, v in EVENTS:
        if ch == "glucose":
            continue
        by_patient.setdefault(pid, []).append((m, ch, float(v)))
    patients = []
    observed_values = {f: [] for f in OBSERVED}
    for pid in sorted(by_patient):
        rows = sorted(by_patient[pid], key=lambda r: r[0])
        anchor = rows[0][0]
        n_bins = (rows[-1][0] - anchor) // 240 + 1
        bins = [{"obs": {}, "fluid": 0.0, "vaso": 0.0, "vent": None, "sofa": None, "sirs": None}
                for _ in range(n_bins)]
        for m, ch, v in rows:
            b = bins[(m - anchor) // 240]
            if ch == "fluid":
                b["fluid"] += v
            elif ch == "vaso":
                b["vaso"] = max(b["vaso"], v)
            elif ch == "mech_vent":
                b["vent"] = (b["vent"] or False) or v != 0
            elif ch in ("sofa", "sirs"):
                b[ch] = max(b[ch] or 0, int(round(v)))
            else:
                b["obs"].setdefault(ch, []).append(v)
        steps = []
        carried = {}
        vent, sofa, sirs = False, None, None
        for i, b in enumerate(bins):
            feats, imputed = {}, []
            for f in OBSERVED:
                if f in b["obs"]:
                    mean = sum(b["obs"][f]) / len(b["obs"][f])
                    carried[f] = mean
                    observed_values[f].append(mean)
                    feats[f] = mean
                else:
                    imputed.append(f)
                    if f in carried:
                        feats[f] = carried[f]
            if b["vent"] is not None:
                vent = b["vent"]
            sofa = b["sofa"] if b["sofa"] is not None else sofa
            sirs = b["sirs"] if b["sirs"] is not None else sirs
            steps.append({"bin": i, "features": feats, "imputed": sorted(imputed),
                          "fluid_dose": b["fluid"], "vaso_dose": b["vaso"], "mech_vent": vent,
                          "sofa": sofa or 0, "sirs": sirs or 0})
        died = next(d for d in DEMOGRAPHICS if d[0] == pid)[4]
        patients.append({"patient_id": pid, "died": bool(died), "timesteps": steps})
    spec = {s["name"]: s for s in SCHEMA}
    medians = {f: (statistics.median(v) if v else 0.5 * (spec[f]["lo"] + spec[f]["hi"]))
               for f, v in observed_values.items()}
    for p in patients:
        for s in p["timesteps"]:
            for f in OBSERVED:
                s["features"].setdefault(f, medians[f])
    return {"patients": patients, "medians": medians, "rejected_lines": [17],
            "never_observed": [f for f, v in observed_values.items() if not v]}


if __name__ == "__main__":
    write_inputs()
    doc = golden()
    (OUT / "golden.json").write_text(json.dumps(doc, indent=1) + "\n")
    print(json.dumps(doc["medians"]))
