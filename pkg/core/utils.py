# core/utils.py
from typing import Dict, List, Mapping, Sequence, Tuple
import io
import csv
import json


def group_by_style(rows: List[Dict], style_names: Sequence[str]) -> Dict[str, List[Dict]]:
    """
    Groups rows by their "style" key (with a fallback 'None').
    """
    groups = {name: [] for name in style_names}
    groups["None"] = []
    for row in rows:
        name = row.get("style") or "None"
        if name not in groups:
            name = "None"
        groups[name].append(row)
    return groups


def ablation_rows(reports: Mapping[str, Dict], baseline: str = "full") -> List[Dict]:
    """
    One row per model with the four scores and deltas against the baseline row.
    """
    base = reports.get(baseline)
    rows = []
    for label, rep in reports.items():
        row = {
            "model": label,
            "fluency": rep["fluency"],
            "style_score": rep["style_score"],
            "diversity": rep["diversity"]["value"],
            "novelty": rep["novelty"]["value"],
        }
        if base is not None:
            row["d_fluency"] = rep["fluency"] - base["fluency"]
            row["d_style_score"] = rep["style_score"] - base["style_score"]
            row["d_diversity"] = rep["diversity"]["value"] - base["diversity"]["value"]
            row["d_novelty"] = rep["novelty"]["value"] - base["novelty"]["value"]
        rows.append(row)
    return rows


SCATTER_FIELDS = ["model", "style", "fluency", "style_score"]


def scatter_rows(reports: Mapping[str, Dict]) -> List[Dict]:
    """
    (fluency, style score) points: one overall row per model plus one per target style.
    """
    rows = []
    for label, rep in reports.items():
        rows.append({"model": label, "style": "", "fluency": rep["fluency"], "style_score": rep["style_score"]})
        for style, rate in rep.get("per_style", {}).items():
            rows.append({"model": label, "style": style, "fluency": rep["fluency"], "style_score": rate})
    return rows


def make_downloads(reports: Mapping[str, Dict]) -> Tuple[bytes, bytes]:
    """
    Returns (json_bytes, csv_bytes): the report (single model or ablation table) and the scatter CSV.
    """
    # JSON
    if len(reports) == 1:
        payload = next(iter(reports.values()))
    else:
        payload = {"models": dict(reports), "ablation": ablation_rows(reports)}
    json_bytes = (json.dumps(payload, ensure_ascii=False, indent=2) + "\n").encode("utf-8")

    # CSV
    csv_io = io.StringIO()
    writer = csv.DictWriter(csv_io, fieldnames=SCATTER_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in scatter_rows(reports):
        writer.writerow({k: row.get(k, "") for k in SCATTER_FIELDS})

    return json_bytes, csv_io.getvalue().encode("utf-8")
