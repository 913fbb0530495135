"""Accuracy evaluation on the synthetic suite and report emission.

Decoding is greedy and constrained to each task's answer-token support, so a
model carrying no visual information scores chance level (1/32 on lookup,
1/13 on count) rather than 1/vocab. AVG-% follows the relative-performance
convention: 100 times the mean of per-task accuracy ratios against a named
reference model, whose own AVG-% is therefore exactly 100.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import tensor as T
from .data import answer_support
from .tensor import ParameterError


@dataclass
class EvalReport:
    per_task: dict
    counts: dict
    avg: float
    avg_pct: float | None = None
    reference: str | None = None
    label: str = "model"

    def to_dict(self):
        return {
            "label": self.label,
            "per_task": dict(sorted(self.per_task.items())),
            "counts": dict(sorted(self.counts.items())),
            "avg": self.avg,
            "avg_pct": self.avg_pct,
            "reference": self.reference,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(per_task=d["per_task"], counts=d["counts"], avg=d["avg"],
                   avg_pct=d.get("avg_pct"), reference=d.get("reference"),
                   label=d.get("label", "model"))


def predict_answer(model, item):
    """Greedy answer token, argmax restricted to the item's answer support."""
    with T.no_grad():
        trace = M.forward(model, item, capture=None)
    row = trace.logits.data[trace.layout.loss_rows[0]]
    support = list(answer_support(item.task))
    return support[int(np.argmax(row[support]))]


def evaluate(model, eval_pool, reference_report=None, label="model"):
    """Exact-match accuracy per task; AVG-% against the reference when given."""
    if not eval_pool:
        raise ParameterError("evaluate: empty eval pool")
    hits, totals = {}, {}
    for item in eval_pool:
        task = item.task
        totals[task] = totals.get(task, 0) + 1
        if predict_answer(model, item) == item.x_r[0]:
            hits[task] = hits.get(task, 0) + 1
    per_task = {task: hits.get(task, 0) / totals[task] for task in totals}
    avg = float(np.mean(list(per_task.values())))
    report = EvalReport(per_task=per_task, counts=totals, avg=avg, label=label)
    if reference_report is not None:
        ratios = []
        for task, acc in per_task.items():
            ref = reference_report.per_task.get(task)
            if ref is None:
                raise ParameterError(f"reference report lacks task {task!r}")
            if ref <= 0:
                raise ParameterError(f"reference accuracy for {task!r} is zero")
            ratios.append(acc / ref)
        report.avg_pct = 100.0 * float(np.mean(ratios))
        report.reference = reference_report.label
    return report


def save_report(path, report, extra=None):
    payload = report.to_dict()
    if extra:
        payload.update(extra)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")


def load_report(path):
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    return EvalReport.from_dict(payload), payload


def emit_report(runs, csv_path, json_path):
    """Aggregate (ratio, strategy, AVG-%) tuples from per-run eval payloads.

    `runs` is a list of dicts as written by save_report (with optional
    "ratio"/"strategy" keys). Emits plot-ready CSV plus a JSON variant.
    """
    rows = []
    for payload in runs:
        rows.append({
            "label": payload.get("label", "model"),
            "ratio": payload.get("ratio", 0.0),
            "strategy": payload.get("strategy", "none"),
            "avg": payload.get("avg"),
            "avg_pct": payload.get("avg_pct"),
            **{f"acc_{k}": v for k, v in sorted(payload.get("per_task", {}).items())},
        })
    rows.sort(key=lambda r: (r["strategy"], r["ratio"], r["label"]))
    fieldnames = sorted({k for r in rows for k in r}, key=lambda k: (k != "label", k))
    with open(csv_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        for r in rows:
            writer.writerow(r)
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump({"runs": rows}, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")
    return rows
