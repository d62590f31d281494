"""Metrics records, their JSONL/CSV serialization, and report tables.

One record per evaluation point. The JSON-lines file is the canonical
artifact (byte-deterministic for a given run); the CSV is a mirror for
spreadsheet use.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ArtifactError

JSONL_FIELDS = (
    "round",
    "method",
    "global_acc",
    "per_expert_acc",
    "routing_acc",
    "floats_down_cum",
    "floats_up_cum",
)


@dataclass
class MetricsRecord:
    round: int
    method: str
    global_acc: float
    per_expert_acc: list[float]
    routing_acc: float | None
    floats_down_cum: float
    floats_up_cum: float

    def to_json_line(self) -> str:
        obj = {
            "round": self.round,
            "method": self.method,
            "global_acc": self.global_acc,
            "per_expert_acc": list(self.per_expert_acc),
            "routing_acc": self.routing_acc,
            "floats_down_cum": self.floats_down_cum,
            "floats_up_cum": self.floats_up_cum,
        }
        return json.dumps(obj, separators=(", ", ": "))


def parse_record(obj: dict, where: str) -> MetricsRecord:
    missing = [k for k in JSONL_FIELDS if k not in obj]
    extra = [k for k in obj if k not in JSONL_FIELDS]
    if missing or extra:
        raise ArtifactError(f"{where}: metrics schema mismatch (missing {missing}, extra {extra})")
    return MetricsRecord(
        round=int(obj["round"]),
        method=str(obj["method"]),
        global_acc=float(obj["global_acc"]),
        per_expert_acc=[float(v) for v in obj["per_expert_acc"]],
        routing_acc=None if obj["routing_acc"] is None else float(obj["routing_acc"]),
        floats_down_cum=float(obj["floats_down_cum"]),
        floats_up_cum=float(obj["floats_up_cum"]),
    )


def write_jsonl(path, records: list[MetricsRecord]) -> None:
    Path(path).write_text("".join(r.to_json_line() + "\n" for r in records))


def read_jsonl(path) -> list[MetricsRecord]:
    out = []
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ArtifactError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
        out.append(parse_record(obj, f"{path}:{lineno}"))
    return out


def write_csv(path, records: list[MetricsRecord], seed: int | None = None) -> None:
    n_experts = max((len(r.per_expert_acc) for r in records), default=0)
    lines = []
    if seed is not None:
        lines.append(f"# seed={seed}")
    cols = ["round", "method", "global_acc", "routing_acc", "floats_down_cum", "floats_up_cum"]
    cols += [f"acc_expert_{i}" for i in range(n_experts)]
    lines.append(",".join(cols))
    for r in records:
        row = [
            str(r.round),
            r.method,
            repr(r.global_acc),
            "" if r.routing_acc is None else repr(r.routing_acc),
            repr(r.floats_down_cum),
            repr(r.floats_up_cum),
        ]
        row += [repr(v) for v in r.per_expert_acc]
        row += [""] * (n_experts - len(r.per_expert_acc))
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def best_of_last(records: list[MetricsRecord], last_k: int) -> float:
    """Best global accuracy among the last `last_k` evaluation records."""
    if not records:
        raise ArtifactError("metrics file holds no records")
    tail = records[-last_k:]
    return max(r.global_acc for r in tail)


def report_rows(paths, last_k: int = 10) -> list[dict]:
    """One comparison row per metrics file: method, best-of-last-k accuracy,
    final cumulative communication."""
    rows = []
    for path in paths:
        records = read_jsonl(path)
        if not records:
            raise ArtifactError(f"{path}: metrics file holds no records")
        rows.append(
            {
                "file": str(path),
                "method": records[-1].method,
                "rounds": records[-1].round,
                "best_acc_last_k": best_of_last(records, last_k),
                "floats_down_cum": records[-1].floats_down_cum,
                "floats_up_cum": records[-1].floats_up_cum,
            }
        )
    return rows


def render_report_csv(rows: list[dict]) -> str:
    cols = ["file", "method", "rounds", "best_acc_last_k", "floats_down_cum", "floats_up_cum"]
    lines = [",".join(cols)]
    for row in rows:
        lines.append(",".join(str(row[c]) for c in cols))
    return "\n".join(lines) + "\n"
