"""Tabular experiment results, written as CSV plus JSON with the config snapshot embedded."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path


@dataclass(frozen=True)
class Column:
    name: str
    unit: str = ""
    note: str = ""


@dataclass
class ExperimentReport:
    name: str
    columns: list[Column]
    rows: list[dict] = field(default_factory=list)
    config_snapshot: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)
    runtime_seconds: float = 0.0

    def add(self, **row) -> None:
        unknown = set(row) - {c.name for c in self.columns}
        if unknown:
            raise KeyError(f"{self.name}: unknown columns {sorted(unknown)}")
        self.rows.append(row)

    def column(self, name: str) -> list:
        return [r.get(name) for r in self.rows]

    def row(self, **match) -> dict:
        for r in self.rows:
            if all(r.get(k) == v for k, v in match.items()):
                return r
        raise KeyError(f"{self.name}: no row matching {match}")

    def cells_json(self) -> str:
        """Canonical JSON of everything except wall-clock time."""
        return json.dumps(self._payload(include_runtime=False), sort_keys=True, allow_nan=False)

    def _payload(self, include_runtime=True) -> dict:
        out = {
            "name": self.name,
            "columns": [c.__dict__ for c in self.columns],
            "rows": [{c.name: _clean(r.get(c.name)) for c in self.columns} for r in self.rows],
            "config_snapshot": self.config_snapshot,
            "notes": self.notes,
        }
        if include_runtime:
            out["runtime_seconds"] = round(self.runtime_seconds, 3)
        return out

    def write(self, out_dir: str | Path) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / f"{self.name}.csv"
        json_path = out_dir / f"{self.name}.json"
        with open(csv_path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow([c.name for c in self.columns])
            for r in self.rows:
                w.writerow([_csv_cell(r.get(c.name)) for c in self.columns])
        with open(json_path, "w", encoding="utf-8") as f:
            json.dump(self._payload(), f, indent=2, sort_keys=True, allow_nan=False)
            f.write("\n")
        return [csv_path, json_path]


def _clean(v):
    """JSON-safe cell: numpy scalars to Python, non-finite floats to strings."""
    if hasattr(v, "item") and not isinstance(v, (list, tuple, dict)):
        v = v.item()
    if isinstance(v, float) and not math.isfinite(v):
        return "nan" if math.isnan(v) else ("inf" if v > 0 else "-inf")
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    return v


def _csv_cell(v):
    v = _clean(v)
    if v is None:
        return ""
    if isinstance(v, list):
        return " ".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
