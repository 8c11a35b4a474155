"""File formats: subject CSV, truth sidecar, model JSON."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np
import pandas as pd

from .gamlss import FittedGamlssModel
from .segmented import FittedSlrModel

CSV_COLUMNS = ("id", "sex", "age_years", "height_cm", "weight_kg", "fev1_l", "fvc_l")
_RENAME = {"age_years": "age", "height_cm": "height", "weight_kg": "weight", "fev1_l": "fev1", "fvc_l": "fvc"}


class SchemaError(ValueError):
    """Input file does not follow the expected schema; ``problems`` lists each offending row."""

    def __init__(self, message: str, problems: Iterable[str] = ()):
        self.problems = list(problems)
        detail = "".join(f"\n  {p}" for p in self.problems[:50])
        more = f"\n  ... {len(self.problems) - 50} more" if len(self.problems) > 50 else ""
        super().__init__(message + detail + more)


def _positive(text: str) -> float | None:
    try:
        v = float(text)
    except ValueError:
        return None
    return v if math.isfinite(v) and v > 0 else None


def read_subjects(path: str | Path) -> pd.DataFrame:
    """Read and validate a subject CSV; returns internal column names plus ``ratio``.

    Raises
    ------
    SchemaError
        On a wrong header or any invalid row (all offending rows are listed).
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if tuple(h.strip() for h in header) != CSV_COLUMNS:
            raise SchemaError(f"{path}: header must be {','.join(CSV_COLUMNS)}", [f"got {','.join(header)}"])
        rows, problems, seen = [], [], set()
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not f.strip() for f in rec):
                continue
            if len(rec) != len(CSV_COLUMNS):
                problems.append(f"line {lineno}: expected {len(CSV_COLUMNS)} fields, got {len(rec)}")
                continue
            rid, sex, age, height, weight, fev1, fvc = (f.strip() for f in rec)
            bad = []
            if not rid:
                bad.append("missing id")
            elif rid in seen:
                bad.append(f"duplicate id {rid}")
            if sex not in ("F", "M"):
                bad.append(f"sex {sex!r} not F or M")
            vals = {}
            for name, text in (("age_years", age), ("height_cm", height), ("fev1_l", fev1), ("fvc_l", fvc)):
                v = _positive(text)
                if v is None:
                    bad.append(f"{name} {text!r} not a positive number")
                vals[name] = v
            if weight:
                vals["weight_kg"] = _positive(weight)
                if vals["weight_kg"] is None:
                    bad.append(f"weight_kg {weight!r} not a positive number")
            else:
                vals["weight_kg"] = float("nan")
            if bad:
                problems.append(f"line {lineno}: " + "; ".join(bad))
                continue
            seen.add(rid)
            rows.append((rid, sex, vals["age_years"], vals["height_cm"], vals["weight_kg"], vals["fev1_l"], vals["fvc_l"]))
    if problems:
        raise SchemaError(f"{path}: {len(problems)} invalid rows", problems)
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    df = pd.DataFrame(rows, columns=list(CSV_COLUMNS)).rename(columns=_RENAME)
    df["ratio"] = df["fev1"] / df["fvc"]
    return df


def _fmt(v: Any) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return "" if not math.isfinite(float(v)) else repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "" if v is None else str(v)


def write_table(path: str | Path, columns: Iterable[str], rows: Iterable[Iterable[Any]]) -> None:
    """CSV writer with locale-free, round-trippable number formatting."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(columns))
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_subjects(path: str | Path, obs: pd.DataFrame) -> None:
    rows = zip(obs["id"], obs["sex"], obs["age"], obs["height"], obs["weight"], obs["fev1"], obs["fvc"])
    write_table(path, CSV_COLUMNS, rows)


def write_frame(path: str | Path, df: pd.DataFrame) -> None:
    write_table(path, df.columns, df.itertuples(index=False, name=None))


def clean_json(obj: Any) -> Any:
    """Convert numpy scalars/arrays and non-finite floats into plain JSON values."""
    if isinstance(obj, Mapping):
        return {str(k): clean_json(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean_json(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [clean_json(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def dump_json(path: str | Path, obj: Any) -> None:
    text = json.dumps(clean_json(obj), indent=2, sort_keys=True, allow_nan=False)
    Path(path).write_text(text + "\n")


def load_json(path: str | Path) -> Any:
    return json.loads(Path(path).read_text())


def save_model(path: str | Path, model: FittedGamlssModel | FittedSlrModel, metadata: Mapping | None = None) -> None:
    d = model.to_dict()
    if metadata:
        d["metadata"] = dict(metadata)
    dump_json(path, d)


def load_model(path: str | Path) -> FittedGamlssModel | FittedSlrModel:
    d = load_json(path)
    kind = d.get("kind")
    if kind == "gamlss":
        return FittedGamlssModel.from_dict(d)
    if kind == "slr":
        return FittedSlrModel.from_dict(d)
    raise SchemaError(f"{path}: unknown model kind {kind!r}")
