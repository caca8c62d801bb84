"""Tabular result rows and their CSV persistence."""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from pathlib import Path


@dataclass
class ResultRow:
    run_id: str
    experiment: str
    method: str
    corruption_kind: str
    corruption_param: float | None
    n_obs: int
    seed: int
    d_proj_mean: float | None
    d_proj_std: float | None
    mimic_err_final: float | None
    auroc: float | None
    accuracy: float | None
    wall_time_s: float


RESULT_HEADER = [f.name for f in fields(ResultRow)]
_FLOAT_FIELDS = {"corruption_param", "d_proj_mean", "d_proj_std", "mimic_err_final",
                 "auroc", "accuracy", "wall_time_s"}
_INT_FIELDS = {"n_obs", "seed"}


class ResultsFormatError(ValueError):
    pass


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, float):
        return format(v, ".12g")
    return str(v)


def write_results(rows: list[ResultRow], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    seen = set()
    for r in rows:
        if r.run_id in seen:
            raise ResultsFormatError(f"duplicate run_id {r.run_id!r}")
        seen.add(r.run_id)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(RESULT_HEADER)
        for r in rows:
            w.writerow([_fmt(getattr(r, name)) for name in RESULT_HEADER])
    return path


def read_results(path: str | Path) -> list[ResultRow]:
    path = Path(path)
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != RESULT_HEADER:
            raise ResultsFormatError(f"bad results header in {path}: {header}")
        rows = []
        for rec in reader:
            kw = {}
            for name, raw in zip(RESULT_HEADER, rec):
                if raw == "NA":
                    kw[name] = None
                elif name in _FLOAT_FIELDS:
                    kw[name] = float(raw)
                elif name in _INT_FIELDS:
                    kw[name] = int(raw)
                else:
                    kw[name] = raw
            rows.append(ResultRow(**kw))
    return rows
