"""Flat-file persistence for fitted environments, effect sizes and result tables."""
from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path
from typing import Iterable, Mapping

from .distributions import ModelClass, UserEnvModel
from .effects import ClassEffects, effects_from_records, effects_to_records


def _write_rows(path: str | Path, rows: list[dict], fieldnames: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, restval="", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return ""
    return value


def write_table(path: str | Path, rows: list[dict]) -> None:
    if not rows:
        Path(path).write_text("")
        return
    names: list[str] = []
    for row in rows:
        names.extend(k for k in row if k not in names)
    _write_rows(path, rows, names)


def read_table(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_params(path: str | Path, models: Iterable[UserEnvModel]) -> None:
    write_table(path, [m.to_record() for m in models])


def read_params(path: str | Path) -> list[UserEnvModel]:
    """Load fitted user models from the flat CSV schema produced by :func:`write_params`."""
    rows = read_table(path)
    if not rows:
        raise ValueError(f"{path}: no parameter records")
    return [UserEnvModel.from_record(row) for row in rows]


def write_effects(path: str | Path, effects: Mapping[ModelClass, ClassEffects]) -> None:
    write_table(path, effects_to_records(effects))


def read_effects(path: str | Path) -> dict[ModelClass, ClassEffects]:
    return effects_from_records(read_table(path))


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_json(path: str | Path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(obj):
    if hasattr(obj, "tolist"):
        return obj.tolist()
    if isinstance(obj, ModelClass):
        return obj.value
    if hasattr(obj, "__dict__"):
        return vars(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")
