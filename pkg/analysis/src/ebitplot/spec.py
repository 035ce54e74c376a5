"""Figure specifications loaded from JSON data files.

A spec names its input CSVs, the x column, one or more y panels with
error-bar columns, the columns whose values split rows into series, an
optional row filter, and the output file name.  Input paths are resolved
relative to the spec file so committed specs work from any directory.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path


class SpecError(Exception):
    """Malformed figure specification."""


class MissingColumnError(SpecError):
    """A referenced column is absent from an input CSV."""

    def __init__(self, column: str, csv_path: Path):
        self.column = column
        self.csv_path = csv_path
        super().__init__(f"column {column!r} missing from {csv_path}")


class EmptyInputError(SpecError):
    """An input CSV holds no data rows."""


@dataclass(frozen=True)
class Panel:
    y: str
    err: str
    ylabel: str


_PANEL_KEYS = {"y", "err", "ylabel"}
_SPEC_KEYS = {"inputs", "x", "xlabel", "series", "panels", "filter",
              "title", "output"}


@dataclass(frozen=True)
class FigureSpec:
    inputs: tuple[Path, ...]
    x: str
    xlabel: str
    series: tuple[str, ...]
    panels: tuple[Panel, ...]
    output: str
    title: str = ""
    filter: dict[str, tuple[str, ...]] = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | Path) -> "FigureSpec":
        path = Path(path)
        raw = json.loads(path.read_text(encoding="utf-8"))
        unknown = set(raw) - _SPEC_KEYS
        if unknown:
            raise SpecError(f"{path}: unknown spec keys {sorted(unknown)}")
        for key in ("inputs", "x", "xlabel", "series", "panels", "output"):
            if key not in raw:
                raise SpecError(f"{path}: missing required key {key!r}")
        if not raw["inputs"]:
            raise SpecError(f"{path}: inputs must not be empty")
        if not raw["panels"]:
            raise SpecError(f"{path}: panels must not be empty")
        panels = []
        for entry in raw["panels"]:
            unknown = set(entry) - _PANEL_KEYS
            if unknown:
                raise SpecError(f"{path}: unknown panel keys {sorted(unknown)}")
            if _PANEL_KEYS - set(entry):
                raise SpecError(
                    f"{path}: panel needs keys {sorted(_PANEL_KEYS)}, got {sorted(entry)}")
            panels.append(Panel(entry["y"], entry["err"], entry["ylabel"]))
        filters = {col: tuple(values)
                   for col, values in raw.get("filter", {}).items()}
        return cls(
            inputs=tuple((path.parent / p).resolve() for p in raw["inputs"]),
            x=raw["x"],
            xlabel=raw["xlabel"],
            series=tuple(raw["series"]),
            panels=tuple(panels),
            output=raw["output"],
            title=raw.get("title", ""),
            filter=filters,
        )

    def referenced_columns(self) -> tuple[str, ...]:
        columns = [self.x, *self.series, *self.filter]
        for panel in self.panels:
            columns.extend((panel.y, panel.err))
        return tuple(dict.fromkeys(columns))


def load_rows(spec: FigureSpec) -> list[dict[str, str]]:
    """Concatenated data rows from all inputs, every column kept as text.

    Validates that each input carries every referenced column and at least
    one data row, before anything is rendered.
    """
    rows: list[dict[str, str]] = []
    for csv_path in spec.inputs:
        with open(csv_path, newline="", encoding="utf-8") as handle:
            reader = csv.DictReader(handle)
            header = reader.fieldnames or []
            for column in spec.referenced_columns():
                if column not in header:
                    raise MissingColumnError(column, csv_path)
            file_rows = list(reader)
        if not file_rows:
            raise EmptyInputError(f"{csv_path} has no data rows")
        rows.extend(file_rows)
    return rows
