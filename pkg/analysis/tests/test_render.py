"""Rendering: all committed figures, reproducibility, and input tracking."""

import csv
import json
from pathlib import Path

import pytest

from ebitplot.render import render, render_spec_file
from ebitplot.spec import EmptyInputError, FigureSpec

FIGURES = Path(__file__).resolve().parent.parent / "figures"
SPEC_FILES = sorted(FIGURES.glob("fig*.json"))


def write_csv(path, header, rows):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        writer.writerows(rows)


def synthetic_setup(tmp_path, rows=None):
    if rows is None:
        rows = [
            ["10", "a", "", "5.0", "0.5"],
            ["20", "a", "", "7.0", "0.4"],
            ["10", "b", "3", "2.0", "0.1"],
            ["20", "b", "3", "2.5", "0.2"],
        ]
    write_csv(tmp_path / "data.csv", ["x", "proto", "apps", "y", "e"], rows)
    raw = {
        "inputs": ["data.csv"],
        "x": "x",
        "xlabel": "x axis",
        "series": ["proto", "apps"],
        "panels": [{"y": "y", "err": "e", "ylabel": "y axis"}],
        "output": "plot.svg",
    }
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(raw))
    return path


@pytest.mark.parametrize("spec_path", SPEC_FILES, ids=lambda p: p.stem)
def test_committed_figures_render(tmp_path, spec_path):
    target = render_spec_file(spec_path, tmp_path)
    assert target.exists()
    head = target.read_bytes()[:300]
    assert b"<svg" in head


def test_rerender_is_byte_identical(tmp_path):
    spec = FigureSpec.load(FIGURES / "fig8.json")
    first = render(spec, tmp_path / "a")
    second = render(spec, tmp_path / "b")
    assert first.read_bytes() == second.read_bytes()


def test_output_changes_iff_input_changes(tmp_path):
    spec_path = synthetic_setup(tmp_path)
    baseline = render_spec_file(spec_path, tmp_path / "r1").read_bytes()

    unchanged = render_spec_file(spec_path, tmp_path / "r2").read_bytes()
    assert unchanged == baseline

    data = tmp_path / "data.csv"
    original = data.read_text()
    data.write_text(original.replace("7.0", "9.0"))
    perturbed = render_spec_file(spec_path, tmp_path / "r3").read_bytes()
    assert perturbed != baseline

    data.write_text(original)
    restored = render_spec_file(spec_path, tmp_path / "r4").read_bytes()
    assert restored == baseline


def test_series_labels_embedded_as_text(tmp_path):
    spec_path = synthetic_setup(tmp_path)
    svg = render_spec_file(spec_path, tmp_path / "out").read_bytes()
    assert b"proto=a" in svg
    assert b"proto=b, apps=3" in svg


def test_filter_drops_rows(tmp_path):
    spec_path = synthetic_setup(tmp_path)
    raw = json.loads(spec_path.read_text())
    raw["filter"] = {"proto": ["a"]}
    spec_path.write_text(json.dumps(raw))
    svg = render_spec_file(spec_path, tmp_path / "out").read_bytes()
    assert b"proto=a" in svg
    assert b"proto=b" not in svg


def test_rows_with_empty_y_are_skipped(tmp_path):
    rows = [
        ["10", "a", "", "5.0", "0.5"],
        ["20", "a", "", "", ""],
        ["30", "a", "", "6.0", "0.2"],
    ]
    spec_path = synthetic_setup(tmp_path, rows)
    target = render_spec_file(spec_path, tmp_path / "out")
    assert target.exists()


def test_failed_render_leaves_no_file(tmp_path):
    spec_path = synthetic_setup(tmp_path)
    write_csv(tmp_path / "data.csv", ["x", "proto", "apps", "y", "e"], [])
    out = tmp_path / "out"
    with pytest.raises(EmptyInputError):
        render_spec_file(spec_path, out)
    assert not out.exists() or not any(out.iterdir())
