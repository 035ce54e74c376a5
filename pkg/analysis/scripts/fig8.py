#!/usr/bin/env python3
"""Render the bundled fig8 spec from the committed reference data."""
from pathlib import Path

from ebitplot.render import render_spec_file

if __name__ == "__main__":
    base = Path(__file__).resolve().parent.parent
    print(render_spec_file(base / "figures" / "fig8.json", base / "out"))
