"""Generic renderer: one spec in, one reproducible image out.

Rendering is a pure function of the input CSVs.  SVG output pins the id
hash salt and drops the date stamp, so rerendering unchanged data gives
byte-identical files.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .spec import FigureSpec, load_rows

# fonts kept as text elements: smaller files and greppable labels
_RC = {"svg.hashsalt": "ebitplot", "svg.fonttype": "none"}


def _series_sort_key(key: tuple[str, ...]):
    parts = []
    for value in key:
        try:
            parts.append((0, float(value), ""))
        except ValueError:
            parts.append((1, 0.0, value))
    return parts


def _series_label(spec: FigureSpec, key: tuple[str, ...]) -> str:
    parts = [f"{column}={value}"
             for column, value in zip(spec.series, key) if value != ""]
    return ", ".join(parts) or "all"


def _grouped(spec: FigureSpec, rows: list[dict[str, str]]):
    kept = [row for row in rows
            if all(row[col] in allowed for col, allowed in spec.filter.items())]
    groups: dict[tuple[str, ...], list[dict[str, str]]] = {}
    for row in kept:
        groups.setdefault(tuple(row[col] for col in spec.series), []).append(row)
    return sorted(groups.items(), key=lambda item: _series_sort_key(item[0]))


def render(spec: FigureSpec, out_dir: str | Path) -> Path:
    """Render one figure; returns the written path.

    All validation and CSV reading happens before the figure is created,
    so a failing spec never leaves a file behind.
    """
    rows = load_rows(spec)
    groups = _grouped(spec, rows)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    target = out / spec.output

    with matplotlib.rc_context(_RC):
        fig, axes = plt.subplots(
            1, len(spec.panels), figsize=(6.0 * len(spec.panels), 4.5),
            squeeze=False)
        for panel, ax in zip(spec.panels, axes[0]):
            for key, members in groups:
                # a series may have nothing to say in one panel (e.g. no
                # deliveries, hence no fidelity); skip those rows only
                points = sorted(
                    ((float(r[spec.x]), float(r[panel.y]),
                      float(r[panel.err]) if r[panel.err] else 0.0)
                     for r in members if r[panel.y] != ""),
                    key=lambda p: p[0])
                if not points:
                    continue
                xs, ys, errs = zip(*points)
                ax.errorbar(xs, ys, yerr=errs, marker="o", capsize=3.0,
                            label=_series_label(spec, key))
            ax.set_xlabel(spec.xlabel)
            ax.set_ylabel(panel.ylabel)
            ax.grid(True, alpha=0.3)
            ax.legend(fontsize="small")
        if spec.title:
            fig.suptitle(spec.title)
        fig.tight_layout()
        fig.savefig(target, metadata={"Date": None})
        plt.close(fig)
    return target


def render_spec_file(spec_path: str | Path, out_dir: str | Path) -> Path:
    return render(FigureSpec.load(spec_path), out_dir)
