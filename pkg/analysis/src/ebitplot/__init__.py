"""Plotting for repeater-chain simulation results.

Figure definitions live in JSON data files; this package validates them
against the simulator's CSV schema and renders reproducible images.
"""

from .render import render, render_spec_file
from .spec import EmptyInputError, FigureSpec, MissingColumnError, Panel, SpecError

__all__ = [
    "EmptyInputError",
    "FigureSpec",
    "MissingColumnError",
    "Panel",
    "SpecError",
    "render",
    "render_spec_file",
]
