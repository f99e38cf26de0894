"""Figures from blochlab artifacts; read-only over the CSV/JSON surface."""

from .figspec import KINDS, FigureSpec, PlotInputError
from .render import render

__version__ = "0.1.0"

__all__ = ["KINDS", "FigureSpec", "PlotInputError", "render", "__version__"]
