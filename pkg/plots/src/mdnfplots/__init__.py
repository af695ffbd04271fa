"""Chart generation for experiment CSVs; all science lives upstream."""

from .render import FIGURE_KINDS, RenderError, main, render

__all__ = ["FIGURE_KINDS", "RenderError", "render", "main"]
