"""Standalone plotting for qlsim sweep CSVs."""

from qlsim_plots.render import PlotInputError, PlotSpec, load_rows, render

__version__ = "0.1.0"
