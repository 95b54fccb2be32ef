"""Report rendering, figures and logging setup."""

from .logging_setup import configure_logging
from .template_renderer import ReportRenderer, render_report
from .visualizer import TrainingVisualizer

__all__ = [
    "ReportRenderer",
    "TrainingVisualizer",
    "configure_logging",
    "render_report",
]
