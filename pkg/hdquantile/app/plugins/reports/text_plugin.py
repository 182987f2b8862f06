from typing import Any, Dict

from .base import ReportPlugin
from ...core.resilience import InputError
from ...utils.reporter import (format_contrast_text, format_estimate_text,
                               format_simulation_text)

_FORMATTERS = {
    "estimate": format_estimate_text,
    "contrast": format_contrast_text,
    "simulate": format_simulation_text,
}


class TextReportPlugin(ReportPlugin):
    """Aligned text tables for the terminal."""

    name = "text"

    def render(self, report: Dict[str, Any]) -> str:
        formatter = _FORMATTERS.get(report.get("kind"))
        if formatter is None:
            raise InputError(f"no text layout for report kind '{report.get('kind')}'")
        return formatter(report) + "\n"
