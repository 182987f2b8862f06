import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

from .base import ReportPlugin
from .json_export_plugin import JsonExportPlugin
from .text_plugin import TextReportPlugin

logger = logging.getLogger(__name__)


class ReportManager:
    """
    Factory that loads the report renderer for the requested format and
    delivers the rendered document to stdout or a file.
    """

    def __init__(self, fmt: str = "text"):
        self.fmt = fmt.lower()
        self.plugin = self._load_plugin()

    def _load_plugin(self) -> ReportPlugin:
        if self.fmt == "json":
            return JsonExportPlugin()
        if self.fmt != "text":
            logger.warning(f"[REPORT] Unknown report format '{self.fmt}', defaulting to text")
        return TextReportPlugin()

    def render(self, report: Dict[str, Any]) -> str:
        return self.plugin.render(report)

    def dispatch(self, report: Dict[str, Any], output: Optional[Union[str, Path]] = None) -> str:
        """Render, then write to output when given; returns the rendered text."""
        rendered = self.render(report)
        if output is not None:
            path = Path(output)
            path.write_text(rendered, encoding="utf-8")
            logger.info(f"[REPORT] {self.plugin.name} report written to {path}")
        return rendered
