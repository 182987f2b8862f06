import json
from typing import Any, Dict

from .base import ReportPlugin
from ...utils.reporter import to_jsonable


class JsonExportPlugin(ReportPlugin):
    """
    JSON report document. Keys are sorted and nothing time-dependent is
    written, so identical runs give byte-identical output.
    """

    name = "json"

    def render(self, report: Dict[str, Any]) -> str:
        return json.dumps(to_jsonable(report), sort_keys=True, indent=2, allow_nan=False) + "\n"
