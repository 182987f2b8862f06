from abc import ABC, abstractmethod
from typing import Any, Dict


class ReportPlugin(ABC):
    """
    Abstract Base Class for report renderers.
    A report is the dict built by app.utils.reporter, keyed by "kind".
    """

    name: str = "base"

    @abstractmethod
    def render(self, report: Dict[str, Any]) -> str:
        """
        Render a report document.

        Args:
            report: estimate, contrast or simulate document.

        Returns:
            The rendered text, newline-terminated.
        """
        pass
