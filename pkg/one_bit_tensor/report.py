"""
Leveled message aggregation for experiment and recipe runs.
"""
from typing import Dict, List, Optional, Set

import logging
logger = logging.getLogger(__name__)

MESSAGE_LEVELS = ("warning", "skipped", "info")


class RunReport:
    """
    RunReport collects the actionable messages of one run (degenerate labels,
    duplicated input rows, unconverged fits...) keyed by severity level.
    Reports of the parts of a run (e.g. the splits of a repeated recipe) are
    combined with merge().
    """
    def __init__(self, run_name: str):
        self.run_name: str = run_name
        self.messages: Dict[str, Set[str]] = {level: set() for level in MESSAGE_LEVELS}

    def report(self, level: str, message: str):
        """
        :param level: str, one of MESSAGE_LEVELS
        :param message: str, human-readable message
        """
        if level not in self.messages:
            raise RuntimeError(f"RunReport.report(): unknown message level '{level}'")
        self.messages[level].add(f"{self.run_name}: {message}")

    def skip(self, message: str):
        self.report("skipped", message)

    def warning(self, message: str):
        self.report("warning", message)

    def info(self, message: str):
        self.report("info", message)

    def has_messages(self, level: Optional[str] = None) -> bool:
        if level is None:
            return any(self.messages.values())
        return bool(self.messages[level])

    def get_messages(self) -> Dict[str, List[str]]:
        return {level: sorted(message_set) for level, message_set in self.messages.items()}

    def merge(self, other: "RunReport"):
        for level, message_set in other.messages.items():
            self.messages[level].update(message_set)

    def report_outcome(self):
        """
        Log the collected messages, most severe level first.
        """
        for level, log in (
            ("warning", logger.warning),
            ("skipped", logger.info),
            ("info", logger.info)
        ):
            for message in sorted(self.messages[level]):
                log(message)
