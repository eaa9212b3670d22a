"""Control service: the single operational front door to the instruments."""

from .core import ControlService
from .history import HistoryEntry, HistoryLog

__all__ = ["ControlService", "HistoryEntry", "HistoryLog"]
