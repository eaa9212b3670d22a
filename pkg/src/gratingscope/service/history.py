"""Append-only operation history with periodic block checksums.

One JSON object per line; after every ``BLOCK_SIZE`` entries a comment line
``# block crc32=<hex> count=<n>`` seals the bytes since the previous
checkpoint. Timestamps are monotonically non-decreasing. The log is the
audit trail: one entry per state-mutating service call (including rejected
ones) plus one per authentication rejection.
"""

from __future__ import annotations

import json
import threading
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from ..errors import ChecksumError

BLOCK_SIZE = 50


@dataclass(slots=True)
class HistoryEntry:
    timestamp: float
    user: str
    action: str
    target: str
    params: dict = field(default_factory=dict)
    outcome: str = "ok"

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "HistoryEntry":
        return cls(**json.loads(line))


class HistoryLog:
    """Thread-safe append-only log, durable across service restarts."""

    def __init__(self, path) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._entries: list[HistoryEntry] = []
        self._last_ts = 0.0
        self._pending_block = b""
        self._pending_count = 0
        if self.path.exists():
            self._load()
        else:
            self.path.touch()

    def _load(self) -> None:
        block = b""
        count = 0
        for raw in self.path.read_bytes().splitlines(keepends=True):
            line = raw.decode("utf-8").strip()
            if not line:
                continue
            if line.startswith("#"):
                tokens = dict(
                    token.split("=") for token in line[1:].split() if "=" in token
                )
                want = tokens.get("crc32", "")
                got = f"{zlib.crc32(block) & 0xFFFFFFFF:08x}"
                if want != got or int(tokens.get("count", -1)) != count:
                    raise ChecksumError(
                        f"history block checksum mismatch in {self.path}: "
                        f"recorded {want}/{tokens.get('count')}, computed {got}/{count}"
                    )
                block = b""
                count = 0
                continue
            entry = HistoryEntry.from_json(line)
            self._entries.append(entry)
            self._last_ts = max(self._last_ts, entry.timestamp)
            block += raw
            count += 1
        self._pending_block = block
        self._pending_count = count

    def append(self, user: str, action: str, target: str, params: Optional[dict] = None,
               outcome: str = "ok") -> HistoryEntry:
        with self._lock:
            ts = max(time.time(), self._last_ts)
            self._last_ts = ts
            entry = HistoryEntry(timestamp=ts, user=user, action=action, target=target,
                                 params=params or {}, outcome=outcome)
            raw = (entry.to_json() + "\n").encode("utf-8")
            with open(self.path, "ab") as fh:
                fh.write(raw)
                self._pending_block += raw
                self._pending_count += 1
                if self._pending_count >= BLOCK_SIZE:
                    crc = f"{zlib.crc32(self._pending_block) & 0xFFFFFFFF:08x}"
                    fh.write(f"# block crc32={crc} count={self._pending_count}\n".encode())
                    self._pending_block = b""
                    self._pending_count = 0
            self._entries.append(entry)
            return entry

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    def tail(self, limit: int = 100) -> list[HistoryEntry]:
        with self._lock:
            return list(self._entries[-limit:])

    def all(self) -> list[HistoryEntry]:
        with self._lock:
            return list(self._entries)

    def stats_by_target(self) -> dict[str, dict[str, int]]:
        """Per-target call counts; the instrument-maintenance summary."""
        out: dict[str, dict[str, int]] = {}
        with self._lock:
            for entry in self._entries:
                bucket = out.setdefault(entry.target, {"calls": 0, "errors": 0})
                bucket["calls"] += 1
                if entry.outcome != "ok":
                    bucket["errors"] += 1
        return out
