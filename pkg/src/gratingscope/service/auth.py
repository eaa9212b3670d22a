"""Credential store (salted PBKDF2 records) and session management."""

from __future__ import annotations

import hashlib
import secrets
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from ..errors import AuthError, RateLimitedError

PBKDF2_ITERATIONS = 50_000

ROLE_OPERATOR = "operator"
ROLE_ADMIN = "admin"


def _hash_password(password: str, salt: bytes) -> str:
    return hashlib.pbkdf2_hmac("sha256", password.encode("utf-8"), salt,
                               PBKDF2_ITERATIONS).hex()


def create_credential_file(path, entries) -> Path:
    """Write ``user:role:salt:hash`` records; ``entries`` = (user, password, role)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for user, password, role in entries:
        if ":" in user:
            raise ValueError(f"user name may not contain ':': {user!r}")
        salt = secrets.token_bytes(16)
        lines.append(f"{user}:{role}:{salt.hex()}:{_hash_password(password, salt)}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


class CredentialStore:
    def __init__(self, path) -> None:
        self.path = Path(path)
        self._records: dict[str, tuple[str, bytes, str]] = {}
        for line in self.path.read_text(encoding="utf-8").splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            user, role, salt_hex, digest = line.split(":")
            self._records[user] = (role, bytes.fromhex(salt_hex), digest)

    def verify(self, user: str, password: str) -> Optional[str]:
        """Role for a valid pair, None otherwise (same path for unknown user)."""
        record = self._records.get(user)
        if record is None:
            # burn the same hashing cost so unknown users are indistinguishable
            _hash_password(password, b"\x00" * 16)
            return None
        role, salt, digest = record
        if secrets.compare_digest(_hash_password(password, salt), digest):
            return role
        return None


@dataclass(slots=True)
class Session:
    user: str
    role: str
    token: str
    issued_at: float


class SessionManager:
    """Issues opaque tokens, expires them, rate-limits failed logins."""

    def __init__(self, store: CredentialStore, ttl_s: float = 8 * 3600.0,
                 failure_limit: int = 5, cooldown_s: float = 30.0) -> None:
        self.store = store
        self.ttl_s = ttl_s
        self.failure_limit = failure_limit
        self.cooldown_s = cooldown_s
        self._lock = threading.Lock()
        self._sessions: dict[str, Session] = {}
        self._failures: dict[str, int] = {}
        self._locked_until: dict[str, float] = {}

    def login(self, user: str, password: str) -> Session:
        now = time.time()
        with self._lock:
            if self._locked_until.get(user, 0.0) > now:
                raise RateLimitedError(
                    f"too many failed logins; retry in "
                    f"{self._locked_until[user] - now:.0f} s"
                )
        role = self.store.verify(user, password)
        with self._lock:
            if role is None:
                count = self._failures.get(user, 0) + 1
                self._failures[user] = count
                if count >= self.failure_limit:
                    self._locked_until[user] = now + self.cooldown_s
                    self._failures[user] = 0
                raise AuthError("unknown user or bad password")
            self._failures.pop(user, None)
            session = Session(user=user, role=role, token=secrets.token_hex(16),
                              issued_at=now)
            self._sessions[session.token] = session
            return session

    def validate(self, token: Optional[str]) -> Session:
        if not token:
            raise AuthError("missing session token")
        with self._lock:
            session = self._sessions.get(token)
            if session is None:
                raise AuthError("unknown session token")
            if time.time() - session.issued_at > self.ttl_s:
                del self._sessions[token]
                raise AuthError("session expired")
            return session

    def revoke(self, token: str) -> None:
        with self._lock:
            self._sessions.pop(token, None)
