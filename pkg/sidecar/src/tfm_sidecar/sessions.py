"""Session registry with unguessable ids and TTL expiry."""

from __future__ import annotations

import secrets
import threading
import time
from dataclasses import dataclass, field

from .models import FittedModel


@dataclass
class Session:
    model: FittedModel
    d: int
    class_ids: list[int]
    created_at: float


@dataclass
class SessionStore:
    ttl_s: float
    _sessions: dict[str, Session] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock)
    _clock: object = time.monotonic

    def create(self, model: FittedModel, d: int, class_ids: list[int]) -> str:
        sid = secrets.token_urlsafe(24)
        with self._lock:
            self._expire_locked()
            self._sessions[sid] = Session(model, d, list(class_ids), self._clock())
        return sid

    def get(self, sid: str) -> Session | None:
        with self._lock:
            self._expire_locked()
            return self._sessions.get(sid)

    def delete(self, sid: str) -> bool:
        with self._lock:
            self._expire_locked()
            return self._sessions.pop(sid, None) is not None

    def _expire_locked(self) -> None:
        now = self._clock()
        dead = [sid for sid, s in self._sessions.items() if now - s.created_at > self.ttl_s]
        for sid in dead:
            del self._sessions[sid]

    def __len__(self) -> int:
        with self._lock:
            self._expire_locked()
            return len(self._sessions)
