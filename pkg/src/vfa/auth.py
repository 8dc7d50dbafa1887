"""Bearer-secret access control shared by the sync and OPRF services.

The secret only authorizes access to a user's blob or OPRF quota. It is
drawn from the OS RNG and has no relation to any key that protects
credential records.
"""

from __future__ import annotations

import hmac
import os
import threading
from dataclasses import dataclass

from .encoding import b64url, unb64url
from .errors import Unauthorized

USER_HEADER = "x-user-id"


@dataclass(frozen=True)
class SyncCredential:
    user_id: str
    bearer_secret: bytes

    def __post_init__(self):
        if len(self.bearer_secret) != 32:
            raise ValueError("bearer_secret must be 32 bytes")

    @classmethod
    def generate(cls, user_id: str) -> "SyncCredential":
        return cls(user_id, os.urandom(32))

    def headers(self) -> dict[str, str]:
        return {"Authorization": f"Bearer {b64url(self.bearer_secret)}", "X-User-Id": self.user_id}

    def __repr__(self) -> str:
        return f"SyncCredential(user_id={self.user_id!r}, bearer_secret=<redacted>)"

    def to_json(self) -> dict:
        return {"user_id": self.user_id, "bearer_secret": b64url(self.bearer_secret)}

    @classmethod
    def from_json(cls, obj: dict) -> "SyncCredential":
        return cls(obj["user_id"], unb64url(obj["bearer_secret"]))


class Accounts:
    """user_id -> bearer secret registry with constant-time comparison."""

    def __init__(self, users: dict[str, bytes] | None = None, open_registration: bool = True):
        self._users = dict(users or {})
        # Trust on first use: an unknown user ID is bound to the first secret it presents.
        self.open_registration = open_registration
        self._lock = threading.Lock()

    def register(self, cred: SyncCredential) -> None:
        with self._lock:
            existing = self._users.get(cred.user_id)
            if existing is not None and not hmac.compare_digest(existing, cred.bearer_secret):
                raise Unauthorized(f"user {cred.user_id!r} already registered with another secret")
            self._users[cred.user_id] = cred.bearer_secret

    def authenticate(self, headers: dict[str, str]) -> str:
        user = headers.get(USER_HEADER)
        auth = headers.get("authorization", "")
        scheme, _, token = auth.partition(" ")
        if not user or scheme.lower() != "bearer" or not token:
            raise Unauthorized("missing bearer credential")
        try:
            presented = unb64url(token.strip())
        except ValueError:
            raise Unauthorized("malformed bearer credential") from None
        with self._lock:
            expected = self._users.get(user)
            if expected is None and self.open_registration:
                self._users[user] = expected = presented
        if expected is None or not hmac.compare_digest(expected, presented):
            raise Unauthorized("bad bearer credential")
        return user

    def to_json(self) -> dict[str, str]:
        with self._lock:
            return {u: b64url(s) for u, s in self._users.items()}

    @classmethod
    def from_json(cls, obj: dict[str, str]) -> "Accounts":
        return cls({u: unb64url(s) for u, s in obj.items()})
