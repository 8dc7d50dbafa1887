"""Ciphertext-only store synchronization.

The server keeps one opaque blob per user with a version counter and
accepts a replacement only when the client names the version it last saw
(compare and swap). Everything that needs a key, including conflict
merging, happens on the client.
"""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import cred_store
from .auth import Accounts, SyncCredential
from .cred_store import (
    CredentialRecord,
    EncryptedStore,
    OprfOutputSource,
    Tombstone,
    UnlockedStore,
    build_store,
    compact_tombstones,
    dumps_store,
    loads_store,
    open_all,
    open_tombstones,
    open_with,
)
from .encoding import b64url, unb64url
from .errors import InvalidParameter, NotFound, TransportError, VersionConflict, VfaError
from .key_hierarchy import MasterKey
from .transport import Response, error_response, json_response, raise_for_error

STORE_PATH = "/v1/store"
MAX_MERGE_RETRIES = 8


# -- server ---------------------------------------------------------------------

@dataclass
class StoredBlob:
    data: bytes
    version: int
    etag: bytes


@dataclass
class SyncServer:
    """Blob store keyed by user ID. It never looks inside a blob."""

    accounts: Accounts = field(default_factory=Accounts)
    blobs: dict[str, StoredBlob] = field(default_factory=dict)
    state_path: Path | None = None

    def __post_init__(self):
        self._lock = threading.Lock()

    def get(self, user: str) -> StoredBlob:
        with self._lock:
            blob = self.blobs.get(user)
        if blob is None:
            raise NotFound(f"no store for {user!r}")
        return blob

    def put(self, user: str, data: bytes, expected_version: int) -> int:
        with self._lock:
            current = self.blobs.get(user)
            current_version = 0 if current is None else current.version
            if expected_version != current_version:
                raise VersionConflict(current_version)
            new = StoredBlob(bytes(data), current_version + 1, os.urandom(16))
            self.blobs[user] = new
            if self.state_path is not None:
                self._save_locked(self.state_path)
        return new.version

    def handle(self, method: str, path: str, headers: dict, body: bytes) -> Response:
        if path != STORE_PATH:
            return json_response(404, {"error": "NotFound", "message": path})
        try:
            user = self.accounts.authenticate(headers)
            if method == "GET":
                blob = self.get(user)
                return Response(
                    200,
                    {
                        "content-type": "application/octet-stream",
                        "x-store-version": str(blob.version),
                        "etag": blob.etag.hex(),
                    },
                    blob.data,
                )
            if method == "PUT":
                try:
                    expected = int(headers.get("x-expected-version", ""))
                except ValueError:
                    raise InvalidParameter("X-Expected-Version header is required") from None
                version = self.put(user, body, expected)
                return json_response(200, {"version": version}, {"x-store-version": str(version)})
            return json_response(405, {"error": "MethodNotAllowed", "message": method})
        except VersionConflict as exc:
            return error_response(exc, {"x-store-version": str(exc.current_version)})
        except VfaError as exc:
            return error_response(exc)

    def dump(self) -> dict:
        """Everything the server holds; what a full server compromise yields."""
        with self._lock:
            return self._state_locked()

    def _state_locked(self) -> dict:
        return {
            "accounts": self.accounts.to_json(),
            "blobs": {
                u: {"data": b64url(b.data), "version": b.version, "etag": b.etag.hex()}
                for u, b in self.blobs.items()
            },
        }

    def _save_locked(self, path: Path) -> None:
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self._state_locked(), sort_keys=True))
        os.replace(tmp, path)

    def save(self, path: str | os.PathLike) -> None:
        with self._lock:
            self._save_locked(Path(path))

    @classmethod
    def load(cls, path: str | os.PathLike, persist: bool = True) -> "SyncServer":
        path = Path(path)
        state = json.loads(path.read_text()) if path.exists() else {}
        blobs = {
            u: StoredBlob(unb64url(b["data"]), int(b["version"]), bytes.fromhex(b["etag"]))
            for u, b in state.get("blobs", {}).items()
        }
        return cls(
            accounts=Accounts.from_json(state.get("accounts", {})),
            blobs=blobs,
            state_path=path if persist else None,
        )


# -- client -----------------------------------------------------------------------

class SyncClient:
    def __init__(self, transport, credential: SyncCredential):
        self.transport = transport
        self.credential = credential
        self.last_version: int | None = None

    def _request(self, method: str, headers: dict | None = None, body: bytes = b"") -> Response:
        hdrs = self.credential.headers()
        hdrs.update(headers or {})
        return self.transport.request(method, STORE_PATH, hdrs, body)

    def push_store(self, store_bytes: bytes, expected_version: int) -> int:
        if expected_version < 0:
            raise InvalidParameter("expected_version must be nonnegative")
        resp = self._request("PUT", {"X-Expected-Version": str(expected_version)}, store_bytes)
        raise_for_error(resp)
        self.last_version = int(resp.headers["x-store-version"])
        return self.last_version

    def pull_store(self) -> tuple[bytes, int]:
        resp = self._request("GET")
        raise_for_error(resp)
        self.last_version = int(resp.headers["x-store-version"])
        return resp.body, self.last_version


# -- merge ------------------------------------------------------------------------

def _newer(a: CredentialRecord, b: CredentialRecord) -> CredentialRecord:
    if a.sign_counter != b.sign_counter:
        return a if a.sign_counter > b.sign_counter else b
    # Equal counters: pick deterministically so the merge is order independent.
    return a if a.to_cbor() >= b.to_cbor() else b


def merge_records(
    records: list[list[CredentialRecord]], tombstones: list[list[Tombstone]], now: float
) -> tuple[list[CredentialRecord], list[Tombstone]]:
    """Plaintext merge: union by credential ID, higher counter wins, tombstones win."""
    tombs: dict[bytes, Tombstone] = {}
    for t in (t for side in tombstones for t in side):
        prev = tombs.get(t.credential_id)
        if prev is None or t.deleted_at > prev.deleted_at:
            tombs[t.credential_id] = t
    merged: dict[bytes, CredentialRecord] = {}
    for rec in (r for side in records for r in side):
        if rec.credential_id in tombs:
            continue
        prev = merged.get(rec.credential_id)
        merged[rec.credential_id] = rec if prev is None else _newer(prev, rec)
    ordered = sorted(merged.values(), key=lambda r: (r.created_at, r.credential_id))
    kept = sorted(compact_tombstones(tombs.values(), now), key=lambda t: t.credential_id)
    return ordered, kept


def merge_stores(
    master: MasterKey, local: EncryptedStore, remote: EncryptedStore, now: float | None = None
) -> EncryptedStore:
    """Merge two stores sealed under ``master``; the result keeps ``local``'s envelope."""
    now = time.time() if now is None else now
    recs, tombs = merge_records(
        [open_all(master, local), open_all(master, remote)],
        [open_tombstones(master, local), open_tombstones(master, remote)],
        now,
    )
    return build_store(master, local, recs, tombs, version=max(local.version, remote.version) + 1)


# -- flows ------------------------------------------------------------------------

def onboard_new_device(
    token,
    session,
    client: SyncClient,
    oprf_client: OprfOutputSource | None = None,
) -> UnlockedStore:
    """Pull the store, re-establish the master key on this device, decrypt everything."""
    data, _ = client.pull_store()
    store = loads_store(data)
    return cred_store.unlock(token, session, store, oprf_client)


def _known_version(client: SyncClient, known: int | None) -> int:
    if known is not None:
        return known
    return 0 if client.last_version is None else client.last_version


def sync_push(
    client: SyncClient,
    unlocked: UnlockedStore,
    known_version: int | None = None,
    now: float | None = None,
    retries: int = MAX_MERGE_RETRIES,
) -> int:
    """Push the local store, pulling and merging on conflict until accepted.

    ``unlocked`` is updated in place with any merged remote changes.
    """
    expected = _known_version(client, known_version)
    for _ in range(retries + 1):
        try:
            return client.push_store(dumps_store(unlocked.backing), expected)
        except VersionConflict as exc:
            expected = exc.current_version
            if expected == 0:
                continue
            data, expected = client.pull_store()
            absorb_store(unlocked, loads_store(data), now)
    raise TransportError(f"push still conflicting after {retries} merges")


def sync_pull(client: SyncClient, unlocked: UnlockedStore, now: float | None = None) -> int:
    """Fetch the remote store and merge it into ``unlocked``."""
    data, version = client.pull_store()
    absorb_store(unlocked, loads_store(data), now)
    return version


def absorb_store(unlocked: UnlockedStore, remote: EncryptedStore, now: float | None) -> None:
    merged = merge_stores(unlocked.master, unlocked.backing, remote, now)
    fresh = open_with(unlocked.master, merged)
    unlocked.plaintext = fresh.plaintext
    unlocked.tombstones = fresh.tombstones
    unlocked.backing = merged
