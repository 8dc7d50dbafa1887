"""Device-level flows: enrollment by mode, rotation, and sync across key changes."""

from __future__ import annotations

import os
import time

from . import cred_store, key_hierarchy
from .cred_store import EncryptedStore, StoreMode, UnlockedStore, dumps_store, loads_store, open_with
from .errors import DecryptFailed, ModeMismatch, OprfUnavailable, TransportError, VersionConflict
from .key_hierarchy import DEFAULT_LABEL, DerivationLabel
from .sync import MAX_MERGE_RETRIES, SyncClient, absorb_store, merge_records


def enroll(
    token,
    session,
    mode: StoreMode = StoreMode.BASELINE,
    oprf_client=None,
    label: DerivationLabel = DEFAULT_LABEL,
) -> UnlockedStore:
    """Establish a master key for a new, empty store.

    Nothing is written here; callers persist ``result.backing`` only after
    every network step succeeded.
    """
    mode = StoreMode(mode)
    if mode == StoreMode.BASELINE:
        master = key_hierarchy.derive_master_baseline(token, session, label)
        return open_with(master, cred_store.new_store(StoreMode.BASELINE))
    if oprf_client is None:
        raise OprfUnavailable("hardened enrollment needs an OPRF server")
    store_id = os.urandom(16)
    key_id = oprf_client.current_key_id()
    oprf_output = oprf_client.fetch_output(store_id, key_id, label)
    master = key_hierarchy.derive_master_hardened(token, session, oprf_output, label)
    store = cred_store.new_store(StoreMode.HARDENED, oprf_key_id=key_id, store_id=store_id)
    return open_with(master, store)


def rotate(token, session, unlocked: UnlockedStore, oprf_client=None, label=DEFAULT_LABEL) -> UnlockedStore:
    """Re-seal everything under a fresh master key.

    Baseline keys are fixed by the token, so a baseline store moves to a
    token-wrapped random key. Hardened stores move to a fresh OPRF server key.
    """
    store = unlocked.backing
    if store.mode == StoreMode.HARDENED:
        if oprf_client is None:
            raise OprfUnavailable("hardened rotation needs an OPRF server")
        key_id = oprf_client.rotate_key()
        oprf_output = oprf_client.fetch_output(store.store_id, key_id, label)
        new = key_hierarchy.derive_master_hardened(token, session, oprf_output, label)
        resealed = key_hierarchy.rotate_master(unlocked.master, new, store, oprf_key_id=key_id)
    else:
        new, wrapped = key_hierarchy.enroll_master_wrapped(token, session, os.urandom(32))
        resealed = key_hierarchy.rotate_master(unlocked.master, new, store, wrapped_master=wrapped)
    return open_with(new, resealed)


def absorb_remote(
    token,
    session,
    unlocked: UnlockedStore,
    remote: EncryptedStore,
    oprf_client=None,
    now: float | None = None,
    keep_local_key: bool = False,
) -> None:
    """Merge ``remote`` into ``unlocked`` even if another device rotated the key.

    When the two stores are sealed under different master keys the remote
    key is re-established with the token. By default the result adopts the
    remote envelope (the server accepted it first); ``keep_local_key`` keeps
    the local one instead, which a device that has just rotated wants.
    """
    if remote.mode != unlocked.backing.mode:
        raise ModeMismatch("remote store was enrolled in a different mode")
    try:
        absorb_store(unlocked, remote, now)
        return
    except DecryptFailed:
        pass
    remote_master = cred_store.recover_master(token, session, remote, oprf_client)
    now = time.time() if now is None else now
    remote_view = open_with(remote_master, remote)
    recs, tombs = merge_records(
        [unlocked.plaintext, remote_view.plaintext], [unlocked.tombstones, remote_view.tombstones], now
    )
    master, template = (unlocked.master, unlocked.backing) if keep_local_key else (remote_master, remote)
    merged = cred_store.build_store(
        master, template, recs, tombs, version=max(remote.version, unlocked.backing.version) + 1
    )
    fresh = open_with(master, merged)
    unlocked.master = master
    unlocked.plaintext = fresh.plaintext
    unlocked.tombstones = fresh.tombstones
    unlocked.backing = merged


def pull(token, session, client: SyncClient, unlocked: UnlockedStore, oprf_client=None, now=None) -> int:
    """Fetch the remote store and fold it into ``unlocked``."""
    data, version = client.pull_store()
    absorb_remote(token, session, unlocked, loads_store(data), oprf_client, now)
    return version


def push(
    token,
    session,
    client: SyncClient,
    unlocked: UnlockedStore,
    known_version: int | None = None,
    oprf_client=None,
    now=None,
    retries: int = MAX_MERGE_RETRIES,
) -> int:
    """Push with compare and swap; on conflict pull, merge (keeping the local key) and retry."""
    expected = known_version if known_version is not None else (client.last_version or 0)
    for _ in range(retries + 1):
        try:
            return client.push_store(dumps_store(unlocked.backing), expected)
        except VersionConflict as exc:
            if exc.current_version == 0:
                expected = 0
                continue
            data, expected = client.pull_store()
            absorb_remote(token, session, unlocked, loads_store(data), oprf_client, now, keep_local_key=True)
    raise TransportError(f"push still conflicting after {retries} merges")
