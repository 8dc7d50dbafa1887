from __future__ import annotations

import pytest

from conftest import PIN, make_token
from vfa import client, cred_store, device, soft_token, sync
from vfa.auth import SyncCredential
from vfa.cred_store import StoreMode, dumps_store, loads_store
from vfa.ctap import Authenticator, GetAssertionParams
from vfa.errors import DecryptFailed, ModeMismatch, NoCredentials, OprfUnavailable
from vfa.transport import InProcessTransport

RPS = ("a.example", "b.example", "c.example")


def _register_all(unlocked, rp_client):
    auth = Authenticator(unlocked)
    return auth, [client.register(auth, rp_client, rp, "alice") for rp in RPS]


@pytest.fixture
def sync_server():
    return sync.SyncServer()


@pytest.fixture
def cred():
    return SyncCredential.generate("alice")


def _sync_client(server, cred):
    return sync.SyncClient(InProcessTransport(server), cred)


@pytest.mark.parametrize("mode", [StoreMode.BASELINE, StoreMode.HARDENED])
def test_rotation_keeps_credentials_usable(mode, token, session, rp_client, oprf_client):
    unlocked = device.enroll(token, session, mode, oprf_client)
    auth, regs = _register_all(unlocked, rp_client)
    old_store = unlocked.backing
    old_master = unlocked.master
    rotated = device.rotate(token, session, unlocked, oprf_client)
    assert rotated.master != old_master
    auth.unlock_with(rotated)
    for rp, reg in zip(RPS, regs):
        assert client.authenticate(auth, rp_client, rp).credential_id == reg.credential_id
    for enc in old_store.records:
        with pytest.raises(DecryptFailed):
            cred_store.open_credential(rotated.master, enc)
    # The rotated store re-opens from scratch via the token.
    again = cred_store.unlock(token, session, loads_store(dumps_store(rotated.backing)), oprf_client)
    assert {r.credential_id for r in again.plaintext} == {r.credential_id for r in regs}


def test_hardened_enroll_needs_oprf(token, session):
    with pytest.raises(OprfUnavailable):
        device.enroll(token, session, StoreMode.HARDENED)


def test_hardened_store_records_key_id(token, session, oprf_client):
    unlocked = device.enroll(token, session, StoreMode.HARDENED, oprf_client)
    assert unlocked.backing.oprf_key_id == oprf_client.current_key_id()
    rotated = device.rotate(token, session, unlocked, oprf_client)
    assert rotated.backing.oprf_key_id == oprf_client.current_key_id() != unlocked.backing.oprf_key_id


def test_rotation_on_one_device_reaches_the_other(token, session, unlocked, rp_client, sync_server, cred):
    auth_a, regs = _register_all(unlocked, rp_client)
    ca = _sync_client(sync_server, cred)
    device.push(token, session, ca, unlocked)

    token_b = make_token()
    session_b = soft_token.open_session(token_b, PIN)
    cb = _sync_client(sync_server, cred)
    dev_b = sync.onboard_new_device(token_b, session_b, cb)

    rotated = device.rotate(token, session, unlocked, None)
    device.push(token, session, ca, rotated)
    device.pull(token_b, session_b, cb, dev_b)
    assert dev_b.master == rotated.master
    auth_b = Authenticator(dev_b)
    for rp in RPS:
        client.authenticate(auth_b, rp_client, rp)


def test_push_after_remote_rotation_merges(token, session, unlocked, rp_client, sync_server, cred):
    _register_all(unlocked, rp_client)
    ca = _sync_client(sync_server, cred)
    device.push(token, session, ca, unlocked)
    token_b = make_token()
    session_b = soft_token.open_session(token_b, PIN)
    cb = _sync_client(sync_server, cred)
    dev_b = sync.onboard_new_device(token_b, session_b, cb)

    rotated = device.rotate(token, session, unlocked, None)
    device.push(token, session, ca, rotated)
    # B made a local change under the old key and pushes without pulling first.
    client.register(Authenticator(dev_b), rp_client, "d.example", "alice")
    device.push(token_b, session_b, cb, dev_b)
    data, _ = ca.pull_store()
    merged = cred_store.unlock(token, session, loads_store(data))
    assert {r.rp_id for r in merged.plaintext} == set(RPS) | {"d.example"}


def test_delete_propagates_to_all_devices(token, session, unlocked, rp_client, sync_server, cred):
    auth_a, regs = _register_all(unlocked, rp_client)
    ca = _sync_client(sync_server, cred)
    device.push(token, session, ca, unlocked)
    token_b = make_token()
    session_b = soft_token.open_session(token_b, PIN)
    cb = _sync_client(sync_server, cred)
    dev_b = sync.onboard_new_device(token_b, session_b, cb)

    victim = regs[0].credential_id
    unlocked.backing = cred_store.delete_credential(unlocked.master, unlocked.backing, victim)
    fresh = cred_store.open_with(unlocked.master, unlocked.backing)
    unlocked.plaintext, unlocked.tombstones = fresh.plaintext, fresh.tombstones
    device.push(token, session, ca, unlocked)
    device.pull(token_b, session_b, cb, dev_b)
    assert victim not in {r.credential_id for r in dev_b.plaintext}
    with pytest.raises(NoCredentials):
        Authenticator(dev_b).get_assertion(GetAssertionParams(bytes(32), RPS[0]))


def test_mode_mismatch(token, session, unlocked, oprf_client):
    hardened = device.enroll(token, session, StoreMode.HARDENED, oprf_client)
    with pytest.raises(ModeMismatch):
        device.absorb_remote(token, session, unlocked, hardened.backing, oprf_client)
