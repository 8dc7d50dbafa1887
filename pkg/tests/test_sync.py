from __future__ import annotations

import os
import threading
from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from conftest import PIN, SEED_B, make_token
from vfa import client as rp_client_mod
from vfa import cred_store, soft_token, sync
from vfa.auth import Accounts, SyncCredential
from vfa.cred_store import CredentialRecord, Tombstone, dumps_store, loads_store
from vfa.ctap import Authenticator
from vfa.errors import DecryptFailed, NotFound, Unauthorized, VersionConflict
from vfa.transport import HttpTransport, InProcessTransport, LoopbackServer


@pytest.fixture
def server():
    return sync.SyncServer()


def _client(server, user="alice", cred=None):
    return sync.SyncClient(InProcessTransport(server), cred or SyncCredential.generate(user))


def _with_records(unlocked, n):
    for i in range(n):
        rec = CredentialRecord.generate(f"rp{i}.example", os.urandom(8), "u", now=float(i))
        unlocked.backing = cred_store.seal_credential(unlocked.master, rec, unlocked.backing)
        unlocked.plaintext.append(rec)
    return unlocked


def test_first_push_is_version_one_and_pull_is_bit_exact(server, unlocked):
    c = _client(server)
    data = dumps_store(_with_records(unlocked, 2).backing)
    assert c.push_store(data, 0) == 1
    assert c.pull_store() == (data, 1)


def test_versions_increase(server):
    c = _client(server)
    for v in range(3):
        assert c.push_store(b"blob%d" % v, v) == v + 1
    assert c.pull_store()[1] == 3


def test_pull_before_push_is_not_found(server):
    with pytest.raises(NotFound):
        _client(server).pull_store()


def test_stale_push_conflicts(server):
    c = _client(server)
    c.push_store(b"a", 0)
    with pytest.raises(VersionConflict) as err:
        c.push_store(b"b", 0)
    assert err.value.current_version == 1


def test_concurrent_pushes_exactly_one_wins(server):
    cred = SyncCredential.generate("alice")
    outcomes = []
    barrier = threading.Barrier(2)

    def go(body):
        c = _client(server, cred=cred)
        barrier.wait()
        try:
            c.push_store(body, 0)
            outcomes.append("ok")
        except VersionConflict:
            outcomes.append("conflict")

    threads = [threading.Thread(target=go, args=(b,)) for b in (b"one", b"two")]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert sorted(outcomes) == ["conflict", "ok"]


def test_wrong_secret_is_unauthorized(server):
    good = SyncCredential.generate("alice")
    _client(server, cred=good).push_store(b"x", 0)
    evil = SyncCredential("alice", os.urandom(32))
    with pytest.raises(Unauthorized):
        _client(server, cred=evil).pull_store()


def test_closed_registration_refuses_unknown_users():
    server = sync.SyncServer(accounts=Accounts(open_registration=False))
    with pytest.raises(Unauthorized):
        _client(server).push_store(b"x", 0)


def test_users_are_isolated(server):
    _client(server, "alice").push_store(b"a", 0)
    with pytest.raises(NotFound):
        _client(server, "bob").pull_store()


def test_bearer_secret_independent_of_master_key(unlocked):
    cred = SyncCredential.generate("alice")
    assert cred.bearer_secret != unlocked.master.key_bytes
    assert cred.bearer_secret.hex() not in repr(cred)
    assert SyncCredential.from_json(cred.to_json()) == cred


def test_server_persistence(tmp_path):
    path = tmp_path / "sync.json"
    server = sync.SyncServer.load(path)
    cred = SyncCredential.generate("alice")
    _client(server, cred=cred).push_store(b"persisted", 0)
    again = sync.SyncServer.load(path)
    assert _client(again, cred=cred).pull_store() == (b"persisted", 1)


def test_dump_contains_only_ciphertext(server, unlocked):
    _with_records(unlocked, 2)
    _client(server).push_store(dumps_store(unlocked.backing), 0)
    dump = repr(server.dump())
    for rec in unlocked.plaintext:
        assert rec.private_key.hex() not in dump
        assert rec.rp_id not in dump


def test_http_loopback_round_trip(server):
    cred = SyncCredential.generate("alice")
    with LoopbackServer(server) as http:
        c = sync.SyncClient(HttpTransport(http.url), cred)
        assert c.push_store(b"over-http", 0) == 1
        with pytest.raises(VersionConflict):
            c.push_store(b"again", 0)
        assert c.pull_store() == (b"over-http", 1)


# -- onboarding -------------------------------------------------------------------

def test_onboarding_second_device(server, token, session, unlocked, rp_client):
    auth_a = Authenticator(unlocked)
    for rp in ("a.example", "b.example"):
        rp_client_mod.register(auth_a, rp_client, rp, "alice")
    cred = SyncCredential.generate("alice")
    sync.sync_push(_client(server, cred=cred), unlocked)

    token_b = make_token()
    session_b = soft_token.open_session(token_b, PIN)
    device_b = sync.onboard_new_device(token_b, session_b, _client(server, cred=cred))
    auth_b = Authenticator(device_b)
    for rp in ("a.example", "b.example"):
        rp_client_mod.authenticate(auth_b, rp_client, rp)


def test_onboarding_with_other_token_fails(server, unlocked):
    cred = SyncCredential.generate("alice")
    sync.sync_push(_client(server, cred=cred), _with_records(unlocked, 1))
    other = make_token(SEED_B)
    with pytest.raises(DecryptFailed):
        sync.onboard_new_device(other, soft_token.open_session(other, PIN), _client(server, cred=cred))


def test_onboarding_empty_store(server, unlocked, token, session):
    cred = SyncCredential.generate("alice")
    sync.sync_push(_client(server, cred=cred), unlocked)
    assert len(sync.onboard_new_device(token, session, _client(server, cred=cred))) == 0


# -- merge ------------------------------------------------------------------------

def _fork(unlocked):
    return cred_store.open_with(unlocked.master, unlocked.backing)


def test_concurrent_devices_merge_through_push(server, unlocked):
    cred = SyncCredential.generate("alice")
    a = unlocked
    sync.sync_push(_client(server, cred=cred), a)
    b = _fork(a)
    ca, cb = _client(server, cred=cred), _client(server, cred=cred)
    ca.last_version = cb.last_version = 1
    _with_records(a, 1)
    _with_records(b, 1)
    sync.sync_push(ca, a)
    sync.sync_push(cb, b)  # conflicts, merges, retries
    data, version = cb.pull_store()
    assert version == 3
    merged = cred_store.open_all(a.master, loads_store(data))
    assert {r.credential_id for r in merged} == {r.credential_id for r in a.plaintext + b.plaintext}


def test_higher_counter_wins():
    rec = CredentialRecord.generate("x.example", b"u", "u", now=0.0)
    five, seven = replace(rec, sign_counter=5), replace(rec, sign_counter=7)
    for order in ([[five], [seven]], [[seven], [five]]):
        recs, _ = sync.merge_records(order, [[], []], now=0.0)
        assert recs == [seven]


def test_tombstone_wins_over_live_record():
    rec = CredentialRecord.generate("x.example", b"u", "u", now=0.0)
    tomb = Tombstone(rec.credential_id, 10.0)
    recs, tombs = sync.merge_records([[rec], []], [[], [tomb]], now=10.0)
    assert recs == [] and tombs == [tomb]


def test_disjoint_union():
    a = [CredentialRecord.generate("a.example", b"u", "u", now=1.0)]
    b = [CredentialRecord.generate("b.example", b"u", "u", now=2.0)]
    recs, _ = sync.merge_records([a, b], [[], []], now=0.0)
    assert recs == a + b


_recs = [CredentialRecord.generate(f"p{i}.example", b"u", "u", now=float(i)) for i in range(6)]


@st.composite
def _sides(draw):
    recs = [replace(r, sign_counter=draw(st.integers(0, 5))) for r in draw(st.lists(st.sampled_from(_recs)))]
    tombs = [Tombstone(r.credential_id, draw(st.floats(0, 100))) for r in draw(st.lists(st.sampled_from(_recs), max_size=2))]
    return recs, tombs


@settings(max_examples=100, deadline=None)
@given(_sides(), _sides())
def test_merge_is_commutative_and_idempotent(a, b):
    ab = sync.merge_records([a[0], b[0]], [a[1], b[1]], now=0.0)
    ba = sync.merge_records([b[0], a[0]], [b[1], a[1]], now=0.0)
    assert ab == ba
    again = sync.merge_records([ab[0], ab[0]], [ab[1], ab[1]], now=0.0)
    assert again == ab
