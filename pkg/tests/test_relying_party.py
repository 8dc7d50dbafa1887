from __future__ import annotations

import ast
import threading
from dataclasses import replace
from pathlib import Path

import pytest
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import ec

from conftest import PIN, SEED_B, make_token
from vfa import client, soft_token
from vfa.ctap import (
    FLAG_UP,
    GetAssertionParams,
    MakeCredentialParams,
    build_authenticator_data,
    get_assertion,
    make_credential,
)
from vfa.encoding import sha256
from vfa.errors import (
    BadAttestation,
    BadSignature,
    ChallengeMismatch,
    CounterRegression,
    Expired,
    MissingRegistrationToken,
    UnknownCredential,
    UnknownToken,
)
from vfa.relying_party import RelyingParty, RpService, client_data_json, qes_message
from vfa.transport import InProcessTransport

RP = "example.com"


def _register(rp: RelyingParty, unlocked, user="alice"):
    ch = rp.begin_registration(user)
    cd = client_data_json("webauthn.create", ch.challenge, rp.origin)
    att, _ = make_credential(unlocked, MakeCredentialParams(sha256(cd), rp.rp_id, ch.user_handle, user))
    return rp.verify_registration(ch, att.to_cbor(), cd)


def _assert(rp: RelyingParty, unlocked):
    ch = rp.begin_login()
    cd = client_data_json("webauthn.get", ch.challenge, rp.origin)
    asr, _ = get_assertion(unlocked, GetAssertionParams(sha256(cd), rp.rp_id))
    return ch, asr, cd


def test_registration_and_login(unlocked, clock):
    rp = RelyingParty(RP, clock=clock)
    spk = _register(rp, unlocked)
    assert spk.last_counter == 0
    for n in (1, 2, 3):
        ch, asr, cd = _assert(rp, unlocked)
        assert rp.finish_login(ch.challenge, asr, cd).counter == n


def test_challenge_is_single_use(unlocked, clock):
    rp = RelyingParty(RP, clock=clock)
    _register(rp, unlocked)
    ch, asr, cd = _assert(rp, unlocked)
    rp.finish_login(ch.challenge, asr, cd)
    with pytest.raises(ChallengeMismatch):
        rp.finish_login(ch.challenge, asr, cd)


def test_wrong_challenge_in_client_data(unlocked, clock):
    rp = RelyingParty(RP, clock=clock)
    _register(rp, unlocked)
    ch = rp.begin_login()
    cd = client_data_json("webauthn.get", b"\x00" * 32, rp.origin)
    asr, _ = get_assertion(unlocked, GetAssertionParams(sha256(cd), RP))
    with pytest.raises(ChallengeMismatch):
        rp.finish_login(ch.challenge, asr, cd)


def test_wrong_origin_and_type(unlocked, clock):
    rp = RelyingParty(RP, clock=clock)
    ch = rp.begin_registration("a")
    cd = client_data_json("webauthn.create", ch.challenge, "https://evil.example")
    att, _ = make_credential(unlocked, MakeCredentialParams(sha256(cd), RP, b"u", "a"))
    with pytest.raises(ChallengeMismatch):
        rp.verify_registration(ch, att.to_cbor(), cd)
    ch = rp.begin_registration("a")
    cd = client_data_json("webauthn.get", ch.challenge, rp.origin)
    with pytest.raises(ChallengeMismatch):
        rp.verify_registration(ch, att.to_cbor(), cd)


def test_expired_challenge(unlocked, clock):
    rp = RelyingParty(RP, clock=clock)
    ch = rp.begin_registration("a")
    cd = client_data_json("webauthn.create", ch.challenge, rp.origin)
    att, _ = make_credential(unlocked, MakeCredentialParams(sha256(cd), RP, b"u", "a"))
    clock.advance(301)
    with pytest.raises(Expired):
        rp.verify_registration(ch, att.to_cbor(), cd)


def test_attestation_for_other_rp_rejected(unlocked, clock):
    rp = RelyingParty(RP, clock=clock)
    ch = rp.begin_registration("a")
    cd = client_data_json("webauthn.create", ch.challenge, rp.origin)
    att, _ = make_credential(unlocked, MakeCredentialParams(sha256(cd), "other.example", b"u", "a"))
    with pytest.raises(BadAttestation):
        rp.verify_registration(ch, att.to_cbor(), cd)


def test_uv_cleared_is_rejected(unlocked, clock):
    rp = RelyingParty(RP, clock=clock)
    _register(rp, unlocked)
    ch, asr, cd = _assert(rp, unlocked)
    rec = unlocked.plaintext[0]
    auth = build_authenticator_data(RP, FLAG_UP, asr.sign_counter + 1)
    sig = rec.signing_key.sign(auth + sha256(cd), ec.ECDSA(hashes.SHA256()))
    with pytest.raises(BadSignature, match="UP/UV"):
        rp.finish_login(ch.challenge, replace(asr, auth_data=auth, signature=sig), cd)


@pytest.mark.parametrize("bit", [0, 7, 100, 300, 500])
def test_one_bit_signature_corruption(unlocked, clock, bit):
    rp = RelyingParty(RP, clock=clock)
    _register(rp, unlocked)
    ch, asr, cd = _assert(rp, unlocked)
    sig = bytearray(asr.signature)
    pos = (bit // 8) % len(sig)
    sig[pos] ^= 1 << (bit % 8)
    with pytest.raises(BadSignature):
        rp.finish_login(ch.challenge, replace(asr, signature=bytes(sig)), cd)


def test_replayed_assertion_is_counter_regression(unlocked, clock):
    rp = RelyingParty(RP, clock=clock)
    spk = _register(rp, unlocked)
    _, asr, cd = _assert(rp, unlocked)
    rp.verify_assertion(spk, asr, cd)
    with pytest.raises(CounterRegression):
        rp.verify_assertion(spk, asr, cd)


def test_unknown_credential(unlocked, clock):
    rp = RelyingParty(RP, clock=clock)
    other = RelyingParty(RP, clock=clock)
    _register(other, unlocked)
    ch, asr, cd = _assert(rp, unlocked)
    with pytest.raises(UnknownCredential):
        rp.finish_login(ch.challenge, asr, cd)


def test_parallel_submissions_one_wins(unlocked, clock):
    rp = RelyingParty(RP, clock=clock)
    _register(rp, unlocked)
    ch, asr, cd = _assert(rp, unlocked)
    results = []
    barrier = threading.Barrier(8)

    def go():
        barrier.wait()
        try:
            rp.finish_login(ch.challenge, asr, cd)
            results.append("ok")
        except (ChallengeMismatch, CounterRegression) as exc:
            results.append(type(exc).__name__)

    threads = [threading.Thread(target=go) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert results.count("ok") == 1 and len(results) == 8


def test_parallel_replays_of_one_assertion(unlocked, clock):
    rp = RelyingParty(RP, clock=clock)
    spk = _register(rp, unlocked)
    _, asr, cd = _assert(rp, unlocked)
    ok = []

    def go():
        try:
            rp.verify_assertion(spk, asr, cd)
            ok.append(1)
        except CounterRegression:
            pass

    threads = [threading.Thread(target=go) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(ok) == 1


# -- QES gate ---------------------------------------------------------------------

def _qes_rp(clock, token):
    rp = RelyingParty(RP, require_qes=True, clock=clock)
    rp.trust_token_key(soft_token.token_public_key(token))
    return rp


def _prove(rp, token, session, session_id="s1"):
    challenge = rp.qes_challenge(session_id)
    sig = soft_token.sign_deterministic(token, session, sha256(qes_message(RP, challenge))).sigma
    return rp.qes_prove(session_id, challenge, soft_token.token_public_key(token), sig)


def test_qes_gate_allows_registration(token, session, unlocked, clock):
    rp = _qes_rp(clock, token)
    tok = _prove(rp, token, session)
    ch = rp.begin_registration("alice", session_id="s1", registration_token=tok.value)
    cd = client_data_json("webauthn.create", ch.challenge, rp.origin)
    att, _ = make_credential(unlocked, MakeCredentialParams(sha256(cd), RP, ch.user_handle, "alice"))
    assert rp.verify_registration(ch, att.to_cbor(), cd).credential_id == att.credential_id


def test_qes_missing_token(unlocked, clock, token):
    rp = _qes_rp(clock, token)
    with pytest.raises(MissingRegistrationToken):
        _register(rp, unlocked)


def test_qes_other_token_is_unknown(clock, token):
    rp = _qes_rp(clock, token)
    other = make_token(SEED_B)
    with pytest.raises(UnknownToken):
        _prove(rp, other, soft_token.open_session(other, PIN))


def test_qes_bad_signature(clock, token, session):
    rp = _qes_rp(clock, token)
    challenge = rp.qes_challenge("s1")
    sig = soft_token.sign_deterministic(token, session, sha256(b"something else")).sigma
    with pytest.raises(BadSignature):
        rp.qes_prove("s1", challenge, soft_token.token_public_key(token), sig)


def test_qes_token_expires_after_120s(token, session, unlocked, clock):
    rp = _qes_rp(clock, token)
    tok = _prove(rp, token, session)
    clock.advance(121)
    ch = rp.begin_registration("alice", session_id="s1", registration_token=tok.value)
    cd = client_data_json("webauthn.create", ch.challenge, rp.origin)
    att, _ = make_credential(unlocked, MakeCredentialParams(sha256(cd), RP, ch.user_handle, "alice"))
    with pytest.raises(Expired):
        rp.verify_registration(ch, att.to_cbor(), cd)


def test_qes_token_bound_to_session(token, session, unlocked, clock):
    rp = _qes_rp(clock, token)
    tok = _prove(rp, token, session, "s1")
    ch = rp.begin_registration("alice", session_id="s2", registration_token=tok.value)
    cd = client_data_json("webauthn.create", ch.challenge, rp.origin)
    att, _ = make_credential(unlocked, MakeCredentialParams(sha256(cd), RP, ch.user_handle, "alice"))
    with pytest.raises(MissingRegistrationToken):
        rp.verify_registration(ch, att.to_cbor(), cd)


# -- service + client -------------------------------------------------------------

def test_full_ceremony_over_service(authenticator, rp_client, rp_service):
    reg = client.register(authenticator, rp_client, RP, "alice")
    logins = [client.authenticate(authenticator, rp_client, RP) for _ in range(3)]
    assert [login.counter for login in logins] == [1, 2, 3]
    assert all(login.credential_id == reg.credential_id for login in logins)
    again = RpService.from_state(rp_service.to_state())
    assert again.party(RP).credentials[reg.credential_id].last_counter == 3


def test_service_qes_flow(token, session, authenticator, clock):
    svc = RpService(require_qes=True, clock=clock, trusted_tokens=[soft_token.token_public_key(token)])
    rpc = client.RpClient(InProcessTransport(svc))
    with pytest.raises(MissingRegistrationToken):
        client.register(authenticator, rpc, RP, "alice", run_qes_gate=False)
    reg = client.register(authenticator, rpc, RP, "bob", token, session)
    assert client.authenticate(authenticator, rpc, RP).credential_id in svc.party(RP).credentials
    assert reg.counter == 0


def test_relying_party_imports_no_authenticator_internals():
    src = Path(__file__).parents[1] / "src" / "vfa" / "relying_party.py"
    tree = ast.parse(src.read_text())
    imported = set()
    for node in ast.walk(tree):
        if isinstance(node, ast.ImportFrom):
            imported.add((node.module or "").split(".")[-1])
            imported.update(a.name for a in node.names)
        elif isinstance(node, ast.Import):
            imported.update(a.name.split(".")[-1] for a in node.names)
    forbidden = {"soft_token", "key_hierarchy", "cred_store", "sync", "oprf", "ctap", "device"}
    assert not imported & forbidden
