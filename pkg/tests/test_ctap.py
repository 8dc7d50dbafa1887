from __future__ import annotations

import io
import json
import os

import cbor2
import pytest
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import ec

import oracles
from vfa import cred_store
from vfa.ctap import (
    FLAG_AT,
    FLAG_UP,
    FLAG_UV,
    Authenticator,
    AuthenticatorData,
    GetAssertionParams,
    MakeCredentialParams,
    cose_es256_key,
    get_assertion,
    make_credential,
)
from vfa.encoding import b64url
from vfa.errors import CredentialExcluded, InvalidParameter, NoCredentials, NotUnlocked

CDH = bytes(32)


def _mc(rp="example.com", **kw):
    return MakeCredentialParams(CDH, rp, b"user-1", "alice", **kw)


def _verify(cose: bytes, sig: bytes, msg: bytes):
    key = cbor2.loads(cose)
    point = b"\x04" + key[-2] + key[-3]
    pub = ec.EllipticCurvePublicKey.from_encoded_point(ec.SECP256R1(), point)
    pub.verify(sig, msg, ec.ECDSA(hashes.SHA256()))


def test_make_credential_layout_matches_hand_built_bytes(unlocked):
    att, store = make_credential(unlocked, _mc())
    rec = unlocked.plaintext[0]
    expected = oracles.authenticator_data(
        "example.com", FLAG_UP | FLAG_UV | FLAG_AT, 0, rec.credential_id, cose_es256_key(rec.public_key)
    )
    assert att.auth_data == expected
    assert att.fmt == "packed" and att.alg == -7
    _verify(cose_es256_key(rec.public_key), att.sig, att.auth_data + CDH)
    assert store is unlocked.backing and len(store.records) == 1


def test_cose_key_fields(unlocked):
    make_credential(unlocked, _mc())
    key = cbor2.loads(cose_es256_key(unlocked.plaintext[0].public_key))
    assert key[1] == 2 and key[3] == -7 and key[-1] == 1
    assert len(key[-2]) == 32 and len(key[-3]) == 32


def test_assertion_counter_increments_and_is_persisted_first(unlocked):
    make_credential(unlocked, _mc())
    seen = []

    def persist(store):
        # The record on disk already carries the new counter when signing happens.
        seen.append(cred_store.open_all(unlocked.master, store)[0].sign_counter)

    counters = []
    for _ in range(3):
        asr, _ = get_assertion(unlocked, GetAssertionParams(CDH, "example.com"), persist=persist)
        counters.append(asr.sign_counter)
        assert asr.auth_data == oracles.authenticator_data("example.com", FLAG_UP | FLAG_UV, asr.sign_counter)
        _verify(cose_es256_key(unlocked.plaintext[0].public_key), asr.signature, asr.auth_data + CDH)
    assert counters == [1, 2, 3] == seen


def test_failed_persist_does_not_sign(unlocked):
    make_credential(unlocked, _mc())

    def broken(store):
        raise OSError("disk full")

    with pytest.raises(OSError):
        get_assertion(unlocked, GetAssertionParams(CDH, "example.com"), persist=broken)
    assert unlocked.plaintext[0].sign_counter == 0


def test_exclusion_list(unlocked):
    att, _ = make_credential(unlocked, _mc())
    with pytest.raises(CredentialExcluded):
        make_credential(unlocked, _mc(exclude_list=(att.credential_id,)))
    # The same id at a different RP does not exclude.
    make_credential(unlocked, _mc(rp="other.example", exclude_list=(att.credential_id,)))


def test_no_credentials_and_allow_list(unlocked):
    with pytest.raises(NoCredentials):
        get_assertion(unlocked, GetAssertionParams(CDH, "example.com"))
    a, _ = make_credential(unlocked, _mc())
    b, _ = make_credential(unlocked, _mc())
    asr, _ = get_assertion(unlocked, GetAssertionParams(CDH, "example.com", allow_list=(a.credential_id,)))
    assert asr.credential_id == a.credential_id
    asr, _ = get_assertion(unlocked, GetAssertionParams(CDH, "example.com"))
    assert asr.credential_id == b.credential_id
    with pytest.raises(NoCredentials):
        get_assertion(unlocked, GetAssertionParams(CDH, "example.com", allow_list=(os.urandom(16),)))


def test_locked_authenticator_refuses():
    with pytest.raises(NotUnlocked):
        make_credential(None, _mc())
    auth = Authenticator()
    assert auth.locked
    with pytest.raises(NotUnlocked):
        auth.get_assertion(GetAssertionParams(CDH, "example.com"))


def test_bad_parameters():
    with pytest.raises(InvalidParameter):
        MakeCredentialParams(b"short", "example.com", b"", "")
    with pytest.raises(InvalidParameter):
        GetAssertionParams(b"short", "example.com")


def test_authenticator_data_parse_round_trip(unlocked):
    att, _ = make_credential(unlocked, _mc())
    parsed = AuthenticatorData.parse(att.auth_data)
    assert parsed.to_bytes() == att.auth_data
    assert parsed.attested_credential.credential_id == att.credential_id


def test_json_interface(authenticator):
    out = authenticator.handle_json(
        {"op": "makeCredential", "clientDataHash": b64url(CDH), "rpId": "example.com", "userName": "a"}
    )
    assert out["status"] == "ok"
    out = authenticator.handle_json({"op": "getAssertion", "clientDataHash": b64url(CDH), "rpId": "example.com"})
    assert out["status"] == "ok"
    bad = authenticator.handle_json({"op": "getAssertion", "clientDataHash": b64url(CDH), "rpId": "none.example"})
    assert bad == {"status": "error", "error": "NoCredentials", "message": bad["message"]}
    assert authenticator.handle_json({"op": "nope"})["error"] == "InvalidParameter"
    assert authenticator.handle_json({"op": "lock"})["status"] == "ok"
    assert authenticator.locked


def test_serve_stdio(authenticator):
    lines = [
        json.dumps({"op": "makeCredential", "clientDataHash": b64url(CDH), "rpId": "example.com"}),
        "not json",
        "",
        json.dumps({"op": "getAssertion", "clientDataHash": b64url(CDH), "rpId": "example.com"}),
    ]
    out = io.StringIO()
    assert authenticator.serve_stdio(io.StringIO("\n".join(lines)), out) == 3
    replies = [json.loads(line) for line in out.getvalue().splitlines()]
    assert [r["status"] for r in replies] == ["ok", "error", "ok"]
