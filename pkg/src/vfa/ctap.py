"""Authenticator-side MakeCredential / GetAssertion over an in-process interface.

Byte layouts follow WebAuthn: authenticator data is
``rpIdHash(32) || flags(1) || signCount(4, BE) || [attestedCredentialData]``,
attestation uses the ``packed`` format with self attestation (ES256).
"""

from __future__ import annotations

import io
import json
import os
import struct
import sys
import threading
from dataclasses import dataclass, replace
from typing import Callable

import cbor2
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import ec

from . import cred_store
from .cred_store import CredentialRecord, EncryptedStore, UnlockedStore
from .encoding import b64url, cbor_dumps, cbor_loads, sha256, unb64url
from .errors import (
    CredentialExcluded,
    InvalidParameter,
    NoCredentials,
    NotUnlocked,
    VfaError,
)

FLAG_UP = 0x01
FLAG_UV = 0x04
FLAG_AT = 0x40
FLAG_ED = 0x80
AAGUID = bytes(16)
COSE_ALG_ES256 = -7

Persist = Callable[[EncryptedStore], None]


def cose_es256_key(public_point: bytes) -> bytes:
    """COSE_Key (EC2, P-256, ES256) for an uncompressed SEC1 point."""
    if len(public_point) != 65 or public_point[0] != 0x04:
        raise InvalidParameter("expected an uncompressed P-256 point")
    return cbor_dumps({1: 2, 3: COSE_ALG_ES256, -1: 1, -2: public_point[1:33], -3: public_point[33:]})


@dataclass(frozen=True)
class AttestedCredentialData:
    aaguid: bytes
    credential_id: bytes
    public_key: bytes  # COSE_Key bytes

    def to_bytes(self) -> bytes:
        return self.aaguid + struct.pack(">H", len(self.credential_id)) + self.credential_id + self.public_key

    @classmethod
    def unpack_from(cls, data: bytes) -> tuple["AttestedCredentialData", bytes]:
        if len(data) < 18:
            raise InvalidParameter("attested credential data too short")
        (c_len,) = struct.unpack(">H", data[16:18])
        cred_id = data[18 : 18 + c_len]
        if len(cred_id) != c_len:
            raise InvalidParameter("truncated credential id")
        fp = io.BytesIO(data[18 + c_len :])
        cbor2.CBORDecoder(fp).decode()
        end = 18 + c_len + fp.tell()
        return cls(data[:16], cred_id, data[18 + c_len : end]), data[end:]


@dataclass(frozen=True)
class AuthenticatorData:
    rp_id_hash: bytes
    flags: int
    sign_counter: int
    attested_credential: AttestedCredentialData | None = None

    def __post_init__(self):
        if len(self.rp_id_hash) != 32:
            raise InvalidParameter("rp_id_hash must be 32 bytes")
        if not 0 <= self.flags <= 0xFF:
            raise InvalidParameter("flags must fit in one byte")
        if not 0 <= self.sign_counter <= 0xFFFFFFFF:
            raise InvalidParameter("counter outside u32 range")
        if bool(self.flags & FLAG_AT) != (self.attested_credential is not None):
            raise InvalidParameter("AT flag must be set iff attested credential data is present")

    def to_bytes(self) -> bytes:
        out = self.rp_id_hash + bytes([self.flags]) + struct.pack(">I", self.sign_counter)
        if self.attested_credential is not None:
            out += self.attested_credential.to_bytes()
        return out

    @classmethod
    def parse(cls, data: bytes) -> "AuthenticatorData":
        if len(data) < 37:
            raise InvalidParameter("authenticator data shorter than 37 bytes")
        flags = data[32]
        (counter,) = struct.unpack(">I", data[33:37])
        attested = None
        rest = data[37:]
        if flags & FLAG_AT:
            attested, rest = AttestedCredentialData.unpack_from(rest)
        if rest and not flags & FLAG_ED:
            raise InvalidParameter("trailing bytes in authenticator data")
        return cls(data[:32], flags, counter, attested)


def build_authenticator_data(
    rp_id: str, flags: int, counter: int, attested: AttestedCredentialData | None = None
) -> bytes:
    return AuthenticatorData(sha256(rp_id.encode("ascii")), flags, counter, attested).to_bytes()


@dataclass(frozen=True)
class MakeCredentialParams:
    client_data_hash: bytes
    rp_id: str
    user_handle: bytes
    user_name: str
    require_uv: bool = True
    exclude_list: tuple[bytes, ...] = ()

    def __post_init__(self):
        if len(self.client_data_hash) != 32:
            raise InvalidParameter("client_data_hash must be 32 bytes")


@dataclass(frozen=True)
class GetAssertionParams:
    client_data_hash: bytes
    rp_id: str
    allow_list: tuple[bytes, ...] | None = None

    def __post_init__(self):
        if len(self.client_data_hash) != 32:
            raise InvalidParameter("client_data_hash must be 32 bytes")


@dataclass(frozen=True)
class AttestationObject:
    auth_data: bytes
    sig: bytes
    fmt: str = "packed"
    alg: int = COSE_ALG_ES256

    @property
    def att_stmt(self) -> dict:
        return {"alg": self.alg, "sig": self.sig}

    def to_cbor(self) -> bytes:
        return cbor_dumps({"fmt": self.fmt, "attStmt": self.att_stmt, "authData": self.auth_data})

    @classmethod
    def from_cbor(cls, data: bytes) -> "AttestationObject":
        obj = cbor_loads(data)
        stmt = obj["attStmt"]
        return cls(auth_data=obj["authData"], sig=stmt["sig"], fmt=obj["fmt"], alg=stmt["alg"])

    @property
    def credential_id(self) -> bytes:
        return AuthenticatorData.parse(self.auth_data).attested_credential.credential_id


@dataclass(frozen=True)
class AssertionResponse:
    credential_id: bytes
    auth_data: bytes
    signature: bytes
    user_handle: bytes

    @property
    def sign_counter(self) -> int:
        return struct.unpack(">I", self.auth_data[33:37])[0]


def _es256(key: ec.EllipticCurvePrivateKey, message: bytes) -> bytes:
    return key.sign(message, ec.ECDSA(hashes.SHA256()))


def _require_unlocked(unlocked) -> UnlockedStore:
    if not isinstance(unlocked, UnlockedStore):
        raise NotUnlocked("authenticator is locked")
    return unlocked


def make_credential(
    unlocked: UnlockedStore | None,
    params: MakeCredentialParams,
    rng=os.urandom,
    now: float | None = None,
    persist: Persist | None = None,
) -> tuple[AttestationObject, EncryptedStore]:
    """Create, seal and attest a fresh ES256 credential.

    ``unlocked`` is updated in place once the new store has been persisted.
    """
    unlocked = _require_unlocked(unlocked)
    rp_id = cred_store.canonical_rp_id(params.rp_id)
    excluded = set(params.exclude_list)
    for rec in unlocked.plaintext:
        if rec.rp_id == rp_id and rec.credential_id in excluded:
            raise CredentialExcluded(f"credential already registered at {rp_id}")
    rec = CredentialRecord.generate(rp_id, params.user_handle, params.user_name, rng=rng, now=now)
    store = cred_store.seal_credential(unlocked.master, rec, unlocked.backing)
    if persist is not None:
        persist(store)
    unlocked.plaintext.append(rec)
    unlocked.backing = store

    attested = AttestedCredentialData(AAGUID, rec.credential_id, cose_es256_key(rec.public_key))
    auth_data = build_authenticator_data(rp_id, FLAG_UP | FLAG_UV | FLAG_AT, rec.sign_counter, attested)
    sig = _es256(rec.signing_key, auth_data + params.client_data_hash)
    return AttestationObject(auth_data=auth_data, sig=sig), store


def _select(unlocked: UnlockedStore, rp_id: str, allow_list) -> int:
    allowed = None if allow_list is None else set(allow_list)
    best = None
    for i, rec in enumerate(unlocked.plaintext):
        if rec.rp_id != rp_id or (allowed is not None and rec.credential_id not in allowed):
            continue
        # Most recently created wins; later index breaks ties.
        if best is None or rec.created_at >= unlocked.plaintext[best].created_at:
            best = i
    if best is None:
        raise NoCredentials(f"no credential for {rp_id}")
    return best


def get_assertion(
    unlocked: UnlockedStore | None,
    params: GetAssertionParams,
    persist: Persist | None = None,
) -> tuple[AssertionResponse, EncryptedStore]:
    """Sign an assertion; the incremented counter is persisted before signing."""
    unlocked = _require_unlocked(unlocked)
    rp_id = cred_store.canonical_rp_id(params.rp_id)
    index = _select(unlocked, rp_id, params.allow_list)
    rec = unlocked.plaintext[index]
    if rec.sign_counter >= 0xFFFFFFFF:
        raise InvalidParameter("signature counter exhausted")
    updated = replace(rec, sign_counter=rec.sign_counter + 1)
    store = cred_store.replace_record(unlocked.master, unlocked.backing, index, updated)
    if persist is not None:
        persist(store)
    unlocked.plaintext[index] = updated
    unlocked.backing = store

    auth_data = build_authenticator_data(rp_id, FLAG_UP | FLAG_UV, updated.sign_counter)
    sig = _es256(updated.signing_key, auth_data + params.client_data_hash)
    return AssertionResponse(updated.credential_id, auth_data, sig, updated.user_handle), store


class Authenticator:
    """A single logical authenticator; requests are processed one at a time."""

    def __init__(self, unlocked: UnlockedStore | None = None, persist: Persist | None = None):
        self._unlocked = unlocked
        self._persist = persist
        self._lock = threading.Lock()

    @property
    def locked(self) -> bool:
        return self._unlocked is None

    @property
    def unlocked(self) -> UnlockedStore | None:
        return self._unlocked

    def unlock_with(self, unlocked: UnlockedStore) -> None:
        self._unlocked = unlocked

    def lock(self) -> None:
        self._unlocked = None

    def make_credential(self, params: MakeCredentialParams, rng=os.urandom) -> AttestationObject:
        with self._lock:
            att, _ = make_credential(self._unlocked, params, rng=rng, persist=self._persist)
            return att

    def get_assertion(self, params: GetAssertionParams) -> AssertionResponse:
        with self._lock:
            asr, _ = get_assertion(self._unlocked, params, persist=self._persist)
            return asr

    def handle_json(self, request: dict) -> dict:
        """One request of the newline-delimited JSON interface."""
        try:
            op = request.get("op")
            if op == "makeCredential":
                att = self.make_credential(
                    MakeCredentialParams(
                        client_data_hash=unb64url(request["clientDataHash"]),
                        rp_id=request["rpId"],
                        user_handle=unb64url(request.get("userHandle", "")),
                        user_name=request.get("userName", ""),
                        require_uv=bool(request.get("requireUv", True)),
                        exclude_list=tuple(unb64url(c) for c in request.get("excludeList", [])),
                    )
                )
                return {
                    "status": "ok",
                    "credentialId": b64url(att.credential_id),
                    "attestationObject": b64url(att.to_cbor()),
                }
            if op == "getAssertion":
                allow = request.get("allowList")
                asr = self.get_assertion(
                    GetAssertionParams(
                        client_data_hash=unb64url(request["clientDataHash"]),
                        rp_id=request["rpId"],
                        allow_list=None if allow is None else tuple(unb64url(c) for c in allow),
                    )
                )
                return {
                    "status": "ok",
                    "credentialId": b64url(asr.credential_id),
                    "authenticatorData": b64url(asr.auth_data),
                    "signature": b64url(asr.signature),
                    "userHandle": b64url(asr.user_handle),
                }
            if op == "lock":
                self.lock()
                return {"status": "ok"}
            return {"status": "error", "error": "InvalidParameter", "message": f"unknown op {op!r}"}
        except VfaError as exc:
            return {"status": "error", "error": type(exc).__name__, "message": str(exc)}
        except (KeyError, ValueError, TypeError) as exc:
            return {"status": "error", "error": "InvalidParameter", "message": str(exc)}

    def serve_stdio(self, infile=None, outfile=None) -> int:
        infile = infile or sys.stdin
        outfile = outfile or sys.stdout
        handled = 0
        for line in infile:
            line = line.strip()
            if not line:
                continue
            try:
                request = json.loads(line)
            except json.JSONDecodeError as exc:
                response = {"status": "error", "error": "InvalidParameter", "message": str(exc)}
            else:
                response = self.handle_json(request)
            outfile.write(json.dumps(response, sort_keys=True) + "\n")
            outfile.flush()
            handled += 1
        return handled
