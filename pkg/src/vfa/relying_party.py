"""A plain WebAuthn relying party used to verify the authenticator end to end.

This module only knows public keys, credential IDs, and standard WebAuthn
byte formats. It does not import the token, key, store, sync or OPRF code;
the optional QES enrollment gate verifies an RSA signature against a list
of trusted token public keys and nothing more.
"""

from __future__ import annotations

import hashlib
import io
import json
import secrets
import struct
import threading
from dataclasses import dataclass, field

import cbor2
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec, padding, rsa

from .clock import system_clock
from .encoding import b64url, lp16, unb64url
from .errors import (
    BadAttestation,
    BadSignature,
    ChallengeMismatch,
    CounterRegression,
    Expired,
    InvalidParameter,
    MissingRegistrationToken,
    UnknownCredential,
    UnknownToken,
    VfaError,
)
from .transport import Response, error_response, json_response

QES_DOMAIN = b"VFA-QES-ENROLL/v1"
REGISTRATION_TOKEN_TTL = 120.0
CHALLENGE_TTL = 300.0

_UP, _UV, _AT, _ED = 0x01, 0x04, 0x40, 0x80


def _sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def qes_message(rp_id: str, challenge: bytes) -> bytes:
    """What the token signs during the enrollment gate (domain separated)."""
    return QES_DOMAIN + lp16(rp_id.encode("ascii")) + challenge


def token_key_id(public_key_der: bytes) -> bytes:
    return _sha256(public_key_der)[:16]


def client_data_json(type_: str, challenge: bytes, origin: str) -> bytes:
    """Serialize CollectedClientData the way a browser would."""
    return json.dumps(
        {"type": type_, "challenge": b64url(challenge), "origin": origin, "crossOrigin": False},
        separators=(",", ":"),
    ).encode("utf-8")


@dataclass(frozen=True)
class RegistrationChallenge:
    challenge: bytes
    rp_id: str
    expires_at: float
    registration_token: bytes | None = None
    session_id: str | None = None
    user_handle: bytes = b""
    user_name: str = ""


@dataclass(frozen=True)
class LoginChallenge:
    challenge: bytes
    rp_id: str
    expires_at: float
    allow_credentials: tuple[bytes, ...] = ()


@dataclass(frozen=True)
class RegistrationToken:
    value: bytes
    session_id: str
    expires_at: float


@dataclass
class StoredPublicKey:
    credential_id: bytes
    rp_id: str
    cose_public_key: bytes
    last_counter: int
    user_handle: bytes = b""
    user_name: str = ""
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)


@dataclass(frozen=True)
class AcceptedLogin:
    credential_id: bytes
    counter: int
    user_handle: bytes


@dataclass(frozen=True)
class _ParsedAuthData:
    rp_id_hash: bytes
    flags: int
    counter: int
    credential_id: bytes | None
    cose_key: bytes | None


def parse_authenticator_data(data: bytes) -> _ParsedAuthData:
    if len(data) < 37:
        raise InvalidParameter("authenticator data too short")
    flags = data[32]
    (counter,) = struct.unpack(">I", data[33:37])
    cred_id = cose = None
    rest = data[37:]
    if flags & _AT:
        if len(rest) < 18:
            raise InvalidParameter("attested credential data too short")
        (n,) = struct.unpack(">H", rest[16:18])
        cred_id = rest[18 : 18 + n]
        if len(cred_id) != n:
            raise InvalidParameter("truncated credential id")
        fp = io.BytesIO(rest[18 + n :])
        cbor2.CBORDecoder(fp).decode()
        cose = rest[18 + n : 18 + n + fp.tell()]
        rest = rest[18 + n + fp.tell() :]
    if rest and not flags & _ED:
        raise InvalidParameter("trailing bytes in authenticator data")
    return _ParsedAuthData(data[:32], flags, counter, cred_id, cose)


def es256_public_key(cose_key: bytes) -> ec.EllipticCurvePublicKey:
    key = cbor2.loads(cose_key)
    if key.get(1) != 2 or key.get(3) != -7 or key.get(-1) != 1:
        raise InvalidParameter("only EC2 / P-256 / ES256 COSE keys are accepted")
    x_coord, y_coord = key.get(-2), key.get(-3)
    if not (isinstance(x_coord, bytes) and isinstance(y_coord, bytes) and len(x_coord) == len(y_coord) == 32):
        raise InvalidParameter("bad EC2 coordinates")
    return ec.EllipticCurvePublicNumbers(
        int.from_bytes(x_coord, "big"), int.from_bytes(y_coord, "big"), ec.SECP256R1()
    ).public_key()


def _parse_client_data(client_data: bytes, expected_type: str, origin: str | None) -> dict:
    try:
        obj = json.loads(client_data.decode("utf-8"))
        challenge = unb64url(obj["challenge"])
    except Exception as exc:
        raise ChallengeMismatch(f"unparseable client data: {exc}") from exc
    if obj.get("type") != expected_type:
        raise ChallengeMismatch(f"client data type is not {expected_type}")
    if origin is not None and obj.get("origin") != origin:
        raise ChallengeMismatch("origin mismatch")
    obj["challenge"] = challenge
    return obj


class RelyingParty:
    """One RP ID with its registered credentials and policy."""

    def __init__(
        self,
        rp_id: str,
        origin: str | None = None,
        require_uv: bool = True,
        require_qes: bool = False,
        clock=system_clock,
        challenge_ttl: float = CHALLENGE_TTL,
        registration_token_ttl: float = REGISTRATION_TOKEN_TTL,
    ):
        self.rp_id = rp_id
        self.origin = origin if origin is not None else f"https://{rp_id}"
        self.require_uv = require_uv
        self.require_qes = require_qes
        self.clock = clock
        self.challenge_ttl = challenge_ttl
        self.registration_token_ttl = registration_token_ttl
        self.credentials: dict[bytes, StoredPublicKey] = {}
        self.trusted_tokens: dict[bytes, bytes] = {}
        self._pending: dict[bytes, RegistrationChallenge | LoginChallenge] = {}
        self._qes_challenges: dict[bytes, tuple[str, float]] = {}
        self._registration_tokens: dict[bytes, RegistrationToken] = {}
        self._lock = threading.Lock()

    # -- challenges ----------------------------------------------------------

    def _consume(self, challenge: bytes, kind: type):
        with self._lock:
            pending = self._pending.pop(challenge, None)
        if not isinstance(pending, kind):
            raise ChallengeMismatch("unknown or already used challenge")
        if self.clock() > pending.expires_at:
            raise Expired("challenge expired")
        return pending

    def begin_registration(
        self,
        user_name: str,
        user_handle: bytes | None = None,
        session_id: str | None = None,
        registration_token: bytes | None = None,
    ) -> RegistrationChallenge:
        ch = RegistrationChallenge(
            challenge=secrets.token_bytes(32),
            rp_id=self.rp_id,
            expires_at=self.clock() + self.challenge_ttl,
            registration_token=registration_token,
            session_id=session_id,
            user_handle=secrets.token_bytes(16) if user_handle is None else user_handle,
            user_name=user_name,
        )
        with self._lock:
            self._pending[ch.challenge] = ch
        return ch

    def begin_login(self) -> LoginChallenge:
        with self._lock:
            allow = tuple(c for c in self.credentials)
        ch = LoginChallenge(secrets.token_bytes(32), self.rp_id, self.clock() + self.challenge_ttl, allow)
        with self._lock:
            self._pending[ch.challenge] = ch
        return ch

    # -- QES enrollment gate ---------------------------------------------------

    def trust_token_key(self, public_key_der: bytes) -> bytes:
        kid = token_key_id(public_key_der)
        with self._lock:
            self.trusted_tokens[kid] = public_key_der
        return kid

    def qes_challenge(self, session_id: str) -> bytes:
        challenge = secrets.token_bytes(32)
        with self._lock:
            self._qes_challenges[challenge] = (session_id, self.clock() + self.challenge_ttl)
        return challenge

    def qes_prove(
        self, session_id: str, challenge: bytes, public_key_der: bytes, signature: bytes
    ) -> RegistrationToken:
        with self._lock:
            entry = self._qes_challenges.pop(challenge, None)
            trusted = self.trusted_tokens.get(token_key_id(public_key_der))
        if entry is None or entry[0] != session_id:
            raise ChallengeMismatch("unknown QES challenge for this session")
        if self.clock() > entry[1]:
            raise Expired("QES challenge expired")
        if trusted is None:
            raise UnknownToken("token public key is not enrolled")
        key = serialization.load_der_public_key(trusted)
        if not isinstance(key, rsa.RSAPublicKey):
            raise UnknownToken("enrolled token key is not RSA")
        try:
            key.verify(signature, qes_message(self.rp_id, challenge), padding.PKCS1v15(), hashes.SHA256())
        except InvalidSignature as exc:
            raise BadSignature("QES signature does not verify") from exc
        tok = RegistrationToken(secrets.token_bytes(32), session_id, self.clock() + self.registration_token_ttl)
        with self._lock:
            self._registration_tokens[tok.value] = tok
        return tok

    def _check_registration_token(self, ch: RegistrationChallenge) -> None:
        if ch.registration_token is None:
            raise MissingRegistrationToken("this RP requires a QES registration token")
        with self._lock:
            tok = self._registration_tokens.pop(ch.registration_token, None)
        if tok is None or tok.session_id != ch.session_id:
            raise MissingRegistrationToken("registration token unknown, used, or bound to another session")
        if self.clock() > tok.expires_at:
            raise Expired("registration token expired")

    # -- ceremonies -----------------------------------------------------------

    def verify_registration(
        self, challenge: RegistrationChallenge | bytes, attestation_object: bytes, client_data: bytes
    ) -> StoredPublicKey:
        key = challenge.challenge if isinstance(challenge, RegistrationChallenge) else challenge
        ch = self._consume(key, RegistrationChallenge)
        cd = _parse_client_data(client_data, "webauthn.create", self.origin)
        if cd["challenge"] != ch.challenge:
            raise ChallengeMismatch("client data carries a different challenge")
        if self.require_qes:
            self._check_registration_token(ch)
        try:
            att = cbor2.loads(attestation_object)
            fmt, stmt, auth_data = att["fmt"], att["attStmt"], att["authData"]
            parsed = parse_authenticator_data(auth_data)
        except Exception as exc:
            raise BadAttestation(f"malformed attestation object: {exc}") from exc
        if fmt != "packed":
            raise BadAttestation(f"unsupported attestation format {fmt!r}")
        if parsed.rp_id_hash != _sha256(self.rp_id.encode("ascii")):
            raise BadAttestation("rpIdHash does not match this RP")
        if not parsed.flags & _UP:
            raise BadAttestation("user presence flag not set")
        if self.require_uv and not parsed.flags & _UV:
            raise BadAttestation("user verification required but UV flag not set")
        if parsed.credential_id is None:
            raise BadAttestation("no attested credential data")
        if "x5c" in stmt or stmt.get("alg") != -7:
            raise BadAttestation("only ES256 self attestation is accepted")
        try:
            pub = es256_public_key(parsed.cose_key)
        except Exception as exc:
            raise BadAttestation(f"bad credential public key: {exc}") from exc
        try:
            pub.verify(stmt["sig"], auth_data + _sha256(client_data), ec.ECDSA(hashes.SHA256()))
        except (InvalidSignature, KeyError, TypeError) as exc:
            raise BadAttestation("attestation signature does not verify") from exc
        spk = StoredPublicKey(
            credential_id=parsed.credential_id,
            rp_id=self.rp_id,
            cose_public_key=parsed.cose_key,
            last_counter=parsed.counter,
            user_handle=ch.user_handle,
            user_name=ch.user_name,
        )
        with self._lock:
            if spk.credential_id in self.credentials:
                raise BadAttestation("credential id already registered")
            self.credentials[spk.credential_id] = spk
        return spk

    def verify_assertion(
        self, spk: StoredPublicKey, asr, client_data: bytes, challenge: bytes | None = None
    ) -> AcceptedLogin:
        """Check an assertion (any object with credential_id/auth_data/signature)."""
        if asr.credential_id != spk.credential_id:
            raise UnknownCredential("assertion is for a different credential")
        cd = _parse_client_data(client_data, "webauthn.get", self.origin)
        if challenge is not None and cd["challenge"] != challenge:
            raise ChallengeMismatch("client data carries a different challenge")
        try:
            parsed = parse_authenticator_data(asr.auth_data)
        except InvalidParameter as exc:
            raise BadSignature(f"malformed authenticator data: {exc}") from exc
        if parsed.rp_id_hash != _sha256(spk.rp_id.encode("ascii")):
            raise BadSignature("rpIdHash does not match")
        if not parsed.flags & _UP or (self.require_uv and not parsed.flags & _UV):
            raise BadSignature("required UP/UV flags missing")
        try:
            es256_public_key(spk.cose_public_key).verify(
                asr.signature, asr.auth_data + _sha256(client_data), ec.ECDSA(hashes.SHA256())
            )
        except InvalidSignature as exc:
            raise BadSignature("assertion signature does not verify") from exc
        with spk._lock:
            if parsed.counter <= spk.last_counter:
                raise CounterRegression(
                    f"counter {parsed.counter} not above {spk.last_counter}; possible cloned authenticator"
                )
            spk.last_counter = parsed.counter
        return AcceptedLogin(spk.credential_id, parsed.counter, getattr(asr, "user_handle", b""))

    def finish_login(self, challenge: bytes, asr, client_data: bytes) -> AcceptedLogin:
        self._consume(challenge, LoginChallenge)
        with self._lock:
            spk = self.credentials.get(asr.credential_id)
        if spk is None:
            raise UnknownCredential("credential is not registered here")
        return self.verify_assertion(spk, asr, client_data, challenge=challenge)

    # -- persistence -----------------------------------------------------------

    def to_state(self) -> dict:
        return {
            "rp_id": self.rp_id,
            "origin": self.origin,
            "require_uv": self.require_uv,
            "require_qes": self.require_qes,
            "trusted_tokens": [b64url(v) for v in self.trusted_tokens.values()],
            "credentials": [
                {
                    "credential_id": b64url(c.credential_id),
                    "cose_public_key": b64url(c.cose_public_key),
                    "last_counter": c.last_counter,
                    "user_handle": b64url(c.user_handle),
                    "user_name": c.user_name,
                }
                for c in self.credentials.values()
            ],
        }

    @classmethod
    def from_state(cls, state: dict, clock=system_clock) -> "RelyingParty":
        rp = cls(
            state["rp_id"],
            origin=state.get("origin"),
            require_uv=state.get("require_uv", True),
            require_qes=state.get("require_qes", False),
            clock=clock,
        )
        for der in state.get("trusted_tokens", []):
            rp.trust_token_key(unb64url(der))
        for c in state.get("credentials", []):
            cid = unb64url(c["credential_id"])
            rp.credentials[cid] = StoredPublicKey(
                credential_id=cid,
                rp_id=rp.rp_id,
                cose_public_key=unb64url(c["cose_public_key"]),
                last_counter=int(c["last_counter"]),
                user_handle=unb64url(c.get("user_handle", "")),
                user_name=c.get("user_name", ""),
            )
        return rp


@dataclass(frozen=True)
class _Assertion:
    credential_id: bytes
    auth_data: bytes
    signature: bytes
    user_handle: bytes = b""


class RpService:
    """HTTP-shaped front end hosting several relying parties by RP ID.

    Routes (JSON bodies, byte fields base64url): ``POST /register/begin``,
    ``/register/finish``, ``/login/begin``, ``/login/finish``,
    ``/qes/challenge``, ``/qes/prove``.
    """

    def __init__(self, require_qes: bool = False, clock=system_clock, trusted_tokens=()):
        self.default_require_qes = require_qes
        self.clock = clock
        self.parties: dict[str, RelyingParty] = {}
        self._trusted = list(trusted_tokens)
        self._lock = threading.Lock()

    def party(self, rp_id: str) -> RelyingParty:
        rp_id = rp_id.lower()
        with self._lock:
            rp = self.parties.get(rp_id)
            if rp is None:
                rp = RelyingParty(rp_id, require_qes=self.default_require_qes, clock=self.clock)
                for der in self._trusted:
                    rp.trust_token_key(der)
                self.parties[rp_id] = rp
            return rp

    def trust_token_key(self, public_key_der: bytes) -> None:
        with self._lock:
            if public_key_der not in self._trusted:
                self._trusted.append(public_key_der)
            parties = list(self.parties.values())
        for rp in parties:
            rp.trust_token_key(public_key_der)

    def handle(self, method: str, path: str, headers: dict, body: bytes) -> Response:
        if method != "POST":
            return json_response(405, {"error": "MethodNotAllowed", "message": method})
        try:
            req = json.loads(body.decode("utf-8") or "{}")
            rp = self.party(req["rp_id"])
        except (ValueError, KeyError) as exc:
            return error_response(InvalidParameter(f"bad request: {exc}"))
        try:
            route = {
                "/register/begin": self._register_begin,
                "/register/finish": self._register_finish,
                "/login/begin": self._login_begin,
                "/login/finish": self._login_finish,
                "/qes/challenge": self._qes_challenge,
                "/qes/prove": self._qes_prove,
            }.get(path)
            if route is None:
                return json_response(404, {"error": "NotFound", "message": path})
            return json_response(200, route(rp, req))
        except VfaError as exc:
            return error_response(exc)
        except (KeyError, ValueError, TypeError) as exc:
            return error_response(InvalidParameter(f"bad request: {exc}"))

    @staticmethod
    def _opt_bytes(req, key):
        v = req.get(key)
        return None if v is None else unb64url(v)

    def _register_begin(self, rp: RelyingParty, req: dict) -> dict:
        ch = rp.begin_registration(
            user_name=req.get("user_name", ""),
            user_handle=self._opt_bytes(req, "user_handle"),
            session_id=req.get("session_id"),
            registration_token=self._opt_bytes(req, "registration_token"),
        )
        return {
            "challenge": b64url(ch.challenge),
            "rp_id": ch.rp_id,
            "origin": rp.origin,
            "user_handle": b64url(ch.user_handle),
            "expires_at": ch.expires_at,
            "exclude_credentials": [
                b64url(c.credential_id) for c in rp.credentials.values() if c.user_name == ch.user_name
            ],
            "require_qes": rp.require_qes,
            "require_uv": rp.require_uv,
        }

    def _register_finish(self, rp: RelyingParty, req: dict) -> dict:
        spk = rp.verify_registration(
            unb64url(req["challenge"]), unb64url(req["attestation_object"]), unb64url(req["client_data"])
        )
        return {"credential_id": b64url(spk.credential_id), "counter": spk.last_counter}

    def _login_begin(self, rp: RelyingParty, req: dict) -> dict:
        ch = rp.begin_login()
        return {
            "challenge": b64url(ch.challenge),
            "rp_id": ch.rp_id,
            "origin": rp.origin,
            "allow_credentials": [b64url(c) for c in ch.allow_credentials],
        }

    def _login_finish(self, rp: RelyingParty, req: dict) -> dict:
        asr = _Assertion(
            unb64url(req["credential_id"]),
            unb64url(req["auth_data"]),
            unb64url(req["signature"]),
            unb64url(req.get("user_handle", "")),
        )
        ok = rp.finish_login(unb64url(req["challenge"]), asr, unb64url(req["client_data"]))
        return {"accepted": True, "credential_id": b64url(ok.credential_id), "counter": ok.counter}

    def _qes_challenge(self, rp: RelyingParty, req: dict) -> dict:
        return {"challenge": b64url(rp.qes_challenge(req["session_id"]))}

    def _qes_prove(self, rp: RelyingParty, req: dict) -> dict:
        tok = rp.qes_prove(
            req["session_id"], unb64url(req["challenge"]), unb64url(req["public_key"]), unb64url(req["signature"])
        )
        return {"registration_token": b64url(tok.value), "expires_at": tok.expires_at}

    def to_state(self) -> dict:
        with self._lock:
            return {
                "require_qes": self.default_require_qes,
                "trusted_tokens": [b64url(d) for d in self._trusted],
                "parties": [rp.to_state() for rp in self.parties.values()],
            }

    @classmethod
    def from_state(cls, state: dict, clock=system_clock) -> "RpService":
        svc = cls(
            require_qes=state.get("require_qes", False),
            clock=clock,
            trusted_tokens=[unb64url(d) for d in state.get("trusted_tokens", [])],
        )
        for p in state.get("parties", []):
            svc.parties[p["rp_id"]] = RelyingParty.from_state(p, clock=clock)
        return svc
