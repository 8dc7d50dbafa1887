"""2HashDH OPRF over ristretto255, plus the rate-limited evaluation service.

The client hashes its secret input and the derivation label to a group
element and multiplies it by a fresh random blinding scalar. The server
multiplies what it receives by its key scalar. The client removes the blind
and hashes input, label and the unblinded element into the 32-byte output.
The server never sees the input or the output::

    blind:     blinded   = blind * H(input, label)
    evaluate:  evaluated = key * blinded
    finalize:  output    = SHA-256(input, label, blind^-1 * evaluated, "Finalize")

The secret input is a memory-hard stretch of the user's verification PIN
salted with the store ID, so a guess costs one scrypt plus one rate-limited
server call. The OPRF is unverified: a server answering with a different key
produces a different output and therefore an AEAD failure at unlock, never a
silent success.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
from collections import defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path

import pysodium
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .auth import Accounts, SyncCredential
from .clock import system_clock
from .encoding import b64url, cbor_dumps, cbor_loads, lp16, unb64url
from .errors import (
    ConfigError,
    InvalidElement,
    InvalidParameter,
    OprfUnavailable,
    RateLimited,
    StateConsumed,
    TransportError,
    UnknownOprfKey,
    VfaError,
)
from .kdf import DEFAULT_PIN_KDF, ScryptParams
from .key_hierarchy import DEFAULT_LABEL, DerivationLabel
from .transport import Response, error_response, json_response, raise_for_error

log = logging.getLogger(__name__)

ELEMENT_BYTES = 32
SCALAR_BYTES = 32
HASH_TO_GROUP_DST = b"HashToGroup-VFA-OPRF-ristretto255-SHA512"
FINALIZE_TAG = b"Finalize"
RATE_LIMIT = 10
RATE_WINDOW = 60.0
_IDENTITY = bytes(ELEMENT_BYTES)
_ZERO_SCALAR = bytes(SCALAR_BYTES)


# -- group -------------------------------------------------------------------------

def expand_message_xmd(msg: bytes, dst: bytes, length: int, hash_fn=hashlib.sha512) -> bytes:
    """RFC 9380 expand_message_xmd."""
    b_len = hash_fn().digest_size
    r_len = hash_fn().block_size
    ell = -(-length // b_len)
    if ell > 255 or length > 0xFFFF or len(dst) > 255:
        raise ValueError("expand_message_xmd: requested length or DST too long")
    dst_prime = dst + bytes([len(dst)])
    b0 = hash_fn(bytes(r_len) + msg + length.to_bytes(2, "big") + b"\x00" + dst_prime).digest()
    blocks = [hash_fn(b0 + b"\x01" + dst_prime).digest()]
    for i in range(2, ell + 1):
        mixed = bytes(a ^ b for a, b in zip(b0, blocks[-1]))
        blocks.append(hash_fn(mixed + bytes([i]) + dst_prime).digest())
    return b"".join(blocks)[:length]


def hash_to_group(msg: bytes, dst: bytes = HASH_TO_GROUP_DST) -> bytes:
    return pysodium.crypto_core_ristretto255_from_hash(expand_message_xmd(msg, dst, 64))


def check_element(elem: bytes) -> bytes:
    """Reject anything that is not a canonical, non-identity ristretto255 encoding."""
    if not isinstance(elem, (bytes, bytearray)) or len(elem) != ELEMENT_BYTES:
        raise InvalidElement("group element must be 32 bytes")
    elem = bytes(elem)
    # libsodium accepts the identity encoding as a valid point; we do not.
    if elem == _IDENTITY or not pysodium.crypto_core_ristretto255_is_valid_point(elem):
        raise InvalidElement("not a canonical non-identity ristretto255 element")
    return elem


def _mul(scalar: bytes, elem: bytes) -> bytes:
    try:
        return pysodium.crypto_scalarmult_ristretto255(scalar, elem)
    except ValueError as exc:
        raise InvalidElement("scalar multiplication produced the identity") from exc


def scalar_from_entropy(entropy: bytes) -> bytes:
    if len(entropy) != 64:
        raise InvalidParameter("scalar entropy must be 64 bytes")
    scalar = pysodium.crypto_core_ristretto255_scalar_reduce(entropy)
    if scalar == _ZERO_SCALAR:
        raise InvalidParameter("entropy reduced to the zero scalar")
    return scalar


def _canonical_scalar(scalar: bytes) -> bool:
    if len(scalar) != SCALAR_BYTES or scalar == _ZERO_SCALAR:
        return False
    return pysodium.crypto_core_ristretto255_scalar_reduce(scalar + bytes(32)) == scalar


# -- values ------------------------------------------------------------------------------

@dataclass(frozen=True)
class OprfServerKey:
    scalar: bytes
    key_id: bytes

    def __post_init__(self):
        if not _canonical_scalar(self.scalar):
            raise InvalidParameter("OPRF key must be a canonical nonzero scalar")
        if self.key_id != key_id_for(self.scalar):
            raise InvalidParameter("key_id does not match the scalar")

    @classmethod
    def from_scalar(cls, scalar: bytes) -> "OprfServerKey":
        return cls(scalar, key_id_for(scalar))

    @classmethod
    def generate(cls, rng=os.urandom) -> "OprfServerKey":
        return cls.from_scalar(scalar_from_entropy(rng(64)))

    def __repr__(self) -> str:
        return f"OprfServerKey(key_id={self.key_id.hex()}, scalar=<redacted>)"


def key_id_for(scalar: bytes) -> bytes:
    return hashlib.sha256(pysodium.crypto_scalarmult_ristretto255_base(scalar)).digest()[:8]


@dataclass(frozen=True)
class VerificationInput:
    x: bytes


def derive_verification_input(
    pin: str, store_id: bytes, kdf: ScryptParams = DEFAULT_PIN_KDF
) -> VerificationInput:
    return VerificationInput(kdf.derive(pin.encode("utf-8"), store_id))


@dataclass(frozen=True)
class OprfOutput:
    y: bytes


@dataclass
class BlindState:
    blind_scalar: bytes
    input_bytes: bytes
    label: bytes
    input_echo: bytes
    consumed: bool = False

    def __repr__(self) -> str:
        return f"BlindState(input_echo={self.input_echo.hex()[:16]}, consumed={self.consumed})"


def _input(secret_input, label: DerivationLabel | bytes) -> tuple[bytes, bytes]:
    secret_input = getattr(secret_input, "x", secret_input)
    label = getattr(label, "label_bytes", label)
    return bytes(secret_input), bytes(label)


def _group_input(secret_input: bytes, label: bytes) -> bytes:
    return lp16(secret_input) + lp16(label)


def _finalize_hash(secret_input: bytes, label: bytes, unblinded: bytes) -> bytes:
    return hashlib.sha256(lp16(secret_input) + lp16(label) + lp16(unblinded) + FINALIZE_TAG).digest()


# -- protocol -----------------------------------------------------------------------------

def oprf_blind(secret_input, label=DEFAULT_LABEL, entropy: bytes | None = None) -> tuple[bytes, BlindState]:
    secret_input, label = _input(secret_input, label)
    msg = _group_input(secret_input, label)
    blind = scalar_from_entropy(os.urandom(64) if entropy is None else entropy)
    blinded = _mul(blind, hash_to_group(msg))
    return blinded, BlindState(blind, secret_input, label, hashlib.sha256(msg).digest())


def oprf_evaluate(key: OprfServerKey, elem: bytes) -> bytes:
    return _mul(key.scalar, check_element(elem))


def oprf_finalize(state: BlindState, evaluated: bytes) -> OprfOutput:
    if state.consumed:
        raise StateConsumed("blind state already used")
    state.consumed = True
    evaluated = check_element(evaluated)
    inv = pysodium.crypto_core_ristretto255_scalar_invert(state.blind_scalar)
    unblinded = _mul(inv, evaluated)
    return OprfOutput(_finalize_hash(state.input_bytes, state.label, unblinded))


def oprf_direct(key: OprfServerKey, secret_input, label=DEFAULT_LABEL) -> OprfOutput:
    """Unblinded evaluation; a test oracle and the stolen-key attack path only."""
    secret_input, label = _input(secret_input, label)
    unblinded = _mul(key.scalar, hash_to_group(_group_input(secret_input, label)))
    return OprfOutput(_finalize_hash(secret_input, label, unblinded))


# -- rate limiting ----------------------------------------------------------------------------

class RateLimiter:
    """Sliding-window limit of ``limit`` events per ``window`` seconds per caller."""

    def __init__(self, limit: int = RATE_LIMIT, window: float = RATE_WINDOW, clock=system_clock):
        if limit < 1 or window <= 0:
            raise ConfigError("rate limit must be positive")
        self.limit = limit
        self.window = window
        self.clock = clock
        self._events: dict[str, deque[float]] = defaultdict(deque)
        self._lock = threading.Lock()

    def acquire(self, caller: str) -> None:
        now = self.clock()
        with self._lock:
            events = self._events[caller]
            while events and events[0] <= now - self.window:
                events.popleft()
            if len(events) >= self.limit:
                retry = events[0] + self.window - now
                raise RateLimited(f"limit of {self.limit} per {self.window:g}s reached; retry in {retry:.1f}s")
            events.append(now)

    def remaining(self, caller: str) -> int:
        now = self.clock()
        with self._lock:
            return self.limit - sum(1 for t in self._events.get(caller, ()) if t > now - self.window)


# -- server --------------------------------------------------------------------------------------

@dataclass
class OprfServer:
    """Evaluation service holding one or more keys.

    Routes: ``GET /v1/oprf/key``, ``POST /v1/oprf/evaluate`` and
    ``POST /v1/oprf/rotate``. Only the caller ID and timestamp of each
    evaluation are recorded.
    """

    keys: dict[bytes, OprfServerKey] = field(default_factory=dict)
    current_key_id: bytes | None = None
    limiter: RateLimiter = field(default_factory=RateLimiter)
    accounts: Accounts = field(default_factory=Accounts)
    clock: object = system_clock
    audit_log: list[tuple[str, float]] = field(default_factory=list)

    def __post_init__(self):
        self._lock = threading.Lock()
        if not self.keys:
            self.add_key(OprfServerKey.generate())

    def add_key(self, key: OprfServerKey) -> bytes:
        with self._lock:
            self.keys[key.key_id] = key
            self.current_key_id = key.key_id
        return key.key_id

    def rotate_key(self) -> bytes:
        """Make a fresh key current; old keys stay available for stores not yet migrated."""
        return self.add_key(OprfServerKey.generate())

    def key(self, key_id: bytes | None) -> OprfServerKey:
        with self._lock:
            kid = self.current_key_id if key_id is None else key_id
            key = self.keys.get(kid)
        if key is None:
            raise UnknownOprfKey(f"no OPRF key {kid.hex() if kid else None}")
        return key

    def evaluate(self, caller: str, key_id: bytes | None, elem: bytes) -> bytes:
        key = self.key(key_id)
        elem = check_element(elem)
        self.limiter.acquire(caller)
        ts = self.clock()
        self.audit_log.append((caller, ts))
        log.info("oprf evaluation caller=%s ts=%.3f", caller, ts)
        return oprf_evaluate(key, elem)

    def handle(self, method: str, path: str, headers: dict, body: bytes) -> Response:
        try:
            if method == "GET" and path == "/v1/oprf/key":
                return json_response(200, {"key_id": b64url(self.key(None).key_id)})
            caller = self.accounts.authenticate(headers)
            if method == "POST" and path == "/v1/oprf/evaluate":
                try:
                    req = json.loads(body.decode("utf-8"))
                    key_id = req.get("key_id")
                    elem = unb64url(req["element"])
                except (ValueError, KeyError, TypeError, AttributeError) as exc:
                    raise InvalidElement(f"malformed evaluation request: {exc}") from exc
                out = self.evaluate(caller, None if key_id is None else unb64url(key_id), elem)
                return json_response(200, {"element": b64url(out)})
            if method == "POST" and path == "/v1/oprf/rotate":
                return json_response(200, {"key_id": b64url(self.rotate_key())})
            return json_response(404, {"error": "NotFound", "message": path})
        except VfaError as exc:
            return error_response(exc)

    # Keys at rest are sealed under an operator-held 32-byte key.
    def save(self, path: str | os.PathLike, sealing_key: bytes) -> None:
        with self._lock:
            body = cbor_dumps(
                {
                    "keys": [k.scalar for k in self.keys.values()],
                    "current": self.current_key_id,
                    "accounts": self.accounts.to_json(),
                }
            )
        nonce = os.urandom(12)
        blob = b"VFAO\x01" + nonce + AESGCM(sealing_key).encrypt(nonce, body, b"VFAO\x01")
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(blob)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | os.PathLike, sealing_key: bytes, **kwargs) -> "OprfServer":
        blob = Path(path).read_bytes()
        if blob[:5] != b"VFAO\x01":
            raise ConfigError("not an OPRF server state file")
        try:
            body = cbor_loads(AESGCM(sealing_key).decrypt(blob[5:17], blob[17:], b"VFAO\x01"))
        except InvalidTag as exc:
            raise ConfigError("OPRF state does not open with this sealing key") from exc
        keys = {k.key_id: k for k in (OprfServerKey.from_scalar(s) for s in body["keys"])}
        server = cls(keys=keys, accounts=Accounts.from_json(body.get("accounts", {})), **kwargs)
        server.current_key_id = body["current"]
        return server


# -- client --------------------------------------------------------------------------------------

class OprfClient:
    """Fetches the OPRF output for a store from an OPRF server over a transport."""

    def __init__(
        self,
        transport,
        credential: SyncCredential,
        uv_pin: str,
        kdf: ScryptParams = DEFAULT_PIN_KDF,
    ):
        self.transport = transport
        self.credential = credential
        self.uv_pin = uv_pin
        self.kdf = kdf

    def _request(self, method: str, path: str, body: bytes = b"") -> dict:
        try:
            resp = self.transport.request(method, path, self.credential.headers(), body)
        except TransportError as exc:
            raise OprfUnavailable(f"OPRF server unreachable: {exc}") from exc
        if resp.status >= 500:
            raise OprfUnavailable(f"OPRF server error HTTP {resp.status}")
        raise_for_error(resp)
        return resp.json()

    def current_key_id(self) -> bytes:
        return unb64url(self._request("GET", "/v1/oprf/key")["key_id"])

    def rotate_key(self) -> bytes:
        return unb64url(self._request("POST", "/v1/oprf/rotate")["key_id"])

    def evaluate_input(self, secret_input, key_id: bytes | None, label=DEFAULT_LABEL) -> bytes:
        blinded, state = oprf_blind(secret_input, label)
        req = {"element": b64url(blinded), "key_id": None if key_id is None else b64url(key_id)}
        resp = self._request("POST", "/v1/oprf/evaluate", json.dumps(req).encode("utf-8"))
        return oprf_finalize(state, unb64url(resp["element"])).y

    def fetch_output(self, store_id: bytes, key_id: bytes | None, label=DEFAULT_LABEL) -> bytes:
        secret_input = derive_verification_input(self.uv_pin, store_id, self.kdf)
        return self.evaluate_input(secret_input, key_id, label)
