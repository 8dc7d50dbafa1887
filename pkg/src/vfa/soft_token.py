"""Software emulation of a PIN-gated PKCS#11-style signature token.

The token holds two non-exportable keys: a 2048-bit RSA key used for
deterministic PKCS#1 v1.5 signatures, and an AES-256 key-encryption key.
Both are derived from a 32-byte seed at creation so that "the same physical
token" can be instantiated on a second simulated device.

At rest the private material is sealed twice, once under a key stretched
from the PIN and once under a key stretched from the PUK.
"""

from __future__ import annotations

import functools
import hmac
import os
import secrets
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa, utils
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .encoding import cbor_dumps, cbor_loads
from .errors import (
    CorruptToken,
    InvalidParameter,
    InvalidPinFormat,
    NotLocked,
    SessionNotAuthenticated,
    TokenLocked,
    UnwrapFailed,
    WrongPin,
    WrongPuk,
)
from .kdf import DEFAULT_PIN_KDF, ScryptParams, hkdf_sha256

TOKEN_MAGIC = b"VFAT"
TOKEN_FORMAT_VERSION = 0x01
WRAP_FORMAT_VERSION = 0x01
MAX_RETRIES = 3
RSA_BITS = 2048
RSA_PUBLIC_EXPONENT = 65537


class SignatureAlgorithm(str, Enum):
    DETERMINISTIC_RSA_PKCS1V15_SHA256 = "deterministic-rsa-pkcs1v15-sha256"


@dataclass
class PinState:
    pin_salt: bytes
    pin_hash: bytes
    puk_salt: bytes
    puk_hash: bytes
    retries_remaining: int = MAX_RETRIES
    locked: bool = False


@dataclass(frozen=True)
class TokenSession:
    token_id: bytes
    authenticated: bool
    opened_at: float
    handle: bytes = field(default=b"", repr=False)


@dataclass(frozen=True)
class TokenSignature:
    sigma: bytes
    algorithm: SignatureAlgorithm = SignatureAlgorithm.DETERMINISTIC_RSA_PKCS1V15_SHA256


@dataclass(frozen=True)
class _TokenKeys:
    signing_key: rsa.RSAPrivateKey
    wrapping_key: bytes

    def to_plain(self) -> bytes:
        der = self.signing_key.private_bytes(
            serialization.Encoding.DER,
            serialization.PrivateFormat.PKCS8,
            serialization.NoEncryption(),
        )
        return cbor_dumps({"rsa": der, "wrap": self.wrapping_key})

    @classmethod
    def from_plain(cls, data: bytes) -> "_TokenKeys":
        obj = cbor_loads(data)
        key = serialization.load_der_private_key(obj["rsa"], password=None)
        return cls(signing_key=key, wrapping_key=obj["wrap"])


class TokenHandle:
    """A soft token. Private keys are reachable only through token operations."""

    def __init__(
        self,
        token_id: bytes,
        public_key_der: bytes,
        pin_state: PinState,
        kdf: ScryptParams,
        pin_box: bytes,
        puk_box: bytes,
        keys: _TokenKeys | None = None,
    ):
        self.token_id = token_id
        self.public_key_der = public_key_der
        self.pin_state = pin_state
        self.kdf = kdf
        self._pin_box = pin_box
        self._puk_box = puk_box
        self._keys = keys
        self._sessions: set[bytes] = set()

    def __repr__(self) -> str:
        st = self.pin_state
        return (
            f"TokenHandle(token_id={self.token_id.hex()}, "
            f"retries_remaining={st.retries_remaining}, locked={st.locked})"
        )

    def __reduce__(self):
        raise TypeError("TokenHandle cannot be pickled; use serialize_token")

    @property
    def sealed_at_rest(self) -> bytes:
        return serialize_token(self)


# -- deterministic key generation ------------------------------------------

class _Drbg:
    """HMAC-SHA-256 counter-mode byte stream."""

    def __init__(self, key: bytes):
        self._key = key
        self._counter = 0

    def read(self, n: int) -> bytes:
        out = bytearray()
        while len(out) < n:
            out += hmac.new(self._key, self._counter.to_bytes(8, "big"), "sha256").digest()
            self._counter += 1
        return bytes(out[:n])


_SMALL_PRIMES = [p for p in range(3, 2000) if all(p % q for q in range(2, int(p**0.5) + 1))]


def _is_probable_prime(n: int, drbg: _Drbg, rounds: int = 40) -> bool:
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    nbytes = (n.bit_length() + 7) // 8
    for _ in range(rounds):
        a = 2 + int.from_bytes(drbg.read(nbytes), "big") % (n - 3)
        probe = pow(a, d, n)
        if probe in (1, n - 1):
            continue
        for _ in range(s - 1):
            probe = pow(probe, 2, n)
            if probe == n - 1:
                break
        else:
            return False
    return True


def _rsa_prime(drbg: _Drbg, bits: int) -> int:
    while True:
        # Top two bits set so that the product has exactly 2*bits bits.
        c = int.from_bytes(drbg.read(bits // 8), "big") | (3 << (bits - 2)) | 1
        if any(c % p == 0 for p in _SMALL_PRIMES):
            continue
        if (c - 1) % RSA_PUBLIC_EXPONENT == 0:
            continue
        if _is_probable_prime(c, drbg):
            return c


@functools.lru_cache(maxsize=64)
def _derive_keys(seed: bytes) -> _TokenKeys:
    drbg = _Drbg(hkdf_sha256(seed, b"VFA-token/rsa"))
    half = RSA_BITS // 2
    p = _rsa_prime(drbg, half)
    q = _rsa_prime(drbg, half)
    while q == p:
        q = _rsa_prime(drbg, half)
    e = RSA_PUBLIC_EXPONENT
    lam = (p - 1) * (q - 1) // _gcd(p - 1, q - 1)
    d = pow(e, -1, lam)
    numbers = rsa.RSAPrivateNumbers(
        p=p,
        q=q,
        d=d,
        dmp1=rsa.rsa_crt_dmp1(d, p),
        dmq1=rsa.rsa_crt_dmq1(d, q),
        iqmp=rsa.rsa_crt_iqmp(p, q),
        public_numbers=rsa.RSAPublicNumbers(e, p * q),
    )
    return _TokenKeys(
        signing_key=numbers.private_key(),
        wrapping_key=hkdf_sha256(seed, b"VFA-token/wrap"),
    )


def _gcd(a: int, b: int) -> int:
    while b:
        a, b = b, a % b
    return a


# -- PIN handling ------------------------------------------------------------

def _check_pin_format(pin: str, puk: str | None = None) -> None:
    if not isinstance(pin, str) or not pin.isascii() or not pin.isprintable():
        raise InvalidPinFormat("PIN must be printable ASCII")
    if not 4 <= len(pin) <= 12:
        raise InvalidPinFormat("PIN must be 4-12 characters")
    if puk is not None:
        if not isinstance(puk, str) or not puk.isascii() or not puk.isprintable():
            raise InvalidPinFormat("PUK must be printable ASCII")
        if not 8 <= len(puk) <= 16:
            raise InvalidPinFormat("PUK must be 8-16 characters")
        if pin == puk:
            raise InvalidPinFormat("PIN and PUK must differ")


def _stretch(kdf: ScryptParams, secret: str, salt: bytes) -> tuple[bytes, bytes]:
    """Returns (verifier, box key) for a PIN or PUK."""
    material = kdf.derive(secret.encode("ascii", "replace"), salt)
    return (
        hkdf_sha256(material, b"VFA-token/verify"),
        hkdf_sha256(material, b"VFA-token/box"),
    )


def _box_aad(token_id: bytes, which: bytes) -> bytes:
    return TOKEN_MAGIC + bytes([TOKEN_FORMAT_VERSION]) + token_id + which


def _seal_box(box_key: bytes, token_id: bytes, which: bytes, plain: bytes) -> bytes:
    nonce = os.urandom(12)
    return nonce + AESGCM(box_key).encrypt(nonce, plain, _box_aad(token_id, which))


def _open_box(box_key: bytes, token_id: bytes, which: bytes, box: bytes) -> bytes:
    try:
        return AESGCM(box_key).decrypt(box[:12], box[12:], _box_aad(token_id, which))
    except InvalidTag as exc:
        raise CorruptToken("sealed key material failed authentication") from exc


def _new_secret(kdf: ScryptParams, secret: str) -> tuple[bytes, bytes, bytes]:
    salt = os.urandom(16)
    verifier, box_key = _stretch(kdf, secret, salt)
    return salt, verifier, box_key


# -- public operations -------------------------------------------------------

def token_create(pin: str, puk: str, seed: bytes, kdf: ScryptParams = DEFAULT_PIN_KDF) -> TokenHandle:
    _check_pin_format(pin, puk)
    if len(seed) != 32:
        raise InvalidParameter("seed must be 32 bytes")
    keys = _derive_keys(bytes(seed))
    token_id = hkdf_sha256(seed, b"VFA-token/id", length=16)
    pin_salt, pin_hash, pin_key = _new_secret(kdf, pin)
    puk_salt, puk_hash, puk_key = _new_secret(kdf, puk)
    plain = keys.to_plain()
    public_der = keys.signing_key.public_key().public_bytes(
        serialization.Encoding.DER, serialization.PublicFormat.SubjectPublicKeyInfo
    )
    return TokenHandle(
        token_id=token_id,
        public_key_der=public_der,
        pin_state=PinState(pin_salt, pin_hash, puk_salt, puk_hash),
        kdf=kdf,
        pin_box=_seal_box(pin_key, token_id, b"pin", plain),
        puk_box=_seal_box(puk_key, token_id, b"puk", plain),
        keys=keys,
    )


def open_session(token: TokenHandle, pin: str) -> TokenSession:
    """Verify the PIN and open an authenticated session.

    Raises WrongPin while retries remain and TokenLocked on the attempt that
    exhausts them (and on every attempt after that).
    """
    st = token.pin_state
    if st.locked:
        raise TokenLocked("token is locked; use the PUK")
    verifier, box_key = _stretch(token.kdf, str(pin), st.pin_salt)
    if not hmac.compare_digest(verifier, st.pin_hash):
        st.retries_remaining -= 1
        if st.retries_remaining <= 0:
            st.retries_remaining = 0
            st.locked = True
            token._sessions.clear()
            raise TokenLocked("too many wrong PINs; token is now locked")
        raise WrongPin(st.retries_remaining)
    st.retries_remaining = MAX_RETRIES
    if token._keys is None:
        token._keys = _TokenKeys.from_plain(_open_box(box_key, token.token_id, b"pin", token._pin_box))
    handle = secrets.token_bytes(16)
    token._sessions.add(handle)
    return TokenSession(token.token_id, True, time.monotonic(), handle)


def close_session(token: TokenHandle, session: TokenSession) -> None:
    token._sessions.discard(session.handle)


def unlock_with_puk(token: TokenHandle, puk: str, new_pin: str) -> TokenHandle:
    st = token.pin_state
    if not st.locked:
        raise NotLocked("token is not locked")
    verifier, box_key = _stretch(token.kdf, str(puk), st.puk_salt)
    if not hmac.compare_digest(verifier, st.puk_hash):
        raise WrongPuk("wrong PUK")
    if str(new_pin) == str(puk):
        raise InvalidPinFormat("PIN and PUK must differ")
    _check_pin_format(new_pin)
    plain = _open_box(box_key, token.token_id, b"puk", token._puk_box)
    if token._keys is None:
        token._keys = _TokenKeys.from_plain(plain)
    pin_salt, pin_hash, pin_key = _new_secret(token.kdf, new_pin)
    st.pin_salt, st.pin_hash = pin_salt, pin_hash
    token._pin_box = _seal_box(pin_key, token.token_id, b"pin", plain)
    st.retries_remaining = MAX_RETRIES
    st.locked = False
    return token


def _keys_for(token: TokenHandle, session: TokenSession) -> _TokenKeys:
    if (
        not isinstance(session, TokenSession)
        or not session.authenticated
        or session.token_id != token.token_id
        or session.handle not in token._sessions
        or token.pin_state.locked
        or token._keys is None
    ):
        raise SessionNotAuthenticated("operation requires an authenticated session")
    return token._keys


def sign_deterministic(token: TokenHandle, session: TokenSession, digest: bytes) -> TokenSignature:
    """RSASSA-PKCS1-v1_5 over a precomputed SHA-256 digest."""
    keys = _keys_for(token, session)
    if len(digest) != 32:
        raise InvalidParameter("digest must be 32 bytes")
    raw = keys.signing_key.sign(
        bytes(digest), padding.PKCS1v15(), utils.Prehashed(hashes.SHA256())
    )
    return TokenSignature(raw)


def token_public_key(token: TokenHandle) -> bytes:
    """SubjectPublicKeyInfo DER of the signing key."""
    return token.public_key_der


def _wrap_aad(token: TokenHandle) -> bytes:
    return token.token_id + bytes([WRAP_FORMAT_VERSION])


def wrap_key(token: TokenHandle, session: TokenSession, key: bytes) -> bytes:
    keys = _keys_for(token, session)
    if len(key) != 32:
        raise InvalidParameter("only 32-byte keys can be wrapped")
    nonce = os.urandom(12)
    ct = AESGCM(keys.wrapping_key).encrypt(nonce, bytes(key), _wrap_aad(token))
    return bytes([WRAP_FORMAT_VERSION]) + nonce + ct


def unwrap_key(token: TokenHandle, session: TokenSession, blob: bytes) -> bytes:
    keys = _keys_for(token, session)
    if len(blob) != 1 + 12 + 32 + 16 or blob[0] != WRAP_FORMAT_VERSION:
        raise UnwrapFailed("malformed wrapped blob")
    try:
        return AESGCM(keys.wrapping_key).decrypt(blob[1:13], blob[13:], _wrap_aad(token))
    except InvalidTag as exc:
        raise UnwrapFailed("blob was not produced by this token or was modified") from exc


# -- persistence -------------------------------------------------------------

def serialize_token(token: TokenHandle) -> bytes:
    st = token.pin_state
    body = {
        "token_id": token.token_id,
        "public_key": token.public_key_der,
        "kdf": token.kdf.as_list(),
        "pin_salt": st.pin_salt,
        "pin_hash": st.pin_hash,
        "puk_salt": st.puk_salt,
        "puk_hash": st.puk_hash,
        "retries": st.retries_remaining,
        "locked": st.locked,
        "pin_box": token._pin_box,
        "puk_box": token._puk_box,
    }
    return TOKEN_MAGIC + bytes([TOKEN_FORMAT_VERSION]) + cbor_dumps(body)


def deserialize_token(data: bytes) -> TokenHandle:
    """Load a sealed token; keys stay sealed until a correct PIN is presented."""
    if len(data) < 5 or data[:4] != TOKEN_MAGIC:
        raise CorruptToken("not a VFA token file")
    if data[4] != TOKEN_FORMAT_VERSION:
        raise CorruptToken(f"unsupported token format version {data[4]}")
    try:
        body = cbor_loads(data[5:])
        retries = int(body["retries"])
        locked = bool(body["locked"])
        if not 0 <= retries <= MAX_RETRIES or locked != (retries == 0):
            raise ValueError("inconsistent retry state")
        return TokenHandle(
            token_id=body["token_id"],
            public_key_der=body["public_key"],
            pin_state=PinState(
                body["pin_salt"], body["pin_hash"], body["puk_salt"], body["puk_hash"],
                retries, locked,
            ),
            kdf=ScryptParams.from_list(body["kdf"]),
            pin_box=body["pin_box"],
            puk_box=body["puk_box"],
        )
    except CorruptToken:
        raise
    except Exception as exc:
        raise CorruptToken(f"malformed token file: {exc}") from exc


def save_token(token: TokenHandle, path: str | os.PathLike) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(serialize_token(token))
    os.replace(tmp, path)


def load_token(path: str | os.PathLike) -> TokenHandle:
    return deserialize_token(Path(path).read_bytes())
