"""The cross-protocol adversary: a foreign application that shares the token.

The adversary gets the token to sign the (public) master-key label digest
through an ordinary signing request, then works offline on the store file
with nothing but ``cryptography`` and ``cbor2``. The derivation constants
below are public knowledge and are written out here on purpose rather than
imported, so this module re-implements the key schedule independently.

Against a baseline store the signature is the whole key. Against a
hardened store the adversary additionally needs the OPRF output: guessing it offline
is hopeless, and guessing the PIN behind it needs one rate-limited OPRF
call per guess.
"""

from __future__ import annotations

import hashlib
import os
import random
import struct
from dataclasses import dataclass, field

import cbor2
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

# The OPRF protocol code is a public client library; the adversary may use it
# to talk to the server like any client would.
from . import oprf, soft_token
from .errors import RateLimited, VfaError
from .kdf import DEFAULT_PIN_KDF

PUBLIC_LABEL = b"VFA/master/v1"
PUBLIC_INFO_BASELINE = b"VFA-MK"
PUBLIC_INFO_HARDENED = b"VFA-MK-OPRF"


@dataclass
class AttackReport:
    variant: str
    records_total: int
    records_decrypted: int = 0
    offline_key_guesses: int = 0
    online_guesses_planned: int = 0
    online_evaluations: int = 0
    online_rate_limited: int = 0
    online_budget_exhausted: bool = False
    stolen_oprf_key: bool = False
    guesses_until_success: int | None = None
    notes: list[str] = field(default_factory=list)

    @property
    def succeeded(self) -> bool:
        return self.records_total > 0 and self.records_decrypted == self.records_total

    @property
    def success_rate(self) -> float:
        return self.records_decrypted / self.records_total if self.records_total else 0.0

    def summary(self) -> str:
        if self.succeeded:
            line = f"ATTACK SUCCEEDED: {self.records_decrypted} credentials decrypted"
            if self.guesses_until_success is not None:
                line += f" after {self.guesses_until_success} PIN guesses"
            return line
        line = f"ATTACK FAILED: {self.records_decrypted} decrypted"
        if self.online_budget_exhausted:
            line += "; online budget exhausted"
        return line

    def to_json(self) -> dict:
        out = {k: v for k, v in self.__dict__.items()}
        out["succeeded"] = self.succeeded
        out["summary"] = self.summary()
        return out


# -- the foreign-application path ------------------------------------------------

def obtain_label_signature(token, token_pin: str) -> bytes:
    """What any PKCS#11 client can do: open a session and ask for a signature."""
    session = soft_token.open_session(token, token_pin)
    try:
        digest = hashlib.sha256(PUBLIC_LABEL).digest()
        return soft_token.sign_deterministic(token, session, digest).sigma
    finally:
        soft_token.close_session(token, session)


# -- offline tooling (no VFA code) -----------------------------------------------

@dataclass(frozen=True)
class _StoreView:
    store_id: bytes
    mode: int
    records: list[tuple[bytes, bytes, bytes]]
    oprf_key_id: bytes | None = None


def parse_store_file(data: bytes) -> _StoreView:
    if data[:5] != b"VFAS\x01":
        raise ValueError("not a store file")
    body = cbor2.loads(data[5:])
    records = [(r["nonce"], r["ct"], r["aad"]) for r in body["records"]]
    return _StoreView(body["store_id"], body["mode"], records, body.get("oprf_key_id"))


def _hkdf(ikm: bytes, info: bytes) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=32, salt=None, info=info).derive(ikm)


def _lp32(b: bytes) -> bytes:
    return struct.pack(">I", len(b)) + b


def key_from_signature(label_sig: bytes) -> bytes:
    return _hkdf(label_sig, PUBLIC_INFO_BASELINE)


def key_from_signature_and_output(label_sig: bytes, output: bytes) -> bytes:
    return _hkdf(_lp32(label_sig) + _lp32(output), PUBLIC_INFO_HARDENED)


def try_decrypt(key: bytes, view: _StoreView) -> int:
    """Number of records that authenticate under ``key``."""
    aead = AESGCM(key)
    opened = 0
    for nonce, ct, aad in view.records:
        try:
            aead.decrypt(nonce, ct, aad)
            opened += 1
        except InvalidTag:
            pass
    return opened


def _probe(key: bytes, view: _StoreView) -> bool:
    nonce, ct, aad = view.records[0]
    try:
        AESGCM(key).decrypt(nonce, ct, aad)
        return True
    except InvalidTag:
        return False


# -- scenarios --------------------------------------------------------------------

def attack_baseline(token, token_pin: str, store_bytes: bytes) -> AttackReport:
    view = parse_store_file(store_bytes)
    report = AttackReport("baseline", len(view.records))
    label_sig = obtain_label_signature(token, token_pin)
    report.records_decrypted = try_decrypt(key_from_signature(label_sig), view)
    report.offline_key_guesses = 1
    return report


def attack_hardened(
    token,
    token_pin: str,
    store_bytes: bytes,
    oprf_client=None,
    pin_guesses=(),
    output_guesses: int = 1024,
    rng=os.urandom,
    kdf=None,
    patience: int = 0,
    clock=None,
    stolen_oprf_key=None,
) -> AttackReport:
    """Run every avenue open to the adversary against a hardened store.

    ``oprf_client`` evaluates guessed PIN-derived inputs against the real
    server (one rate-limited call per guess). When the limiter refuses, the
    adversary waits out the window at most ``patience`` times on ``clock``
    before giving up. ``stolen_oprf_key`` models a compromised OPRF server:
    guesses are then evaluated offline.
    """
    view = parse_store_file(store_bytes)
    report = AttackReport("hardened", len(view.records), online_guesses_planned=len(pin_guesses))
    if not view.records:
        report.notes.append("store holds no records")
        return report
    label_sig = obtain_label_signature(token, token_pin)

    # The baseline key schedule and an all-zero OPRF output are the obvious first tries.
    for key in (key_from_signature(label_sig), key_from_signature_and_output(label_sig, bytes(32))):
        report.offline_key_guesses += 1
        if _probe(key, view):
            report.records_decrypted = try_decrypt(key, view)
            return report

    for _ in range(output_guesses):
        report.offline_key_guesses += 1
        key = key_from_signature_and_output(label_sig, rng(32))
        if _probe(key, view):
            report.records_decrypted = try_decrypt(key, view)
            return report

    kdf = kdf if kdf is not None else DEFAULT_PIN_KDF
    if stolen_oprf_key is not None:
        report.stolen_oprf_key = True
        for n, pin in enumerate(pin_guesses, 1):
            vinput = oprf.derive_verification_input(pin, view.store_id, kdf)
            key = key_from_signature_and_output(label_sig, oprf.oprf_direct(stolen_oprf_key, vinput).y)
            if _probe(key, view):
                report.records_decrypted = try_decrypt(key, view)
                report.guesses_until_success = n
                return report
        report.notes.append("stolen OPRF key without the PIN: every guess failed")
        return report

    if oprf_client is None:
        report.notes.append("no OPRF server reachable; online guessing impossible")
        return report

    waits = 0
    guesses = iter(pin_guesses)
    pending = None
    while True:
        pin = pending if pending is not None else next(guesses, None)
        pending = None
        if pin is None:
            break
        vinput = oprf.derive_verification_input(pin, view.store_id, kdf)
        try:
            output = oprf_client.evaluate_input(vinput, view.oprf_key_id)
        except RateLimited:
            report.online_rate_limited += 1
            if waits >= patience or clock is None:
                report.online_budget_exhausted = True
                break
            waits += 1
            clock.advance(60.0)
            pending = pin
            continue
        except VfaError as exc:
            report.notes.append(f"OPRF call failed: {exc}")
            break
        report.online_evaluations += 1
        key = key_from_signature_and_output(label_sig, output)
        if _probe(key, view):
            report.records_decrypted = try_decrypt(key, view)
            report.guesses_until_success = report.online_evaluations
            return report
    if not report.online_budget_exhausted and report.online_evaluations == len(pin_guesses):
        report.notes.append("guess list exhausted without the PIN")
    return report


def pin_guess_list(count: int, exclude: str, digits: int = 6, seed: int | None = None) -> list[str]:
    """``count`` distinct numeric PINs, never containing ``exclude``."""
    if count > 10**digits - 1:
        raise ValueError("not enough distinct PINs of that length")
    rnd = random.Random(seed)
    out: set[str] = set()
    while len(out) < count:
        pin = str(rnd.randrange(10**digits)).zfill(digits)
        if pin != exclude:
            out.add(pin)
    return sorted(out)
