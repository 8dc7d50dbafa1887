"""Master-key establishment: signature derivation, token wrapping, OPRF hardening.

Baseline derivation::

    label_sig = token.sign(SHA-256(label))
    master    = HKDF-SHA-256(ikm=label_sig, salt="", info="VFA-MK")

Hardened derivation adds the OPRF output::

    master    = HKDF-SHA-256(ikm=lp32(label_sig) || lp32(oprf_output), salt="", info="VFA-MK-OPRF")
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING

from . import soft_token
from .encoding import lp32, sha256
from .errors import InvalidParameter
from .kdf import hkdf_sha256

if TYPE_CHECKING:
    from .cred_store import EncryptedStore
    from .soft_token import TokenHandle, TokenSession

LABEL_BYTES = b"VFA/master/v1"
INFO_BASELINE = b"VFA-MK"
INFO_HARDENED = b"VFA-MK-OPRF"
MASTER_KEY_LEN = 32


@dataclass(frozen=True)
class DerivationLabel:
    label_bytes: bytes = LABEL_BYTES
    context_info_baseline: bytes = INFO_BASELINE
    context_info_hardened: bytes = INFO_HARDENED

    @property
    def digest(self) -> bytes:
        return sha256(self.label_bytes)


DEFAULT_LABEL = DerivationLabel()


class KeyOrigin(str, Enum):
    DERIVED_BASELINE = "derived_baseline"
    UNWRAPPED = "unwrapped"
    DERIVED_HARDENED = "derived_hardened"


class MasterKey:
    """The 32-byte root key. Deliberately has no serialization."""

    __slots__ = ("_key", "origin")

    def __init__(self, key_bytes: bytes, origin: KeyOrigin):
        if len(key_bytes) != MASTER_KEY_LEN:
            raise InvalidParameter("master key must be 32 bytes")
        self._key = bytes(key_bytes)
        self.origin = KeyOrigin(origin)

    @property
    def key_bytes(self) -> bytes:
        return self._key

    def __eq__(self, other) -> bool:
        return isinstance(other, MasterKey) and other._key == self._key

    def __hash__(self) -> int:
        return hash(self._key)

    def __repr__(self) -> str:
        return f"MasterKey(origin={self.origin.value}, key=<redacted>)"

    def __reduce__(self):
        raise TypeError("MasterKey cannot be serialized")


@dataclass(frozen=True)
class WrappedMasterKey:
    blob: bytes
    created_at: float | None = None


def derive_from_signature(label_sig: bytes, label: DerivationLabel = DEFAULT_LABEL) -> bytes:
    return hkdf_sha256(label_sig, label.context_info_baseline)


def derive_from_signature_and_output(label_sig: bytes, oprf_output: bytes, label: DerivationLabel = DEFAULT_LABEL) -> bytes:
    return hkdf_sha256(lp32(label_sig) + lp32(oprf_output), label.context_info_hardened)


def derive_master_baseline(
    token: TokenHandle, session: TokenSession, label: DerivationLabel = DEFAULT_LABEL
) -> MasterKey:
    sig = soft_token.sign_deterministic(token, session, label.digest)
    return MasterKey(derive_from_signature(sig.sigma, label), KeyOrigin.DERIVED_BASELINE)


def derive_master_hardened(
    token: TokenHandle, session: TokenSession, oprf_output: bytes, label: DerivationLabel = DEFAULT_LABEL
) -> MasterKey:
    oprf_output = getattr(oprf_output, "y", oprf_output)
    if len(oprf_output) != 32:
        raise InvalidParameter("OPRF output must be 32 bytes")
    sig = soft_token.sign_deterministic(token, session, label.digest)
    return MasterKey(derive_from_signature_and_output(sig.sigma, oprf_output, label), KeyOrigin.DERIVED_HARDENED)


def enroll_master_wrapped(
    token: TokenHandle, session: TokenSession, entropy: bytes
) -> tuple[MasterKey, WrappedMasterKey]:
    if len(entropy) != MASTER_KEY_LEN:
        raise InvalidParameter("entropy must be 32 bytes")
    blob = soft_token.wrap_key(token, session, entropy)
    return MasterKey(entropy, KeyOrigin.UNWRAPPED), WrappedMasterKey(blob, time.time())


def recover_master_wrapped(
    token: TokenHandle, session: TokenSession, wmk: WrappedMasterKey | bytes
) -> MasterKey:
    blob = wmk.blob if isinstance(wmk, WrappedMasterKey) else wmk
    return MasterKey(soft_token.unwrap_key(token, session, blob), KeyOrigin.UNWRAPPED)


def rotate_master(
    old: MasterKey,
    new: MasterKey,
    store: EncryptedStore,
    wrapped_master: WrappedMasterKey | None = None,
    oprf_key_id: bytes | None = None,
) -> EncryptedStore:
    """Re-seal every record of ``store`` under ``new``.

    ``wrapped_master`` / ``oprf_key_id`` replace the stored recovery material
    when the rotation also changes how the key is re-established.
    """
    from .cred_store import reseal_store

    return reseal_store(old, new, store, wrapped_master=wrapped_master, oprf_key_id=oprf_key_id)
