"""AEAD-sealed credential records and the store envelope that carries them.

Every record is sealed with AES-256-GCM under the master key, a fresh 96-bit
nonce, and associated data ``store_id || record_index (u32 BE) || 0x01``.
The serialized store (``VFAS`` envelope) is the only form that ever reaches
disk or the sync server.
"""

from __future__ import annotations

import functools
import os
import struct
import time
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Protocol

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives import serialization

from . import key_hierarchy
from .encoding import cbor_dumps, cbor_loads
from .errors import (
    CorruptStore,
    DecryptFailed,
    InvalidRecord,
    NotFound,
    OprfUnavailable,
    UnwrapFailed,
)
from .key_hierarchy import DEFAULT_LABEL, DerivationLabel, MasterKey, WrappedMasterKey

if TYPE_CHECKING:
    from .soft_token import TokenHandle, TokenSession

STORE_MAGIC = b"VFAS"
STORE_FORMAT_VERSION = 0x01
RECORD_FORMAT_VERSION = 0x01
TOMBSTONE_INDEX = 0xFFFFFFFF
TOMBSTONE_RETENTION = 30 * 24 * 3600
MAX_USER_HANDLE = 64
_P256_ORDER = 0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551


class StoreMode(IntEnum):
    BASELINE = 0
    HARDENED = 1


def canonical_rp_id(rp_id: str) -> str:
    """Lowercase ASCII host name; schemes, ports and paths are rejected."""
    if not isinstance(rp_id, str) or not rp_id or not rp_id.isascii():
        raise InvalidRecord(f"RP ID must be a non-empty ASCII string: {rp_id!r}")
    if any(c in rp_id for c in ":/?#@ \t\r\n"):
        raise InvalidRecord(f"RP ID must be a bare host name: {rp_id!r}")
    return rp_id.lower()


@dataclass(frozen=True)
class CredentialRecord:
    credential_id: bytes
    rp_id: str
    user_handle: bytes
    user_name: str
    private_key: bytes = field(repr=False)
    public_key: bytes  # uncompressed SEC1 point, 65 bytes
    sign_counter: int = 0
    created_at: float = 0.0

    def __post_init__(self):
        if len(self.credential_id) != 16:
            raise InvalidRecord("credential_id must be 16 bytes")
        if self.rp_id != canonical_rp_id(self.rp_id):
            raise InvalidRecord(f"RP ID is not canonical: {self.rp_id!r}")
        if len(self.user_handle) > MAX_USER_HANDLE:
            raise InvalidRecord("user_handle exceeds 64 bytes")
        if not 0 <= self.sign_counter <= 0xFFFFFFFF:
            raise InvalidRecord("sign_counter outside u32 range")
        if len(self.private_key) != 32 or len(self.public_key) != 65:
            raise InvalidRecord("bad key length")
        if _public_point(self.private_key) != self.public_key:
            raise InvalidRecord("public_key does not match private_key")

    @classmethod
    def generate(
        cls,
        rp_id: str,
        user_handle: bytes,
        user_name: str,
        rng=os.urandom,
        now: float | None = None,
    ) -> "CredentialRecord":
        while True:
            scalar = int.from_bytes(rng(32), "big")
            if 0 < scalar < _P256_ORDER:
                break
        priv = scalar.to_bytes(32, "big")
        return cls(
            credential_id=rng(16),
            rp_id=canonical_rp_id(rp_id),
            user_handle=bytes(user_handle),
            user_name=user_name,
            private_key=priv,
            public_key=_public_point(priv),
            sign_counter=0,
            created_at=time.time() if now is None else now,
        )

    @functools.cached_property
    def signing_key(self) -> ec.EllipticCurvePrivateKey:
        return ec.derive_private_key(int.from_bytes(self.private_key, "big"), ec.SECP256R1())

    def to_cbor(self) -> bytes:
        return cbor_dumps(
            {
                "credential_id": self.credential_id,
                "rp_id": self.rp_id,
                "user_handle": self.user_handle,
                "user_name": self.user_name,
                "private_key": self.private_key,
                "public_key": self.public_key,
                "sign_counter": self.sign_counter,
                "created_at": float(self.created_at),
            }
        )

    @classmethod
    def from_cbor(cls, data: bytes) -> "CredentialRecord":
        try:
            obj = cbor_loads(data)
            return cls(
                credential_id=obj["credential_id"],
                rp_id=obj["rp_id"],
                user_handle=obj["user_handle"],
                user_name=obj["user_name"],
                private_key=obj["private_key"],
                public_key=obj["public_key"],
                sign_counter=obj["sign_counter"],
                created_at=obj["created_at"],
            )
        except InvalidRecord:
            raise
        except Exception as exc:
            raise InvalidRecord(f"malformed credential record: {exc}") from exc


@functools.lru_cache(maxsize=4096)
def _public_point(private_key: bytes) -> bytes:
    key = ec.derive_private_key(int.from_bytes(private_key, "big"), ec.SECP256R1())
    return key.public_key().public_bytes(
        serialization.Encoding.X962, serialization.PublicFormat.UncompressedPoint
    )


@dataclass(frozen=True)
class Tombstone:
    credential_id: bytes
    deleted_at: float


@dataclass(frozen=True)
class EncryptedRecord:
    nonce: bytes
    ciphertext: bytes
    aad: bytes


@dataclass(frozen=True)
class EncryptedStore:
    store_id: bytes
    version: int = 0
    mode: StoreMode = StoreMode.BASELINE
    wrapped_master: bytes | None = None
    records: tuple[EncryptedRecord, ...] = ()
    tombstones: EncryptedRecord | None = None
    oprf_key_id: bytes | None = None


@dataclass
class UnlockedStore:
    """Index-aligned plaintext view of an EncryptedStore."""

    master: MasterKey
    plaintext: list[CredentialRecord]
    backing: EncryptedStore
    tombstones: list[Tombstone] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.plaintext)

    def find(self, credential_id: bytes) -> int:
        for i, rec in enumerate(self.plaintext):
            if rec.credential_id == credential_id:
                return i
        raise NotFound(f"no credential {credential_id.hex()}")


class OprfOutputSource(Protocol):
    def fetch_output(self, store_id: bytes, key_id: bytes | None, label: DerivationLabel) -> bytes:
        ...


# -- sealing -------------------------------------------------------------------

def record_aad(store_id: bytes, index: int) -> bytes:
    return store_id + struct.pack(">I", index) + bytes([RECORD_FORMAT_VERSION])


def _seal(master: MasterKey, aad: bytes, plain: bytes) -> EncryptedRecord:
    nonce = os.urandom(12)
    return EncryptedRecord(nonce, AESGCM(master.key_bytes).encrypt(nonce, plain, aad), aad)


def _open(master: MasterKey, enc: EncryptedRecord) -> bytes:
    try:
        return AESGCM(master.key_bytes).decrypt(enc.nonce, enc.ciphertext, enc.aad)
    except (InvalidTag, ValueError) as exc:
        raise DecryptFailed("record failed authentication (wrong key or tampering)") from exc


def new_store(
    mode: StoreMode = StoreMode.BASELINE,
    wrapped_master: bytes | None = None,
    oprf_key_id: bytes | None = None,
    store_id: bytes | None = None,
) -> EncryptedStore:
    return EncryptedStore(
        store_id=os.urandom(16) if store_id is None else store_id,
        mode=StoreMode(mode),
        wrapped_master=wrapped_master,
        oprf_key_id=oprf_key_id,
    )


def seal_credential(master: MasterKey, rec: CredentialRecord, store: EncryptedStore) -> EncryptedStore:
    enc = _seal(master, record_aad(store.store_id, len(store.records)), rec.to_cbor())
    return replace(store, version=store.version + 1, records=store.records + (enc,))


def open_credential(master: MasterKey, enc: EncryptedRecord) -> CredentialRecord:
    if len(enc.aad) != 21 or enc.aad[-1] != RECORD_FORMAT_VERSION:
        raise DecryptFailed("unsupported record associated data")
    return CredentialRecord.from_cbor(_open(master, enc))


def open_all(master: MasterKey, store: EncryptedStore) -> list[CredentialRecord]:
    """Open every record or none; AAD must match the record's position."""
    out = []
    for i, enc in enumerate(store.records):
        if enc.aad != record_aad(store.store_id, i):
            raise DecryptFailed(f"record {i} is bound to a different store or position")
        out.append(open_credential(master, enc))
    return out


def open_tombstones(master: MasterKey, store: EncryptedStore) -> list[Tombstone]:
    if store.tombstones is None:
        return []
    if store.tombstones.aad != record_aad(store.store_id, TOMBSTONE_INDEX):
        raise DecryptFailed("tombstone list is bound to a different store")
    items = cbor_loads(_open(master, store.tombstones))
    return [Tombstone(t["credential_id"], t["deleted_at"]) for t in items]


def compact_tombstones(tombstones: Iterable[Tombstone], now: float) -> list[Tombstone]:
    cutoff = now - TOMBSTONE_RETENTION
    return [t for t in tombstones if t.deleted_at >= cutoff]


def build_store(
    master: MasterKey,
    template: EncryptedStore,
    records: Iterable[CredentialRecord],
    tombstones: Iterable[Tombstone] = (),
    version: int | None = None,
    **changes,
) -> EncryptedStore:
    """Seal ``records`` freshly into a store that inherits ``template``'s identity."""
    base = replace(template, **changes) if changes else template
    sealed = tuple(
        _seal(master, record_aad(base.store_id, i), rec.to_cbor()) for i, rec in enumerate(records)
    )
    tombs = sorted(tombstones, key=lambda t: t.credential_id)
    tomb_enc = None
    if tombs:
        payload = cbor_dumps(
            [{"credential_id": t.credential_id, "deleted_at": float(t.deleted_at)} for t in tombs]
        )
        tomb_enc = _seal(master, record_aad(base.store_id, TOMBSTONE_INDEX), payload)
    return replace(
        base,
        version=template.version + 1 if version is None else version,
        records=sealed,
        tombstones=tomb_enc,
    )


def replace_record(
    master: MasterKey, store: EncryptedStore, index: int, rec: CredentialRecord
) -> EncryptedStore:
    enc = _seal(master, record_aad(store.store_id, index), rec.to_cbor())
    records = store.records[:index] + (enc,) + store.records[index + 1 :]
    return replace(store, version=store.version + 1, records=records)


def delete_credential(
    master: MasterKey, store: EncryptedStore, credential_id: bytes, now: float | None = None
) -> EncryptedStore:
    records = open_all(master, store)
    keep = [r for r in records if r.credential_id != credential_id]
    if len(keep) == len(records):
        raise NotFound(f"no credential {credential_id.hex()}")
    now = time.time() if now is None else now
    tombs = compact_tombstones(open_tombstones(master, store), now)
    tombs.append(Tombstone(credential_id, now))
    return build_store(master, store, keep, tombs)


def reseal_store(
    old: MasterKey,
    new: MasterKey,
    store: EncryptedStore,
    wrapped_master: key_hierarchy.WrappedMasterKey | None = None,
    oprf_key_id: bytes | None = None,
) -> EncryptedStore:
    records = open_all(old, store)
    tombs = open_tombstones(old, store)
    changes = {}
    if wrapped_master is not None:
        changes["wrapped_master"] = wrapped_master.blob
    if oprf_key_id is not None:
        changes["oprf_key_id"] = oprf_key_id
    return build_store(new, store, records, tombs, **changes)


# -- unlock (Algorithm 1) ---------------------------------------------------------

def recover_master(
    token: TokenHandle,
    session: TokenSession,
    store: EncryptedStore,
    oprf_client: OprfOutputSource | None = None,
    label: DerivationLabel = DEFAULT_LABEL,
) -> MasterKey:
    """Re-establish the store's master key by the path its mode prescribes."""
    if store.mode == StoreMode.HARDENED:
        if oprf_client is None:
            raise OprfUnavailable("hardened store requires an OPRF client")
        oprf_output = oprf_client.fetch_output(store.store_id, store.oprf_key_id, label)
        return key_hierarchy.derive_master_hardened(token, session, oprf_output, label)
    if store.wrapped_master is not None:
        try:
            return key_hierarchy.recover_master_wrapped(
                token, session, WrappedMasterKey(store.wrapped_master)
            )
        except UnwrapFailed as exc:
            raise DecryptFailed("master key blob does not open with this token") from exc
    return key_hierarchy.derive_master_baseline(token, session, label)


def unlock(
    token: TokenHandle,
    session: TokenSession,
    store: EncryptedStore,
    oprf_client: OprfOutputSource | None = None,
    label: DerivationLabel = DEFAULT_LABEL,
) -> UnlockedStore:
    master = recover_master(token, session, store, oprf_client, label)
    return open_with(master, store)


def open_with(master: MasterKey, store: EncryptedStore) -> UnlockedStore:
    records = open_all(master, store)
    tombs = open_tombstones(master, store)
    return UnlockedStore(master=master, plaintext=records, backing=store, tombstones=tombs)


# -- envelope --------------------------------------------------------------------

def _enc_to_obj(enc: EncryptedRecord) -> dict:
    return {"nonce": enc.nonce, "ct": enc.ciphertext, "aad": enc.aad}


def _enc_from_obj(obj) -> EncryptedRecord:
    if not isinstance(obj, dict) or set(obj) != {"nonce", "ct", "aad"}:
        raise CorruptStore("malformed record entry")
    nonce, ct, aad = obj["nonce"], obj["ct"], obj["aad"]
    if not all(isinstance(v, bytes) for v in (nonce, ct, aad)) or len(nonce) != 12:
        raise CorruptStore("malformed record entry")
    return EncryptedRecord(nonce, ct, aad)


def dumps_store(store: EncryptedStore) -> bytes:
    body = {
        "store_id": store.store_id,
        "version": store.version,
        "mode": int(store.mode),
        "wrapped_master": store.wrapped_master,
        "records": [_enc_to_obj(r) for r in store.records],
        "tombstones": None if store.tombstones is None else _enc_to_obj(store.tombstones),
        "oprf_key_id": store.oprf_key_id,
    }
    return STORE_MAGIC + bytes([STORE_FORMAT_VERSION]) + cbor_dumps(body)


def loads_store(data: bytes) -> EncryptedStore:
    if len(data) < 5 or data[:4] != STORE_MAGIC:
        raise CorruptStore("missing VFAS magic")
    if data[4] != STORE_FORMAT_VERSION:
        raise CorruptStore(f"unsupported store format version {data[4]}")
    try:
        body = cbor_loads(data[5:])
    except Exception as exc:
        raise CorruptStore(f"malformed CBOR: {exc}") from exc
    required = {"store_id", "version", "mode", "wrapped_master", "records"}
    if not isinstance(body, dict) or not required <= set(body):
        raise CorruptStore("store envelope is missing fields")
    try:
        store_id = body["store_id"]
        version = body["version"]
        if not isinstance(store_id, bytes) or len(store_id) != 16:
            raise CorruptStore("store_id must be 16 bytes")
        if not isinstance(version, int) or not 0 <= version < 2**64:
            raise CorruptStore("version must be a u64")
        mode = StoreMode(body["mode"])
        wrapped = body["wrapped_master"]
        if wrapped is not None and not isinstance(wrapped, bytes):
            raise CorruptStore("wrapped_master must be bytes or null")
        tomb = body.get("tombstones")
        key_id = body.get("oprf_key_id")
        if key_id is not None and not isinstance(key_id, bytes):
            raise CorruptStore("oprf_key_id must be bytes or null")
        return EncryptedStore(
            store_id=store_id,
            version=version,
            mode=mode,
            wrapped_master=wrapped,
            records=tuple(_enc_from_obj(r) for r in body["records"]),
            tombstones=None if tomb is None else _enc_from_obj(tomb),
            oprf_key_id=key_id,
        )
    except CorruptStore:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise CorruptStore(f"malformed store envelope: {exc}") from exc


def save_store(store: EncryptedStore, path: str | os.PathLike) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps_store(store))
    os.replace(tmp, path)


def load_store(path: str | os.PathLike) -> EncryptedStore:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise NotFound(f"no store at {path}") from exc
    return loads_store(data)
