"""Key-derivation primitives: HKDF-SHA-256 and scrypt PIN stretching."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.kdf.hkdf import HKDF


def hkdf_sha256(ikm: bytes, info: bytes, length: int = 32, salt: bytes = b"") -> bytes:
    # An empty salt is equivalent to HashLen zero bytes (RFC 5869 section 2.2).
    return HKDF(
        algorithm=hashes.SHA256(), length=length, salt=salt or None, info=info
    ).derive(ikm)


@dataclass(frozen=True)
class ScryptParams:
    """scrypt cost parameters; the default costs 16 MiB and roughly 50-80 ms."""

    n: int = 2**14
    r: int = 8
    p: int = 1

    def derive(self, secret: bytes, salt: bytes, length: int = 32) -> bytes:
        maxmem = 256 * self.n * self.r * self.p + (1 << 20)
        return hashlib.scrypt(
            secret, salt=salt, n=self.n, r=self.r, p=self.p, maxmem=maxmem, dklen=length
        )

    def as_list(self) -> list[int]:
        return [self.n, self.r, self.p]

    @classmethod
    def from_list(cls, values) -> "ScryptParams":
        n, r, p = (int(v) for v in values)
        if n < 2 or n & (n - 1) or r < 1 or p < 1:
            raise ValueError("invalid scrypt parameters")
        return cls(n=n, r=r, p=p)


DEFAULT_PIN_KDF = ScryptParams()
# Cheap parameters for tests and demos that stretch thousands of guesses.
FAST_KDF = ScryptParams(n=2**8, r=8, p=1)
