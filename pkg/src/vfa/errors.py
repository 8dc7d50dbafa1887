"""Exception hierarchy shared by every VFA component.

Each concrete error carries a distinct ``exit_code`` so the CLI can map
failures to process exit statuses without a lookup table of its own.
"""

from __future__ import annotations


class VfaError(Exception):
    exit_code = 1
    http_status = 400


# soft token
class InvalidPinFormat(VfaError):
    exit_code = 10


class WrongPin(VfaError):
    exit_code = 11
    http_status = 403

    def __init__(self, retries_remaining: int):
        super().__init__(f"wrong PIN, {retries_remaining} retries remaining")
        self.retries_remaining = retries_remaining


class TokenLocked(VfaError):
    exit_code = 12
    http_status = 403


class WrongPuk(VfaError):
    exit_code = 13
    http_status = 403


class NotLocked(VfaError):
    exit_code = 14


class SessionNotAuthenticated(VfaError):
    exit_code = 15
    http_status = 401


class UnwrapFailed(VfaError):
    exit_code = 16


class CorruptToken(VfaError):
    exit_code = 17


# credential store
class DecryptFailed(VfaError):
    exit_code = 20


class NotFound(VfaError):
    exit_code = 21
    http_status = 404


class CorruptStore(VfaError):
    exit_code = 22


class StoreExists(VfaError):
    exit_code = 23


class InvalidRecord(VfaError):
    exit_code = 24


# authenticator
class NotUnlocked(VfaError):
    exit_code = 30


class CredentialExcluded(VfaError):
    exit_code = 31


class NoCredentials(VfaError):
    exit_code = 32
    http_status = 404


class InvalidParameter(VfaError):
    exit_code = 33


# relying party
class ChallengeMismatch(VfaError):
    exit_code = 40


class BadAttestation(VfaError):
    exit_code = 41


class MissingRegistrationToken(VfaError):
    exit_code = 42
    http_status = 403


class BadSignature(VfaError):
    exit_code = 43
    http_status = 403


class CounterRegression(VfaError):
    exit_code = 44
    http_status = 403


class UnknownCredential(VfaError):
    exit_code = 45
    http_status = 404


class UnknownToken(VfaError):
    exit_code = 46
    http_status = 403


class Expired(VfaError):
    exit_code = 47
    http_status = 403


# sync
class VersionConflict(VfaError):
    exit_code = 50
    http_status = 409

    def __init__(self, current_version: int):
        super().__init__(f"server is at version {current_version}")
        self.current_version = current_version


class Unauthorized(VfaError):
    exit_code = 51
    http_status = 401


class TransportError(VfaError):
    exit_code = 52
    http_status = 502


# oprf
class OprfUnavailable(VfaError):
    exit_code = 60
    http_status = 503


class InvalidElement(VfaError):
    exit_code = 61


class RateLimited(VfaError):
    exit_code = 62
    http_status = 429


class StateConsumed(VfaError):
    exit_code = 63


class UnknownOprfKey(VfaError):
    exit_code = 64
    http_status = 404


# cli
class ConfigError(VfaError):
    exit_code = 70


class ModeMismatch(VfaError):
    exit_code = 71


class UsageError(VfaError):
    """A required command-line argument is missing or contradictory."""

    exit_code = 72


def error_classes() -> dict[str, type[VfaError]]:
    """All concrete error classes by name, used to revive errors from the wire."""
    out: dict[str, type[VfaError]] = {}
    stack = [VfaError]
    while stack:
        cls = stack.pop()
        out[cls.__name__] = cls
        stack.extend(cls.__subclasses__())
    return out


def revive(name: str, message: str, **extra) -> VfaError:
    cls = error_classes().get(name, VfaError)
    if cls is WrongPin:
        return WrongPin(int(extra.get("retries_remaining", 0)))
    if cls is VersionConflict:
        return VersionConflict(int(extra.get("current_version", 0)))
    return cls(message)
