"""Virtual FIDO2 authenticator backed by a PKCS#11-style token and an encrypted, syncable store."""

__version__ = "0.1.0"
