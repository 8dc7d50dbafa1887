"""The browser's half of WebAuthn: talk to an RP, build client data, drive the authenticator."""

from __future__ import annotations

import json
import secrets
from dataclasses import dataclass

from . import soft_token
from .ctap import GetAssertionParams, MakeCredentialParams
from .encoding import b64url, sha256, unb64url
from .relying_party import client_data_json, qes_message
from .transport import raise_for_error


class RpClient:
    """JSON client for the RP endpoints, over any transport."""

    def __init__(self, transport):
        self.transport = transport

    def call(self, path: str, **fields) -> dict:
        body = {k: (b64url(v) if isinstance(v, bytes) else v) for k, v in fields.items() if v is not None}
        resp = self.transport.request(
            "POST", path, {"Content-Type": "application/json"}, json.dumps(body).encode("utf-8")
        )
        raise_for_error(resp)
        return resp.json()


@dataclass(frozen=True)
class Registration:
    rp_id: str
    credential_id: bytes
    counter: int


@dataclass(frozen=True)
class Login:
    rp_id: str
    credential_id: bytes
    counter: int


def qes_gate(token, session, rp: RpClient, rp_id: str, session_id: str) -> bytes:
    """Prove token possession to the RP and return its registration token."""
    challenge = unb64url(rp.call("/qes/challenge", rp_id=rp_id, session_id=session_id)["challenge"])
    sig = soft_token.sign_deterministic(token, session, sha256(qes_message(rp_id, challenge)))
    resp = rp.call(
        "/qes/prove",
        rp_id=rp_id,
        session_id=session_id,
        challenge=challenge,
        public_key=soft_token.token_public_key(token),
        signature=sig.sigma,
    )
    return unb64url(resp["registration_token"])


def register(
    authenticator,
    rp: RpClient,
    rp_id: str,
    user_name: str,
    token=None,
    session=None,
    run_qes_gate: bool | None = None,
) -> Registration:
    """Full registration ceremony.

    ``run_qes_gate=None`` runs the gate only if the RP asks for it and a token
    session is available; ``False`` never runs it.
    """
    session_id = b64url(secrets.token_bytes(16))
    registration_token = None
    if run_qes_gate:
        registration_token = qes_gate(token, session, rp, rp_id, session_id)
    begin = rp.call(
        "/register/begin",
        rp_id=rp_id,
        user_name=user_name,
        session_id=session_id,
        registration_token=registration_token,
    )
    if begin.get("require_qes") and registration_token is None and run_qes_gate is None and session is not None:
        registration_token = qes_gate(token, session, rp, rp_id, session_id)
        begin = rp.call(
            "/register/begin",
            rp_id=rp_id,
            user_name=user_name,
            session_id=session_id,
            registration_token=registration_token,
        )
    challenge = unb64url(begin["challenge"])
    client_data = client_data_json("webauthn.create", challenge, begin["origin"])
    att = authenticator.make_credential(
        MakeCredentialParams(
            client_data_hash=sha256(client_data),
            rp_id=begin["rp_id"],
            user_handle=unb64url(begin["user_handle"]),
            user_name=user_name,
            require_uv=begin.get("require_uv", True),
            exclude_list=tuple(unb64url(c) for c in begin.get("exclude_credentials", [])),
        )
    )
    done = rp.call(
        "/register/finish",
        rp_id=rp_id,
        challenge=challenge,
        attestation_object=att.to_cbor(),
        client_data=client_data,
    )
    return Registration(rp_id, unb64url(done["credential_id"]), int(done["counter"]))


def authenticate(authenticator, rp: RpClient, rp_id: str) -> Login:
    """Full login ceremony."""
    begin = rp.call("/login/begin", rp_id=rp_id)
    challenge = unb64url(begin["challenge"])
    client_data = client_data_json("webauthn.get", challenge, begin["origin"])
    allow = begin.get("allow_credentials") or None
    asr = authenticator.get_assertion(
        GetAssertionParams(
            client_data_hash=sha256(client_data),
            rp_id=begin["rp_id"],
            allow_list=None if allow is None else tuple(unb64url(c) for c in allow),
        )
    )
    done = rp.call(
        "/login/finish",
        rp_id=rp_id,
        challenge=challenge,
        credential_id=asr.credential_id,
        auth_data=asr.auth_data,
        signature=asr.signature,
        user_handle=asr.user_handle,
        client_data=client_data,
    )
    return Login(rp_id, unb64url(done["credential_id"]), int(done["counter"]))
