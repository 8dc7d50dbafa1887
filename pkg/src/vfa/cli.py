"""``vfa`` command-line harness.

State lives in a directory: the device's token file, store file and sync
credential. Unless service URLs are configured, the sync, OPRF and RP
services are file-backed objects in a shared services directory, driven
in-process (or over a loopback HTTP server with ``--live``).
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import attack, client as webauthn, cred_store, device, soft_token
from .auth import SyncCredential
from .bench import run_bench
from .clock import SimulatedClock
from .cred_store import StoreMode
from .ctap import Authenticator
from .encoding import b64url, unb64url
from .errors import (
    ConfigError,
    ModeMismatch,
    NotFound,
    StoreExists,
    UsageError,
    VfaError,
)
from .kdf import DEFAULT_PIN_KDF, FAST_KDF
from .oprf import OprfClient, OprfServer, RateLimiter
from .relying_party import RpService
from .sync import SyncClient, SyncServer
from .transport import HttpTransport, InProcessTransport, LoopbackServer

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

TOKEN_FILE = "token.vfat"
STORE_FILE = "store.vfas"
DEVICE_FILE = "device.json"


# -- configuration ---------------------------------------------------------------

@dataclass
class CliConfig:
    state_dir: str = "vfa-state"
    services_dir: str | None = None
    token_path: str | None = None
    store_path: str | None = None
    sync_url: str | None = None
    oprf_url: str | None = None
    rp_url: str | None = None
    mode: str = "baseline"
    user_id: str = "user"
    kdf: str = "default"
    rp_require_qes: bool = False
    oprf_rate_limit: int = 10
    live: bool = False
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("baseline", "hardened"):
            raise ConfigError(f"mode must be baseline or hardened, not {self.mode!r}")
        if self.kdf not in ("default", "fast"):
            raise ConfigError("kdf must be 'default' or 'fast'")

    @property
    def state(self) -> Path:
        return Path(self.state_dir)

    @property
    def services(self) -> Path:
        return Path(self.services_dir) if self.services_dir else self.state / "services"

    @property
    def token_file(self) -> Path:
        return Path(self.token_path) if self.token_path else self.state / TOKEN_FILE

    @property
    def store_file(self) -> Path:
        return Path(self.store_path) if self.store_path else self.state / STORE_FILE

    @property
    def store_mode(self) -> StoreMode:
        return StoreMode.HARDENED if self.mode == "hardened" else StoreMode.BASELINE

    @property
    def pin_kdf(self):
        return FAST_KDF if self.kdf == "fast" else DEFAULT_PIN_KDF


def load_config(path: str | None, overrides: dict) -> CliConfig:
    values: dict = {}
    if path:
        try:
            with open(path, "rb") as fh:
                values = tomllib.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config file {path}: {exc}") from exc
    known = {f.name for f in fields(CliConfig)} - {"extra"}
    extra = {k: values.pop(k) for k in list(values) if k not in known}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return CliConfig(**values, extra=extra)


# -- services ---------------------------------------------------------------------

class Services:
    """Transports to the sync, OPRF and RP services for one command."""

    def __init__(self, cfg: CliConfig):
        self.cfg = cfg
        self._stack = contextlib.ExitStack()
        self._local: dict[str, object] = {}
        self.transports: dict[str, object] = {}

    def __enter__(self) -> "Services":
        return self

    def __exit__(self, *exc) -> None:
        self._stack.close()
        self._save()

    def _dir(self) -> Path:
        d = self.cfg.services
        d.mkdir(parents=True, exist_ok=True)
        return d

    def _seal_key(self) -> bytes:
        path = self._dir() / "oprf-seal.key"
        if not path.exists():
            path.write_bytes(os.urandom(32))
            path.chmod(0o600)
        return path.read_bytes()

    def local(self, name: str):
        if name in self._local:
            return self._local[name]
        d = self._dir()
        if name == "sync":
            svc = SyncServer.load(d / "sync.json")
        elif name == "oprf":
            path = d / "oprf.vfao"
            limiter = RateLimiter(limit=self.cfg.oprf_rate_limit)
            svc = OprfServer.load(path, self._seal_key(), limiter=limiter) if path.exists() else OprfServer(limiter=limiter)
        elif name == "rp":
            path = d / "rp.json"
            svc = RpService.from_state(json.loads(path.read_text())) if path.exists() else RpService()
            svc.default_require_qes = self.cfg.rp_require_qes
            for rp in svc.parties.values():
                rp.require_qes = self.cfg.rp_require_qes
        else:
            raise KeyError(name)
        self._local[name] = svc
        return svc

    def _save(self) -> None:
        d = self.cfg.services
        if "oprf" in self._local:
            self._local["oprf"].save(d / "oprf.vfao", self._seal_key())
        if "rp" in self._local:
            (d / "rp.json").write_text(json.dumps(self._local["rp"].to_state(), sort_keys=True))

    def transport(self, name: str):
        if name in self.transports:
            return self.transports[name]
        url = getattr(self.cfg, f"{name}_url")
        if url:
            t = HttpTransport(url)
        elif self.cfg.live:
            server = self._stack.enter_context(LoopbackServer(self.local(name)))
            t = HttpTransport(server.url)
        else:
            t = InProcessTransport(self.local(name))
        self.transports[name] = t
        return t


# -- device state -------------------------------------------------------------------

class DeviceState:
    def __init__(self, cfg: CliConfig):
        self.cfg = cfg
        self.path = cfg.state / DEVICE_FILE

    def load(self) -> dict:
        if not self.path.exists():
            return {}
        return json.loads(self.path.read_text())

    def save(self, data: dict) -> None:
        self.cfg.state.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_name(self.path.name + ".tmp")
        tmp.write_text(json.dumps(data, sort_keys=True, indent=2))
        os.replace(tmp, self.path)

    def credential(self) -> SyncCredential:
        data = self.load()
        if "sync_credential" not in data:
            cred = SyncCredential.generate(self.cfg.user_id)
            data["sync_credential"] = cred.to_json()
            self.save(data)
        return SyncCredential.from_json(data["sync_credential"])

    def update(self, **changes) -> None:
        data = self.load()
        data.update(changes)
        self.save(data)


@dataclass
class Session:
    token: object
    session: object
    unlocked: cred_store.UnlockedStore | None = None


def open_token(cfg: CliConfig, pin: str):
    if not cfg.token_file.exists():
        raise NotFound(f"no token at {cfg.token_file}; run enroll first")
    token = soft_token.load_token(cfg.token_file)
    try:
        return token, soft_token.open_session(token, pin)
    finally:
        # Retry counters must survive failed attempts.
        soft_token.save_token(token, cfg.token_file)


def _oprf_client(cfg: CliConfig, services: Services, uv_pin: str | None) -> OprfClient:
    if uv_pin is None:
        raise UsageError("hardened mode needs --uv-pin")
    return OprfClient(services.transport("oprf"), DeviceState(cfg).credential(), uv_pin, cfg.pin_kdf)


def _check_mode(cfg: CliConfig, store: cred_store.EncryptedStore, explicit: bool) -> None:
    if explicit and store.mode != cfg.store_mode:
        raise ModeMismatch(
            f"store was enrolled as {store.mode.name.lower()}; mode cannot change without re-enrollment"
        )


def unlock_device(cfg: CliConfig, services: Services, args) -> Session:
    token, session = open_token(cfg, args.pin)
    store = cred_store.load_store(cfg.store_file)
    _check_mode(cfg, store, getattr(args, "mode_explicit", False))
    oprf = _oprf_client(cfg, services, args.uv_pin) if store.mode == StoreMode.HARDENED else None
    return Session(token, session, cred_store.unlock(token, session, store, oprf))


def _persist_to(cfg: CliConfig):
    return lambda store: cred_store.save_store(store, cfg.store_file)


# -- commands --------------------------------------------------------------------------

def cmd_enroll(cfg: CliConfig, args, services: Services) -> dict:
    if cfg.store_file.exists():
        raise StoreExists(f"a store already exists at {cfg.store_file}")
    cfg.state.mkdir(parents=True, exist_ok=True)
    if cfg.token_file.exists():
        token, session = open_token(cfg, args.pin)
        created = False
    else:
        if args.puk is None:
            raise UsageError("--puk is required to create a token")
        seed = bytes.fromhex(args.seed) if args.seed else os.urandom(32)
        token = soft_token.token_create(args.pin, args.puk, seed, kdf=cfg.pin_kdf)
        session = soft_token.open_session(token, args.pin)
        created = True
    oprf = None
    if cfg.store_mode == StoreMode.HARDENED:
        if args.uv_pin is None:
            raise UsageError("hardened enrollment needs --uv-pin")
        if args.uv_pin == args.pin:
            raise UsageError("the verification PIN must differ from the token PIN")
        oprf = _oprf_client(cfg, services, args.uv_pin)
    unlocked = device.enroll(token, session, cfg.store_mode, oprf)
    # Written only after the OPRF handshake succeeded.
    if created:
        soft_token.save_token(token, cfg.token_file)
    cred_store.save_store(unlocked.backing, cfg.store_file)
    DeviceState(cfg).credential()
    if not cfg.rp_url:
        services.local("rp").trust_token_key(soft_token.token_public_key(token))
    return {
        "message": f"enrolled {cfg.mode} store {unlocked.backing.store_id.hex()}",
        "mode": cfg.mode,
        "store_id": unlocked.backing.store_id.hex(),
        "records": 0,
        "token_created": created,
    }


def cmd_unlock(cfg: CliConfig, args, services: Services) -> dict:
    s = unlock_device(cfg, services, args)
    if args.ctap_stdio:
        auth = Authenticator(s.unlocked, persist=_persist_to(cfg))
        handled = auth.serve_stdio()
        return {"message": f"served {handled} CTAP requests", "requests": handled}
    rps = sorted({r.rp_id for r in s.unlocked.plaintext})
    return {
        "message": f"unlocked: {len(s.unlocked)} credentials",
        "credentials": len(s.unlocked),
        "rp_ids": rps,
        "mode": s.unlocked.backing.mode.name.lower(),
    }


def cmd_register(cfg: CliConfig, args, services: Services) -> dict:
    s = unlock_device(cfg, services, args)
    auth = Authenticator(s.unlocked, persist=_persist_to(cfg))
    rp = webauthn.RpClient(services.transport("rp"))
    gate = False if args.no_qes else None
    reg = webauthn.register(auth, rp, args.rp_id, args.user, s.token, s.session, run_qes_gate=gate)
    return {
        "message": f"registered at {reg.rp_id}: credential {b64url(reg.credential_id)} accepted",
        "rp_id": reg.rp_id,
        "credential_id": b64url(reg.credential_id),
        "accepted": True,
    }


def cmd_assert(cfg: CliConfig, args, services: Services) -> dict:
    s = unlock_device(cfg, services, args)
    auth = Authenticator(s.unlocked, persist=_persist_to(cfg))
    rp = webauthn.RpClient(services.transport("rp"))
    login = webauthn.authenticate(auth, rp, args.rp_id)
    return {
        "message": f"assertion accepted by {login.rp_id} (counter {login.counter})",
        "rp_id": login.rp_id,
        "credential_id": b64url(login.credential_id),
        "counter": login.counter,
        "accepted": True,
    }


def cmd_delete(cfg: CliConfig, args, services: Services) -> dict:
    s = unlock_device(cfg, services, args)
    store = cred_store.delete_credential(s.unlocked.master, s.unlocked.backing, unb64url(args.credential_id))
    cred_store.save_store(store, cfg.store_file)
    return {"message": f"deleted {args.credential_id}", "credentials": len(store.records)}


def _sync_client(cfg: CliConfig, services: Services) -> SyncClient:
    client = SyncClient(services.transport("sync"), DeviceState(cfg).credential())
    client.last_version = DeviceState(cfg).load().get("server_version", 0)
    return client


def cmd_sync(cfg: CliConfig, args, services: Services) -> dict:
    s = unlock_device(cfg, services, args)
    client = _sync_client(cfg, services)
    oprf = _oprf_client(cfg, services, args.uv_pin) if s.unlocked.backing.mode == StoreMode.HARDENED else None
    if args.direction == "push":
        version = device.push(s.token, s.session, client, s.unlocked, oprf_client=oprf)
    else:
        version = device.pull(s.token, s.session, client, s.unlocked, oprf_client=oprf)
    cred_store.save_store(s.unlocked.backing, cfg.store_file)
    DeviceState(cfg).update(server_version=version)
    return {
        "message": f"{args.direction}: server at version {version}, {len(s.unlocked)} credentials",
        "server_version": version,
        "credentials": len(s.unlocked),
    }


def cmd_device_add(cfg: CliConfig, args, services: Services) -> dict:
    if cfg.store_file.exists():
        raise StoreExists(f"a store already exists at {cfg.store_file}")
    if not args.seed:
        raise UsageError("--seed of the shared token is required")
    src = json.loads(Path(args.from_device).read_text()) if args.from_device else {}
    if "sync_credential" not in src:
        raise UsageError("--from-device must name the first device's device.json")
    cfg.state.mkdir(parents=True, exist_ok=True)
    DeviceState(cfg).save({"sync_credential": src["sync_credential"]})
    if cfg.token_file.exists():
        token, session = open_token(cfg, args.pin)
    else:
        if args.puk is None:
            raise UsageError("--puk is required to instantiate the token")
        token = soft_token.token_create(args.pin, args.puk, bytes.fromhex(args.seed), kdf=cfg.pin_kdf)
        session = soft_token.open_session(token, args.pin)
    client = _sync_client(cfg, services)
    data, version = client.pull_store()
    store = cred_store.loads_store(data)
    oprf = _oprf_client(cfg, services, args.uv_pin) if store.mode == StoreMode.HARDENED else None
    unlocked = cred_store.unlock(token, session, store, oprf)
    soft_token.save_token(token, cfg.token_file)
    cred_store.save_store(unlocked.backing, cfg.store_file)
    DeviceState(cfg).update(server_version=version)
    return {
        "message": f"device onboarded with {len(unlocked)} credentials",
        "credentials": len(unlocked),
        "server_version": version,
    }


def cmd_rotate(cfg: CliConfig, args, services: Services) -> dict:
    s = unlock_device(cfg, services, args)
    oprf = _oprf_client(cfg, services, args.uv_pin) if s.unlocked.backing.mode == StoreMode.HARDENED else None
    rotated = device.rotate(s.token, s.session, s.unlocked, oprf)
    cred_store.save_store(rotated.backing, cfg.store_file)
    return {
        "message": f"rotated master key; {len(rotated)} credentials re-sealed",
        "credentials": len(rotated),
        "path": "oprf" if rotated.backing.mode == StoreMode.HARDENED else "wrapped",
    }


def simulate_attack(
    variant: str,
    credentials: int = 3,
    guesses: int = 1000,
    output_guesses: int = 1024,
    rate_limit: int = 10,
    steal_oprf_key: bool = False,
    true_pin_position: int | None = None,
    kdf=FAST_KDF,
    patience: int = 0,
) -> attack.AttackReport:
    """Build a victim device, register credentials, then run the adversary."""
    token_pin, uv_pin = "4321", "271828"
    token = soft_token.token_create(token_pin, "87654321", os.urandom(32), kdf=kdf)
    session = soft_token.open_session(token, token_pin)
    clock = SimulatedClock()
    server = OprfServer(limiter=RateLimiter(limit=rate_limit, clock=clock), clock=clock)
    cred = SyncCredential.generate("victim")
    mode = StoreMode.HARDENED if variant == "hardened" else StoreMode.BASELINE
    oprf = OprfClient(InProcessTransport(server), cred, uv_pin, kdf) if mode == StoreMode.HARDENED else None
    unlocked = device.enroll(token, session, mode, oprf)
    rp = RpService(clock=clock)
    auth = Authenticator(unlocked)
    rp_client = webauthn.RpClient(InProcessTransport(rp))
    for i in range(credentials):
        webauthn.register(auth, rp_client, f"site{i}.example", "victim")
    clock.advance(3600)  # the adversary shows up later, with a fresh rate-limit window
    store_bytes = cred_store.dumps_store(unlocked.backing)
    soft_token.close_session(token, session)

    if mode == StoreMode.BASELINE:
        return attack.attack_baseline(token, token_pin, store_bytes)
    pins = attack.pin_guess_list(guesses, exclude=uv_pin)
    if true_pin_position is not None:
        pins.insert(min(true_pin_position, len(pins)), uv_pin)
    # The adversary's own OPRF client: same account as the victim, worst case.
    adversary = OprfClient(InProcessTransport(server), cred, "", kdf)
    return attack.attack_hardened(
        token,
        token_pin,
        store_bytes,
        oprf_client=adversary,
        pin_guesses=pins,
        output_guesses=output_guesses,
        kdf=kdf,
        patience=patience,
        clock=clock,
        stolen_oprf_key=server.key(None) if steal_oprf_key else None,
    )


def cmd_attack_demo(cfg: CliConfig, args, services: Services) -> dict:
    variant = args.variant or cfg.mode
    if args.use_state:
        store_bytes = cfg.store_file.read_bytes()
        token = soft_token.load_token(cfg.token_file)
        if variant == "baseline":
            report = attack.attack_baseline(token, args.pin, store_bytes)
        else:
            pins = attack.pin_guess_list(args.guesses, exclude=args.exclude_pin or "")
            adversary = OprfClient(services.transport("oprf"), DeviceState(cfg).credential(), "", cfg.pin_kdf)
            report = attack.attack_hardened(
                token, args.pin, store_bytes, oprf_client=adversary, pin_guesses=pins,
                output_guesses=args.output_guesses, kdf=cfg.pin_kdf,
            )
        soft_token.save_token(token, cfg.token_file)
    else:
        report = simulate_attack(
            variant,
            credentials=args.credentials,
            guesses=args.guesses,
            output_guesses=args.output_guesses,
            rate_limit=args.rate_limit,
            steal_oprf_key=args.steal_oprf_key,
            true_pin_position=args.true_pin_at,
        )
    out = report.to_json()
    out["message"] = report.summary()
    return out


def cmd_bench(cfg: CliConfig, args, services: Services) -> dict:
    hardened = None
    if args.hardened:
        token = soft_token.token_create("1234", "12345678", os.urandom(32), kdf=FAST_KDF)
        session = soft_token.open_session(token, "1234")
        server = OprfServer(limiter=RateLimiter(limit=10**9))
        stack = contextlib.ExitStack()
        http = stack.enter_context(LoopbackServer(server)) if cfg.live or args.loopback else None
        transport = HttpTransport(http.url) if http else InProcessTransport(server)
        oprf = OprfClient(transport, SyncCredential.generate("bench"), "271828", DEFAULT_PIN_KDF)
        unlocked = device.enroll(token, session, StoreMode.HARDENED, oprf)
        store = unlocked.backing
        hardened = lambda: cred_store.unlock(token, session, store, oprf)  # noqa: E731
    else:
        stack = contextlib.ExitStack()
    with stack:
        report = run_bench(args.n, live=cfg.live or args.loopback, hardened_unlock=hardened)
    out = report.to_json()
    out["message"] = report.format_table()
    return out


def cmd_serve(cfg: CliConfig, args, services: Services) -> dict:
    svc = services.local(args.service)
    server = LoopbackServer(svc, host=args.host, port=args.port)
    print(f"serving {args.service} on {server.url}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.httpd.server_close()
    return {"message": f"{args.service} server stopped"}


# -- argument parsing -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vfa", description="Virtual FIDO2 authenticator harness")
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--state-dir", help="device state directory")
    p.add_argument("--services-dir", help="directory of the file-backed local services")
    p.add_argument("--mode", choices=["baseline", "hardened"])
    p.add_argument("--user-id")
    p.add_argument("--fast-kdf", action="store_true", help="cheap scrypt parameters (tests and demos)")
    p.add_argument("--rp-require-qes", action="store_true", default=None)
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.add_argument("--live", action="store_true", default=None, help="use loopback HTTP instead of in-process calls")
    sub = p.add_subparsers(dest="command", required=True)

    def pins(sp, puk=False):
        sp.add_argument("--pin", default=os.environ.get("VFA_PIN"), help="token PIN (or $VFA_PIN)")
        sp.add_argument("--uv-pin", default=os.environ.get("VFA_UV_PIN"), help="verification PIN for hardened stores")
        if puk:
            sp.add_argument("--puk", default=os.environ.get("VFA_PUK"))

    sp = sub.add_parser("enroll", help="create a token (if needed) and an empty store")
    pins(sp, puk=True)
    sp.add_argument("--seed", help="hex token seed (to recreate the same token elsewhere)")
    sp.set_defaults(func=cmd_enroll)

    sp = sub.add_parser("unlock", help="unlock the store and report, or serve CTAP over stdio")
    pins(sp)
    sp.add_argument("--ctap-stdio", action="store_true")
    sp.set_defaults(func=cmd_unlock)

    sp = sub.add_parser("register", help="WebAuthn registration against the RP")
    pins(sp)
    sp.add_argument("--rp-id", required=True)
    sp.add_argument("--user", default="user")
    sp.add_argument("--no-qes", action="store_true", help="skip the QES enrollment gate")
    sp.set_defaults(func=cmd_register)

    sp = sub.add_parser("assert", help="WebAuthn login against the RP")
    pins(sp)
    sp.add_argument("--rp-id", required=True)
    sp.set_defaults(func=cmd_assert)

    sp = sub.add_parser("delete", help="delete a credential (propagates via sync)")
    pins(sp)
    sp.add_argument("--credential-id", required=True)
    sp.set_defaults(func=cmd_delete)

    sp = sub.add_parser("sync", help="push or pull the encrypted store")
    pins(sp)
    sp.add_argument("direction", choices=["push", "pull"])
    sp.set_defaults(func=cmd_sync)

    sp = sub.add_parser("device-add", help="onboard this state dir as a second device")
    pins(sp, puk=True)
    sp.add_argument("--seed", help="hex seed of the shared token")
    sp.add_argument("--from-device", help="device.json of an enrolled device (sync credential)")
    sp.set_defaults(func=cmd_device_add)

    sp = sub.add_parser("rotate", help="re-seal the store under a fresh master key")
    pins(sp)
    sp.set_defaults(func=cmd_rotate)

    sp = sub.add_parser("attack-demo", help="cross-protocol attack demonstration")
    sp.add_argument("--variant", choices=["baseline", "hardened"])
    sp.add_argument("--credentials", type=int, default=3)
    sp.add_argument("--guesses", type=int, default=1000)
    sp.add_argument("--output-guesses", type=int, default=1024)
    sp.add_argument("--rate-limit", type=int, default=10)
    sp.add_argument("--steal-oprf-key", action="store_true")
    sp.add_argument("--true-pin-at", type=int, help="insert the true PIN at this guess position")
    sp.add_argument("--use-state", action="store_true", help="attack the enrolled store instead of a simulated victim")
    sp.add_argument("--pin", default=os.environ.get("VFA_PIN"), help="token PIN seen by the foreign application")
    sp.add_argument("--exclude-pin", help="verification PIN to keep out of the guess list")
    sp.set_defaults(func=cmd_attack_demo)

    sp = sub.add_parser("bench", help="latency benchmark")
    sp.add_argument("--n", type=int, default=1000)
    sp.add_argument("--hardened", action="store_true", help="add the hardened unlock row")
    sp.add_argument("--loopback", action="store_true", help="serve sync and OPRF over loopback HTTP")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("serve", help="run a local service over HTTP")
    sp.add_argument("service", choices=["sync", "oprf", "rp"])
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8700)
    sp.set_defaults(func=cmd_serve)
    return p


def _emit(payload: dict, as_json: bool, stream) -> None:
    if as_json:
        stream.write(json.dumps(payload, sort_keys=True, default=str) + "\n")
    else:
        stream.write(str(payload.get("message", "")) + "\n")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.mode_explicit = args.mode is not None
    try:
        overrides = {
            "state_dir": args.state_dir,
            "services_dir": args.services_dir,
            "mode": args.mode,
            "user_id": args.user_id,
            "kdf": "fast" if args.fast_kdf else None,
            "rp_require_qes": args.rp_require_qes,
            "live": args.live,
        }
        cfg = load_config(args.config, overrides)
        if args.command != "attack-demo" and getattr(args, "pin", "") is None:
            raise UsageError("--pin is required")
        with Services(cfg) as services:
            result = args.func(cfg, args, services)
    except VfaError as exc:
        _emit(
            {"ok": False, "error": type(exc).__name__, "message": f"error: {exc}", "exit_code": exc.exit_code},
            args.json,
            sys.stdout if args.json else sys.stderr,
        )
        return exc.exit_code
    _emit({"ok": True, **result}, args.json, sys.stdout)
    return 0


if __name__ == "__main__":
    sys.exit(main())
