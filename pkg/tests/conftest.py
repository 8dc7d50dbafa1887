from __future__ import annotations

import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from vfa import cred_store, soft_token  # noqa: E402
from vfa.auth import SyncCredential  # noqa: E402
from vfa.clock import SimulatedClock  # noqa: E402
from vfa.ctap import Authenticator  # noqa: E402
from vfa.kdf import FAST_KDF  # noqa: E402
from vfa.key_hierarchy import derive_master_baseline  # noqa: E402
from vfa.oprf import OprfClient, OprfServer, RateLimiter  # noqa: E402
from vfa.relying_party import RpService  # noqa: E402
from vfa.client import RpClient  # noqa: E402
from vfa.transport import InProcessTransport  # noqa: E402

# RSA keygen from a seed is the slow step; a handful of fixed seeds keeps it cached.
SEED_A = bytes(range(32))
SEED_B = bytes(range(1, 33))
PIN = "1234"
PUK = "12345678"
UV_PIN = "271828"


def make_token(seed: bytes = SEED_A, pin: str = PIN, puk: str = PUK):
    return soft_token.token_create(pin, puk, seed, kdf=FAST_KDF)


@pytest.fixture
def token():
    return make_token()


@pytest.fixture
def session(token):
    return soft_token.open_session(token, PIN)


@pytest.fixture
def unlocked(token, session):
    master = derive_master_baseline(token, session)
    return cred_store.open_with(master, cred_store.new_store())


@pytest.fixture
def clock():
    return SimulatedClock()


@pytest.fixture
def rp_service(clock):
    return RpService(clock=clock)


@pytest.fixture
def rp_client(rp_service):
    return RpClient(InProcessTransport(rp_service))


@pytest.fixture
def authenticator(unlocked):
    return Authenticator(unlocked)


@pytest.fixture
def oprf_server(clock):
    return OprfServer(limiter=RateLimiter(limit=10_000, clock=clock), clock=clock)


@pytest.fixture
def oprf_client(oprf_server):
    return OprfClient(InProcessTransport(oprf_server), SyncCredential.generate("alice"), UV_PIN, FAST_KDF)


@pytest.fixture
def rng_bytes():
    return os.urandom
