"""Latency benchmark for the four operations of the reference latency table."""

from __future__ import annotations

import os
import platform
import statistics
import time
from dataclasses import dataclass, field

from . import cred_store, soft_token
from .auth import SyncCredential
from .ctap import GetAssertionParams, MakeCredentialParams, get_assertion, make_credential
from .errors import InvalidParameter
from .kdf import FAST_KDF
from .key_hierarchy import DEFAULT_LABEL, derive_master_baseline
from .sync import SyncClient, SyncServer
from .transport import HttpTransport, InProcessTransport, LoopbackServer

MIN_RUNS = 100

# Hardware-token and WAN figures the measurements are set against.
REFERENCE_MS = {
    "token_sign": (42.0, 5.2),
    "make_credential": (15.0, 1.1),
    "get_assertion": (7.0, 0.9),
    "sync_pull": (220.0, 21.0),
}
NOTES = {
    "token_sign": "software token, not comparable to the 42 ms hardware figure",
    "sync_pull": "loopback transport, no WAN latency",
}


@dataclass(frozen=True)
class BenchRow:
    name: str
    mean_ms: float
    std_ms: float
    reference_mean_ms: float | None = None
    reference_std_ms: float | None = None
    note: str = ""


@dataclass
class BenchReport:
    n: int
    rows: list[BenchRow]
    environment: dict[str, str] = field(default_factory=dict)

    def row(self, name: str) -> BenchRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "environment": self.environment,
            "rows": [r.__dict__ for r in self.rows],
        }

    def format_table(self) -> str:
        lines = [
            f"{'operation':<18}{'mean ms':>10}{'std ms':>10}{'ref mean':>10}{'ref std':>10}  note",
            "-" * 78,
        ]
        for r in self.rows:
            ref_m = "" if r.reference_mean_ms is None else f"{r.reference_mean_ms:.1f}"
            ref_s = "" if r.reference_std_ms is None else f"{r.reference_std_ms:.1f}"
            lines.append(f"{r.name:<18}{r.mean_ms:>10.3f}{r.std_ms:>10.3f}{ref_m:>10}{ref_s:>10}  {r.note}")
        lines.append(f"n = {self.n} runs per operation")
        lines.append(
            "Caveat: reference figures come from a USB qualified-signature token and a WAN object store;"
        )
        lines.append("this software token and loopback sync are not expected to reproduce them.")
        return "\n".join(lines)


def _timed(fn, n: int) -> tuple[float, float]:
    samples = []
    for _ in range(n):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1000.0)
    return statistics.fmean(samples), statistics.pstdev(samples)


def _row(name: str, stats: tuple[float, float]) -> BenchRow:
    ref = REFERENCE_MS.get(name, (None, None))
    return BenchRow(name, stats[0], stats[1], ref[0], ref[1], NOTES.get(name, ""))


def run_bench(
    n: int = 1000,
    token=None,
    session=None,
    live: bool = True,
    hardened_unlock=None,
) -> BenchReport:
    """Measure each operation ``n`` times.

    ``live`` serves the sync pull over a loopback HTTP server rather than an
    in-process transport. ``hardened_unlock`` is an optional zero-argument
    callable timed as an extra row (one OPRF round trip plus derivation).
    """
    if n < MIN_RUNS:
        raise InvalidParameter(f"at least {MIN_RUNS} runs are required")
    if token is None:
        token = soft_token.token_create("1234", "12345678", os.urandom(32), kdf=FAST_KDF)
        session = soft_token.open_session(token, "1234")
    digest = DEFAULT_LABEL.digest
    rows = [_row("token_sign", _timed(lambda: soft_token.sign_deterministic(token, session, digest), n))]

    master = derive_master_baseline(token, session)
    unlocked = cred_store.open_with(master, cred_store.new_store())
    mc = MakeCredentialParams(os.urandom(32), "bench.example", os.urandom(16), "bench")
    rows.append(_row("make_credential", _timed(lambda: make_credential(unlocked, mc), n)))

    # Assert against a store of realistic size rather than the n just created.
    small = cred_store.open_with(master, cred_store.new_store())
    for i in range(8):
        make_credential(small, MakeCredentialParams(os.urandom(32), f"rp{i}.example", os.urandom(16), "u"))
    ga = GetAssertionParams(os.urandom(32), "rp3.example")
    rows.append(_row("get_assertion", _timed(lambda: get_assertion(small, ga), n)))

    server = SyncServer()
    cred = SyncCredential.generate("bench")
    blob = cred_store.dumps_store(small.backing)
    if live:
        with LoopbackServer(server) as http:
            client = SyncClient(HttpTransport(http.url), cred)
            client.push_store(blob, 0)
            rows.append(_row("sync_pull", _timed(client.pull_store, n)))
    else:
        client = SyncClient(InProcessTransport(server), cred)
        client.push_store(blob, 0)
        rows.append(_row("sync_pull", _timed(client.pull_store, n)))

    if hardened_unlock is not None:
        runs = max(MIN_RUNS, min(n, 200))
        rows.append(
            BenchRow(
                "hardened_unlock",
                *_timed(hardened_unlock, runs),
                note=f"one OPRF round trip plus derivation, {runs} runs; no reference figure",
            )
        )

    env = {
        "python": platform.python_version(),
        "machine": platform.machine(),
        "platform": platform.platform(),
        "sync_transport": "loopback-http" if live else "in-process",
    }
    return BenchReport(n=n, rows=rows, environment=env)
