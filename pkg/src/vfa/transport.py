"""Request/response plumbing shared by the sync, OPRF and RP services.

A service exposes ``handle(method, path, headers, body) -> Response``. The
same object can be driven in-process (deterministic tests) or mounted on a
loopback HTTP server.
"""

from __future__ import annotations

import json
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Protocol

from .errors import TransportError, VfaError, revive


@dataclass
class Response:
    status: int
    headers: dict[str, str] = field(default_factory=dict)
    body: bytes = b""

    def json(self):
        return json.loads(self.body.decode("utf-8"))


class Service(Protocol):
    def handle(self, method: str, path: str, headers: dict[str, str], body: bytes) -> Response:
        ...


class Transport(Protocol):
    def request(self, method: str, path: str, headers: dict[str, str] | None = None, body: bytes = b"") -> Response:
        ...


def json_response(status: int, obj, headers: dict[str, str] | None = None) -> Response:
    hdrs = {"content-type": "application/json"}
    hdrs.update(headers or {})
    return Response(status, hdrs, json.dumps(obj, sort_keys=True).encode("utf-8"))


def error_response(exc: VfaError, headers: dict[str, str] | None = None) -> Response:
    body = {"error": type(exc).__name__, "message": str(exc)}
    for attr in ("retries_remaining", "current_version"):
        if hasattr(exc, attr):
            body[attr] = getattr(exc, attr)
    return json_response(exc.http_status, body, headers)


def raise_for_error(resp: Response) -> None:
    if resp.status < 400:
        return
    try:
        obj = resp.json()
        name, message = obj["error"], obj.get("message", "")
    except Exception:
        raise TransportError(f"HTTP {resp.status}") from None
    extra = {k: v for k, v in obj.items() if k not in ("error", "message")}
    raise revive(name, message, **extra)


class InProcessTransport:
    def __init__(self, service: Service):
        self.service = service

    def request(self, method, path, headers=None, body=b""):
        hdrs = {k.lower(): v for k, v in (headers or {}).items()}
        return self.service.handle(method.upper(), path, hdrs, bytes(body))


class HttpTransport:
    def __init__(self, base_url: str, timeout: float = 10.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def request(self, method, path, headers=None, body=b""):
        req = urllib.request.Request(
            self.base_url + path,
            data=body if method.upper() in ("PUT", "POST") else None,
            method=method.upper(),
            headers=headers or {},
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as r:
                return Response(r.status, {k.lower(): v for k, v in r.headers.items()}, r.read())
        except urllib.error.HTTPError as e:
            return Response(e.code, {k.lower(): v for k, v in e.headers.items()}, e.read())
        except (urllib.error.URLError, OSError) as e:
            raise TransportError(f"cannot reach {self.base_url}: {e}") from e


class UnreachableTransport:
    """Stands in for a service that is down."""

    def request(self, method, path, headers=None, body=b""):
        raise TransportError("service unreachable")


def _handler_for(service: Service):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def _dispatch(self):
            length = int(self.headers.get("Content-Length") or 0)
            body = self.rfile.read(length) if length else b""
            hdrs = {k.lower(): v for k, v in self.headers.items()}
            try:
                resp = service.handle(self.command, self.path, hdrs, body)
            except VfaError as exc:
                resp = error_response(exc)
            self.send_response(resp.status)
            for k, v in resp.headers.items():
                self.send_header(k, v)
            self.send_header("Content-Length", str(len(resp.body)))
            self.end_headers()
            self.wfile.write(resp.body)

        do_GET = do_PUT = do_POST = do_DELETE = _dispatch

        def log_message(self, fmt, *args):
            pass

    return Handler


class LoopbackServer:
    """A ThreadingHTTPServer bound to 127.0.0.1 serving one service."""

    def __init__(self, service: Service, host: str = "127.0.0.1", port: int = 0):
        self.httpd = ThreadingHTTPServer((host, port), _handler_for(service))
        self.httpd.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "LoopbackServer":
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self.httpd.serve_forever()

    def stop(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
