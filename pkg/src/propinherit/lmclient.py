"""Scoring against a model server over a small JSON protocol.

``POST /v1/score`` with ``{"prompt": str, "continuations": [str]}`` returns
``{"logprobs": [float], "model": str}``.  :class:`RemoteScorer` plugs into
:func:`propinherit.behave.evaluate`; :class:`LoopbackServer` serves a toy
model (or a scripted table) on localhost for testing.
"""

from __future__ import annotations

import json
import math
import os
import threading
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Sequence

DEFAULT_VARIANTS = ("Yes", " Yes", "No", " No")
PATH = "/v1/score"


class LMClientError(RuntimeError):
    pass


class TransientError(LMClientError):
    """Timeouts, refused connections and 5xx responses; retried."""


class ProtocolError(LMClientError):
    """The server answered, but not with a valid score response."""


class PermanentHTTPError(LMClientError):
    def __init__(self, status: int, body: str):
        super().__init__(f"HTTP {status}: {body[:200]}")
        self.status = status


@dataclass(frozen=True)
class RetryPolicy:
    max_retries: int = 3
    backoff_base: float = 0.1
    max_backoff: float = 5.0
    timeout: float = 30.0

    def delay(self, attempt: int) -> float:
        return min(self.max_backoff, self.backoff_base * 2**attempt)

    @classmethod
    def from_env(cls, env=None) -> "RetryPolicy":
        env = os.environ if env is None else env
        d = cls()
        return cls(
            max_retries=int(env.get("PROPINHERIT_MAX_RETRIES", d.max_retries)),
            backoff_base=float(env.get("PROPINHERIT_BACKOFF", d.backoff_base)),
            max_backoff=d.max_backoff,
            timeout=float(env.get("PROPINHERIT_TIMEOUT", d.timeout)),
        )


@dataclass(frozen=True)
class ScoreRequest:
    prompt: str
    continuations: tuple[str, ...]

    def to_json(self) -> bytes:
        return json.dumps({"prompt": self.prompt, "continuations": list(self.continuations)}).encode()


@dataclass(frozen=True)
class ScoreResponse:
    logprobs: tuple[float, ...]
    model: str
    latency: float = 0.0

    @classmethod
    def parse(cls, raw: bytes, n: int, latency: float = 0.0) -> "ScoreResponse":
        try:
            body = json.loads(raw)
        except (ValueError, UnicodeDecodeError) as exc:
            raise ProtocolError(f"response is not JSON: {exc}") from None
        if not isinstance(body, dict) or "logprobs" not in body or "model" not in body:
            raise ProtocolError("response must be an object with 'logprobs' and 'model'")
        lps, model = body["logprobs"], body["model"]
        if not isinstance(lps, list) or not isinstance(model, str):
            raise ProtocolError("'logprobs' must be a list and 'model' a string")
        if len(lps) != n:
            raise ProtocolError(f"expected {n} logprobs, got {len(lps)}")
        for v in lps:
            if isinstance(v, bool) or not isinstance(v, (int, float)) or math.isnan(v):
                raise ProtocolError(f"logprob {v!r} is not a number")
            if v > 0:
                raise ProtocolError(f"logprob {v!r} is positive")
        return cls(tuple(float(v) for v in lps), model, latency)


def score(endpoint: str, request: ScoreRequest, policy: RetryPolicy = RetryPolicy(),
          token: str | None = None, sleep: Callable[[float], None] = time.sleep) -> ScoreResponse:
    """One scoring call with retries on transient failures."""
    if not request.continuations:
        raise ValueError("at least one continuation is required")
    url = endpoint.rstrip("/") + PATH
    headers = {"Content-Type": "application/json"}
    if token:
        headers["Authorization"] = f"Bearer {token}"
    data = request.to_json()
    last: Exception | None = None
    for attempt in range(policy.max_retries + 1):
        if attempt:
            sleep(policy.delay(attempt - 1))
        t0 = time.perf_counter()
        try:
            req = urllib.request.Request(url, data=data, headers=headers, method="POST")
            with urllib.request.urlopen(req, timeout=policy.timeout) as resp:
                raw = resp.read()
        except urllib.error.HTTPError as exc:
            body = exc.read().decode("utf-8", "replace")
            if 400 <= exc.code < 500:
                raise PermanentHTTPError(exc.code, body) from None
            last = TransientError(f"HTTP {exc.code}: {body[:200]}")
            continue
        except (urllib.error.URLError, TimeoutError, ConnectionError, OSError) as exc:
            last = TransientError(str(exc))
            continue
        return ScoreResponse.parse(raw, len(request.continuations), time.perf_counter() - t0)
    raise TransientError(f"giving up after {policy.max_retries + 1} attempts: {last}")


class RemoteScorer:
    """A :class:`~propinherit.behave.Scorer` backed by a score endpoint.

    Up to ``max_in_flight`` requests run concurrently; results come back in
    prompt order.
    """

    def __init__(self, endpoint: str, policy: RetryPolicy = RetryPolicy(), token: str | None = None,
                 max_in_flight: int = 4):
        if max_in_flight < 1:
            raise ValueError("max_in_flight must be at least 1")
        self.endpoint = endpoint
        self.policy = policy
        self.token = token
        self.max_in_flight = max_in_flight
        self.model_id: str | None = None

    @classmethod
    def from_env(cls, endpoint: str | None = None, env=None) -> "RemoteScorer":
        env = os.environ if env is None else env
        endpoint = endpoint or env.get("PROPINHERIT_ENDPOINT")
        if not endpoint:
            raise LMClientError("no endpoint given and PROPINHERIT_ENDPOINT is unset")
        return cls(endpoint, RetryPolicy.from_env(env), env.get("PROPINHERIT_TOKEN"),
                   int(env.get("PROPINHERIT_MAX_IN_FLIGHT", 4)))

    def __call__(self, prompts: Sequence[str], continuations: Sequence[str]) -> list[dict[str, float]]:
        conts = tuple(continuations)

        def one(p: str) -> ScoreResponse:
            return score(self.endpoint, ScoreRequest(p, conts), self.policy, self.token)

        with ThreadPoolExecutor(self.max_in_flight) as pool:
            responses = list(pool.map(one, prompts))
        if responses:
            self.model_id = responses[0].model
        return [dict(zip(conts, r.logprobs)) for r in responses]


# ---------------------------------------------------------------- loopback server

Handler = Callable[[str, list], tuple[int, object]]


def model_handler(model, name: str = "toy") -> Handler:
    """Serve next-token logprobs of a toy model.  Continuations are matched
    to vocabulary tokens after stripping surrounding whitespace."""
    from .nanolm import VocabularyError, next_token_logprobs

    def handle(prompt: str, continuations: list) -> tuple[int, object]:
        try:
            ids = [model.tokenizer.id(c.strip()) for c in continuations]
            lp = next_token_logprobs(model, model.encode(prompt))
        except (VocabularyError, ValueError) as exc:
            return 400, {"error": str(exc)}
        return 200, {"logprobs": [float(lp[i]) for i in ids], "model": name}

    return handle


def table_handler(table: dict[str, dict[str, float]], name: str = "scripted") -> Handler:
    """Serve fixed logprobs: ``table[prompt][continuation]``."""

    def handle(prompt: str, continuations: list) -> tuple[int, object]:
        if prompt not in table:
            return 404, {"error": "unknown prompt"}
        return 200, {"logprobs": [table[prompt][c] for c in continuations], "model": name}

    return handle


class LoopbackServer:
    """Threaded HTTP server on 127.0.0.1 running ``handler``.

    ``faults`` is a list consumed one entry per request before the handler
    runs: an int status to return instead, the string ``"garbage"`` for a
    non-JSON body, or ``None`` to pass through.
    """

    def __init__(self, handler: Handler, faults: Sequence | None = None, port: int = 0):
        self.handler = handler
        self.faults = list(faults or [])
        self.requests = 0
        self._lock = threading.Lock()
        outer = self

        class _H(BaseHTTPRequestHandler):
            def log_message(self, *a):
                pass

            def _send(self, status: int, payload: bytes):
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

            def do_POST(self):
                n = int(self.headers.get("Content-Length", 0))
                raw = self.rfile.read(n)
                with outer._lock:
                    outer.requests += 1
                    fault = outer.faults.pop(0) if outer.faults else None
                if self.path != PATH:
                    return self._send(404, b'{"error": "not found"}')
                if fault == "garbage":
                    return self._send(200, b"<html>")
                if isinstance(fault, int):
                    return self._send(fault, b'{"error": "injected"}')
                try:
                    body = json.loads(raw)
                    prompt, conts = body["prompt"], body["continuations"]
                except (ValueError, KeyError, TypeError):
                    return self._send(400, b'{"error": "bad request"}')
                status, out = outer.handler(prompt, conts)
                self._send(status, json.dumps(out).encode())

        self._server = ThreadingHTTPServer(("127.0.0.1", port), _H)
        self._server.daemon_threads = True
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def endpoint(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "LoopbackServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self) -> "LoopbackServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
