"""Response generators behind one interface: oracle, perturbed, remote.

The oracle reads the marked current step out of the rendered context and
echoes that step's reference call. The perturbed policy corrupts oracle
output with seeded, per-context-deterministic mutations for metric
sensitivity studies. The remote policy speaks a minimal prompt-in/text-out
JSON protocol over HTTP; a scriptable stub server implements the same
protocol for conformance tests.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import re
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any

import requests

from .agent import CURRENT_MARKER, oracle_response_text, parse_response
from .errors import (
    BadPayloadError,
    BadStatusError,
    EndpointUnreachableError,
    NoCurrentStepError,
    PortInUseError,
    RequestTimeoutError,
)
from .tools import ToolCall, ToolRegistry, default_registry

logger = logging.getLogger(__name__)

ENV_URL = "RUSS_LLM_URL"
ENV_TOKEN = "RUSS_LLM_TOKEN"

_CURRENT_STEP_RE = re.compile(
    r"^\[step (?P<index>\d+)\] " + re.escape(CURRENT_MARKER) + r" (?P<instruction>.*)$"
)
_REFERENCE_RE = re.compile(r"^\s+reference: (?P<json>\{.*\})$")


def _extract_current_step(context: str) -> tuple[int, str, ToolCall]:
    lines = context.splitlines()
    for i, line in enumerate(lines):
        m = _CURRENT_STEP_RE.match(line)
        if m is None:
            continue
        if i + 1 < len(lines):
            ref = _REFERENCE_RE.match(lines[i + 1])
            if ref is not None:
                obj = json.loads(ref.group("json"))
                call = ToolCall(tool=obj["tool"], args=dict(obj["args"]))
                return int(m.group("index")), m.group("instruction"), call
        raise NoCurrentStepError("current step has no reference line")
    raise NoCurrentStepError("context has no current-step marker")


class OraclePolicy:
    """Scripted policy: always emits the current step's reference call."""

    name = "oracle"

    def generate(self, context: str) -> str:
        index, instruction, call = _extract_current_step(context)
        return oracle_response_text(index, instruction, call)


@dataclass
class PerturbationConfig:
    p_wrong_tool: float = 0.0
    p_drop_required: float = 0.0
    p_extra_key: float = 0.0
    p_numeric_noise: float = 0.0
    numeric_noise_rel: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("p_wrong_tool", "p_drop_required", "p_extra_key", "p_numeric_noise"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")


class PerturbedPolicy:
    """Oracle output with seeded corruptions, deterministic per (context, cfg)."""

    name = "perturbed"

    def __init__(self, cfg: PerturbationConfig, registry: ToolRegistry | None = None):
        self.cfg = cfg
        self.registry = registry or default_registry()

    def _rng_for(self, context: str) -> random.Random:
        cfg = self.cfg
        key = (f"{cfg.seed}|{cfg.p_wrong_tool}|{cfg.p_drop_required}|{cfg.p_extra_key}|"
               f"{cfg.p_numeric_noise}|{cfg.numeric_noise_rel}|{context}")
        digest = hashlib.sha256(key.encode("utf-8")).digest()
        return random.Random(int.from_bytes(digest[:8], "big"))

    def generate(self, context: str) -> str:
        think, call = parse_response(OraclePolicy().generate(context))
        rng = self._rng_for(context)
        cfg = self.cfg
        tool = call.tool
        args = dict(call.args)

        if rng.random() < cfg.p_wrong_tool:
            others = [n for n in self.registry.names() if n != tool]
            tool = rng.choice(others)
        if rng.random() < cfg.p_drop_required:
            try:
                required = [p.name for p in self.registry.lookup(call.tool).required_params
                            if p.name in args]
            except Exception:
                required = []
            if required:
                del args[rng.choice(sorted(required))]
        if rng.random() < cfg.p_extra_key:
            args[f"spurious_{rng.randint(1, 999)}"] = rng.random()
        if rng.random() < cfg.p_numeric_noise:
            numeric = sorted(k for k, v in args.items()
                             if isinstance(v, (int, float)) and not isinstance(v, bool))
            if numeric:
                key = rng.choice(numeric)
                sign = 1.0 if rng.random() < 0.5 else -1.0
                args[key] = args[key] * (1.0 + sign * cfg.numeric_noise_rel)

        mutated = ToolCall(tool=tool, args=args)
        return f"<think>{think}</think><tool>{mutated.to_json()}</tool>"


@dataclass
class RemoteEndpointConfig:
    base_url: str
    token: str | None = None
    timeout: float = 30.0
    max_retries: int = 2
    backoff_base: float = 1.0  # backoff before retry n is backoff_base * 2**(n-1)
    max_tokens: int = 512

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")


class RemotePolicy:
    """HTTP client for the generate endpoint; retries network errors and 5xx."""

    name = "remote"

    def __init__(self, cfg: RemoteEndpointConfig, session: requests.Session | None = None):
        self.cfg = cfg
        self.session = session or requests.Session()

    def generate(self, context: str) -> str:
        cfg = self.cfg
        url = cfg.base_url.rstrip("/") + "/v1/generate"
        body = {"prompt": context, "max_tokens": cfg.max_tokens, "stop": ["</tool>"]}
        headers = {"Content-Type": "application/json"}
        if cfg.token:
            headers["Authorization"] = f"Bearer {cfg.token}"

        last_error: Exception | None = None
        for attempt in range(cfg.max_retries + 1):
            if attempt > 0:
                time.sleep(cfg.backoff_base * 2 ** (attempt - 1))
            try:
                resp = self.session.post(url, json=body, headers=headers,
                                         timeout=cfg.timeout)
            except requests.Timeout as e:
                last_error = RequestTimeoutError(f"request timed out after {cfg.timeout}s")
                logger.debug("attempt %d timed out: %s", attempt, e)
                continue
            except requests.RequestException as e:
                last_error = EndpointUnreachableError(str(e))
                logger.debug("attempt %d failed: %s", attempt, e)
                continue
            if resp.status_code >= 500:
                last_error = EndpointUnreachableError(f"server error {resp.status_code}")
                continue
            if resp.status_code != 200:
                raise BadStatusError(resp.status_code, resp.text[:200])
            try:
                payload = resp.json()
            except ValueError:
                raise BadPayloadError("response body is not JSON") from None
            if not isinstance(payload, dict) or not isinstance(payload.get("text"), str):
                raise BadPayloadError('response JSON missing string "text" field')
            text = payload["text"]
            if text.count("<tool>") > text.count("</tool>"):
                text += "</tool>"  # the stop sequence trimmed the closing tag
            return text

        assert last_error is not None
        raise last_error


# -- stub server --------------------------------------------------------------


@dataclass
class StubScriptEntry:
    status: int = 200
    body: Any = None          # dict -> JSON body; str -> raw body
    delay: float = 0.0        # seconds to wait before answering

    @classmethod
    def from_obj(cls, obj: dict[str, Any]) -> "StubScriptEntry":
        return cls(status=int(obj.get("status", 200)), body=obj.get("body"),
                   delay=float(obj.get("delay", 0.0)))


@dataclass
class _StubState:
    script: list[StubScriptEntry]
    received: list[dict[str, Any]] = field(default_factory=list)
    cursor: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock)

    def next_entry(self) -> StubScriptEntry | None:
        with self.lock:
            if self.cursor >= len(self.script):
                return None
            entry = self.script[self.cursor]
            self.cursor += 1
            return entry


class _StubHandler(BaseHTTPRequestHandler):
    state: _StubState  # injected by the server factory

    def do_POST(self):  # noqa: N802 (http.server API)
        length = int(self.headers.get("Content-Length", 0))
        raw = self.rfile.read(length)
        try:
            body = json.loads(raw) if raw else {}
        except json.JSONDecodeError:
            body = {"_raw": raw.decode("utf-8", "replace")}
        with self.state.lock:
            self.state.received.append({"path": self.path, "body": body})
        entry = self.state.next_entry()
        if self.path != "/v1/generate":
            self._send(404, {"error": "not found"})
            return
        if entry is None:
            self._send(500, {"error": "script exhausted"})
            return
        if entry.delay > 0:
            time.sleep(entry.delay)
        self._send(entry.status, entry.body if entry.body is not None else {"text": ""})

    def _send(self, status: int, body: Any):
        data = (body if isinstance(body, str) else json.dumps(body)).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, fmt, *args):  # silence default stderr chatter
        logger.debug("stub: " + fmt, *args)


class StubServer:
    """Scriptable server for the generate protocol; replays responses in order.

    Script entries are consumed globally in order across all connections;
    once the script is exhausted every further request gets a 500.
    """

    def __init__(self, script: list[StubScriptEntry | dict[str, Any]], port: int = 0):
        entries = [e if isinstance(e, StubScriptEntry) else StubScriptEntry.from_obj(e)
                   for e in script]
        self.state = _StubState(script=entries)
        handler = type("BoundStubHandler", (_StubHandler,), {"state": self.state})
        try:
            self._server = ThreadingHTTPServer(("127.0.0.1", port), handler)
        except OSError as e:
            raise PortInUseError(f"cannot bind port {port}: {e}") from None
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    @property
    def url(self) -> str:
        return f"http://127.0.0.1:{self.port}"

    @property
    def received(self) -> list[dict[str, Any]]:
        with self.state.lock:
            return list(self.state.received)

    def close(self):
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=5)

    def __enter__(self) -> "StubServer":
        return self

    def __exit__(self, *exc):
        self.close()
