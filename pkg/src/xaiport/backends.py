"""Scoring backends: the local surrogate, a mock cloud service and an HTTP client.

All three speak the same contract: ``score(image)`` returns a
:class:`ScoreResult` holding a probability vector.  The HTTP kind talks to
any service implementing ``POST /v1/score``::

    request  {"sample_id": str, "shape": [C, H, W], "pixels": base64(float32 LE payload)}
    response {"scores": [...], "labels": [...], "model_version": str}

:func:`make_score_server` serves that protocol over a local model.
"""

from __future__ import annotations

import base64
import json
import logging
import threading
import time
from dataclasses import dataclass, replace
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import requests

from .errors import BackendError, BackendTimeout, ProtocolError, ShapeError, XtenFormatError
from .model import Model, _softmax
from .tensor import from_payload, payload_bytes

log = logging.getLogger(__name__)

KINDS = ("local", "http", "mock")
RETRY_BACKOFF_S = 0.1


@dataclass(frozen=True)
class BackendRef:
    id: str
    kind: str
    labels: tuple[str, ...] = ("0", "1")
    endpoint: str | None = None
    timeout_ms: float = 10_000
    retries: int = 0
    input_dims: tuple[int, ...] | None = None
    max_in_flight: int = 8

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"backend kind must be one of {KINDS}, got {self.kind!r}")
        if not self.timeout_ms > 0:
            raise ValueError("timeout_ms must be positive")
        if self.retries < 0:
            raise ValueError("retries must be >= 0")
        if not self.labels:
            raise ValueError("class-label list must not be empty")
        if self.kind == "http" and not self.endpoint:
            raise ValueError("http backends need an endpoint URL")


@dataclass(frozen=True)
class ScoreResult:
    scores: np.ndarray
    latency_ms: float
    backend_id: str
    sample_id: str = ""

    @property
    def top_class(self) -> int:
        return int(np.argmax(self.scores))


def check_probabilities(scores, n_labels: int | None = None, tol: float = 1e-4) -> np.ndarray:
    try:
        arr = np.asarray(scores, dtype=np.float64)
    except (TypeError, ValueError):
        raise ProtocolError("scores must be a list of numbers") from None
    if arr.ndim != 1 or arr.size == 0:
        raise ProtocolError("scores must be a non-empty flat list")
    if n_labels is not None and arr.size != n_labels:
        raise ProtocolError(f"expected {n_labels} scores, got {arr.size}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 1:
        raise ProtocolError("scores must lie in [0, 1]")
    if abs(arr.sum() - 1.0) > tol:
        raise ProtocolError(f"scores sum to {arr.sum():.6f}, not 1")
    return arr


class Backend:
    """Base class; subclasses implement :meth:`_score_once`."""

    def __init__(self, ref: BackendRef, backoff_s: float = RETRY_BACKOFF_S):
        self.ref = ref
        self.backoff_s = backoff_s

    @property
    def id(self) -> str:
        return self.ref.id

    def _score_once(self, image: np.ndarray, sample_id: str) -> np.ndarray:
        raise NotImplementedError

    def score(self, image, sample_id: str = "") -> ScoreResult:
        image = np.asarray(image, dtype=np.float32)
        dims = self.ref.input_dims
        if dims is not None and tuple(image.shape) != tuple(dims):
            raise ShapeError(f"image dims {list(image.shape)} do not match backend input {list(dims)}")
        attempt = 0
        while True:
            start = time.perf_counter()
            try:
                scores = self._score_once(image, sample_id)
            except BackendError as exc:
                if attempt >= self.ref.retries:
                    raise
                attempt += 1
                log.debug("backend %s attempt %d failed: %s", self.id, attempt, exc)
                time.sleep(self.backoff_s)
                continue
            latency = (time.perf_counter() - start) * 1000.0
            return ScoreResult(np.asarray(scores, dtype=np.float32), latency, self.id, sample_id)


def score(backend: Backend, image, sample_id: str = "") -> ScoreResult:
    return backend.score(image, sample_id)


class LocalBackend(Backend):
    def __init__(self, ref: BackendRef, model: Model, **kw):
        if ref.input_dims is None:
            ref = replace(ref, input_dims=model.spec.input_dims)
        super().__init__(ref, **kw)
        self.model = model

    def _score_once(self, image, sample_id):
        return self.model.predict_proba(image)


@dataclass
class MockRules:
    fixed: list[float] | None = None
    linear: np.ndarray | None = None  # (classes, C, H, W) weights
    latency_ms: float = 0.0
    failure_every: int = 0

    def __post_init__(self):
        if (self.fixed is None) == (self.linear is None):
            raise ValueError("mock needs exactly one scoring rule: fixed or linear")
        if self.fixed is not None:
            check_probabilities(self.fixed)
        if self.linear is not None:
            self.linear = np.asarray(self.linear, dtype=np.float32)
            if self.linear.ndim != 4:
                raise ValueError("linear weights must have dims (classes, C, H, W)")
        if self.latency_ms < 0 or self.failure_every < 0:
            raise ValueError("latency and failure period must be non-negative")


class MockBackend(Backend):
    """Deterministic stand-in for a cloud vision service."""

    def __init__(self, ref: BackendRef, rules: MockRules, **kw):
        super().__init__(ref, **kw)
        self.rules = rules
        self.calls = 0
        self._lock = threading.Lock()

    def _score_once(self, image, sample_id):
        with self._lock:
            self.calls += 1
            call = self.calls
        rules = self.rules
        if rules.latency_ms:
            if rules.latency_ms > self.ref.timeout_ms:
                time.sleep(self.ref.timeout_ms / 1000.0)
                raise BackendTimeout(f"{self.id}: no answer within {self.ref.timeout_ms} ms")
            time.sleep(rules.latency_ms / 1000.0)
        if rules.failure_every and call % rules.failure_every == 0:
            raise ProtocolError(f"{self.id}: injected failure on call {call}")
        if rules.fixed is not None:
            return np.asarray(rules.fixed, dtype=np.float32)
        if rules.linear.shape[1:] != image.shape:
            raise ShapeError(f"image dims {list(image.shape)} do not match mock weights {list(rules.linear.shape[1:])}")
        logits = np.tensordot(rules.linear.astype(np.float64), image.astype(np.float64), axes=3)
        return _softmax(logits).astype(np.float32)


def mock_configure(
    fixed=None,
    linear=None,
    latency_ms: float = 0.0,
    failure_every: int = 0,
    id: str = "mock",
    labels=None,
    retries: int = 0,
    timeout_ms: float = 10_000,
    backoff_s: float = RETRY_BACKOFF_S,
) -> MockBackend:
    rules = MockRules(fixed=fixed, linear=linear, latency_ms=latency_ms, failure_every=failure_every)
    n = len(fixed) if fixed is not None else rules.linear.shape[0]
    if labels is None:
        labels = tuple(str(i) for i in range(n))
    if len(labels) != n:
        raise ValueError(f"{len(labels)} labels for {n} classes")
    dims = None if rules.linear is None else tuple(rules.linear.shape[1:])
    ref = BackendRef(id=id, kind="mock", labels=tuple(labels), retries=retries,
                     timeout_ms=timeout_ms, input_dims=dims)
    return MockBackend(ref, rules, backoff_s=backoff_s)


class HttpBackend(Backend):
    """Client for a remote ``/v1/score`` endpoint."""

    def __init__(self, ref: BackendRef, session: requests.Session | None = None, **kw):
        super().__init__(ref, **kw)
        self.session = session or requests.Session()
        self._slots = threading.BoundedSemaphore(ref.max_in_flight)

    @property
    def url(self) -> str:
        base = self.ref.endpoint.rstrip("/")
        return base if base.endswith("/v1/score") else base + "/v1/score"

    def _score_once(self, image, sample_id):
        body = encode_score_request(image, sample_id)
        with self._slots:
            try:
                resp = self.session.post(self.url, json=body, timeout=self.ref.timeout_ms / 1000.0)
            except requests.Timeout as exc:
                raise BackendTimeout(f"{self.id}: {exc}") from exc
            except requests.RequestException as exc:
                raise BackendError(f"{self.id}: {exc}") from exc
        if resp.status_code != 200:
            raise ProtocolError(f"{self.id}: HTTP {resp.status_code}")
        try:
            payload = resp.json()
        except ValueError:
            raise ProtocolError(f"{self.id}: response is not JSON") from None
        return decode_score_response(payload, len(self.ref.labels))


def encode_score_request(image, sample_id: str = "") -> dict:
    image = np.asarray(image, dtype=np.float32)
    return {
        "sample_id": sample_id,
        "shape": list(image.shape),
        "pixels": base64.b64encode(payload_bytes(image)).decode("ascii"),
    }


def decode_score_request(body) -> tuple[str, np.ndarray]:
    if not isinstance(body, dict):
        raise ProtocolError("request body must be a JSON object")
    shape = body.get("shape")
    if not (isinstance(shape, list) and len(shape) == 3 and all(isinstance(d, int) and d > 0 for d in shape)):
        raise ProtocolError("shape must be [C, H, W] positive integers")
    try:
        raw = base64.b64decode(body.get("pixels", ""), validate=True)
        image = from_payload(raw, shape)
    except (ValueError, TypeError, XtenFormatError) as exc:
        raise ProtocolError(f"bad pixels: {exc}") from None
    return str(body.get("sample_id", "")), image


def decode_score_response(payload, n_labels: int | None = None) -> np.ndarray:
    if not isinstance(payload, dict) or "scores" not in payload or "labels" not in payload:
        raise ProtocolError("response must carry scores and labels")
    labels = payload["labels"]
    if not isinstance(labels, list) or len(labels) != len(payload["scores"]):
        raise ProtocolError("labels must be a list matching scores")
    return check_probabilities(payload["scores"], n_labels)


def score_response(model: Model, image: np.ndarray, labels, version: str) -> dict:
    scores = model.predict_proba(image)
    return {"scores": [float(s) for s in scores], "labels": list(labels), "model_version": version}


# ----------------------------------------------------------------------------
# Score server
# ----------------------------------------------------------------------------


class _ScoreHandler(BaseHTTPRequestHandler):
    server_version = "xaiport-score/0.1"

    def log_message(self, fmt, *args):  # keep test output quiet
        log.debug("score server: " + fmt, *args)

    def _reply(self, status: int, payload: dict):
        blob = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(blob)))
        self.end_headers()
        self.wfile.write(blob)

    def do_POST(self):
        if self.path != "/v1/score":
            self._reply(404, {"status": 404, "code": "not_found", "message": self.path})
            return
        length = int(self.headers.get("Content-Length", 0))
        try:
            body = json.loads(self.rfile.read(length) or b"null")
            _, image = decode_score_request(body)
            payload = score_response(self.server.model, image, self.server.labels, self.server.version)
        except (ValueError, ProtocolError, ShapeError) as exc:
            self._reply(400, {"status": 400, "code": "invalid_body", "message": str(exc)})
            return
        self._reply(200, payload)


def make_score_server(model: Model, host: str = "127.0.0.1", port: int = 0, labels=None,
                      version: str = "local") -> ThreadingHTTPServer:
    """Build (but do not start) a threaded HTTP server answering ``POST /v1/score``."""
    server = ThreadingHTTPServer((host, port), _ScoreHandler)
    server.daemon_threads = True
    server.model = model
    server.labels = list(labels or (str(i) for i in range(model.num_classes)))
    server.version = version
    return server


def backend_from_ref(ref: BackendRef, model: Model | None = None, rules: MockRules | None = None, **kw) -> Backend:
    if ref.kind == "local":
        if model is None:
            raise ValueError("local backend needs a model")
        return LocalBackend(ref, model, **kw)
    if ref.kind == "mock":
        if rules is None:
            raise ValueError("mock backend needs rules")
        return MockBackend(ref, rules, **kw)
    return HttpBackend(ref, **kw)
