"""HTTP service exposing datasets, pipeline jobs, reports and scoring.

Built on the standard library's threaded HTTP server.  Jobs run on a
bounded worker pool; submission returns immediately and clients poll
``GET /v1/jobs/{id}``.  Every non-2xx response carries an ``ApiError`` body::

    {"status": 404, "code": "job_not_found", "message": "...", "field": null}
"""

from __future__ import annotations

import base64
import email.parser
import email.policy
import json
import logging
import os
import re
import threading
from concurrent.futures import Future, ThreadPoolExecutor
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlsplit

import numpy as np

from . import __version__
from .backends import decode_score_request, score_response
from .coordination import CONFIG_SCHEMA, PipelineJob, find_job, run_pipeline, save_image_directory, validate_config
from .errors import ConfigError, ProtocolError, ShapeError, XtenFormatError
from .model import LabeledDataset, Model, ModelSpec, init_model
from .store import canonical_json, content_id
from .tensor import from_xten

log = logging.getLogger(__name__)

LOCK_NAME = ".xaiport.lock"


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str, field: str | None = None):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message
        self.field = field

    def body(self) -> dict:
        return {"status": self.status, "code": self.code, "message": self.message, "field": self.field}


# ----------------------------------------------------------------------------
# OpenAPI description
# ----------------------------------------------------------------------------


def _json(schema_ref: str) -> dict:
    return {"content": {"application/json": {"schema": {"$ref": f"#/components/schemas/{schema_ref}"}}}}


def _err(desc: str) -> dict:
    return {"description": desc, **_json("ApiError")}


def openapi_document() -> dict:
    config_schema = {k: v for k, v in CONFIG_SCHEMA.items() if k not in ("$schema", "title")}
    config_schema = json.loads(json.dumps(config_schema))
    config_schema["properties"]["dataset"]["oneOf"].append(
        {
            "additionalProperties": False,
            "properties": {"kind": {"const": "uploaded"}, "id": {"type": "string"}},
            "required": ["kind", "id"],
        }
    )
    number_map = {"type": "object", "additionalProperties": {"type": "number"}}
    schemas = {
        "ApiError": {
            "type": "object",
            "required": ["status", "code", "message", "field"],
            "additionalProperties": False,
            "properties": {
                "status": {"type": "integer", "minimum": 400, "maximum": 599},
                "code": {
                    "enum": [
                        "invalid_body", "not_found", "job_not_found", "dataset_not_found",
                        "dataset_exists", "job_not_finished", "saliency_not_found", "shutting_down",
                        "method_not_allowed", "internal_error",
                    ]
                },
                "message": {"type": "string"},
                "field": {"type": ["string", "null"]},
            },
        },
        "PipelineConfig": config_schema,
        "DatasetSpec": {
            "type": "object",
            "required": ["kind"],
            "properties": {
                "id": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
                "kind": {"enum": ["synthetic_bars", "inline"]},
                "n": {"type": "integer", "minimum": 2},
                "seed": {"type": "integer", "minimum": 0},
                "images": {"type": "array", "items": {"type": "string"}},
                "labels": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                "classes": {"type": "array", "items": {"type": "string"}},
            },
        },
        "DatasetCreated": {
            "type": "object",
            "required": ["dataset_id", "kind", "samples"],
            "properties": {
                "dataset_id": {"type": "string"},
                "kind": {"type": "string"},
                "samples": {"type": "integer", "minimum": 2},
            },
        },
        "JobAccepted": {
            "type": "object",
            "required": ["job_id", "state"],
            "properties": {"job_id": {"type": "string"}, "state": {"enum": ["pending", "running", "succeeded", "failed"]}},
        },
        "JobStatus": {
            "type": "object",
            "required": ["job_id", "state", "telemetry", "error"],
            "properties": {
                "job_id": {"type": "string"},
                "state": {"enum": ["pending", "running", "succeeded", "failed"]},
                "telemetry": {"type": "object"},
                "error": {
                    "oneOf": [
                        {"type": "null"},
                        {
                            "type": "object",
                            "required": ["stage", "type", "message"],
                            "properties": {"stage": {"type": "string"}, "type": {"type": "string"}, "message": {"type": "string"}},
                        },
                    ]
                },
            },
        },
        "MetricReport": {
            "type": "object",
            "required": ["methods", "rows", "probe_fraction"],
            "properties": {
                "methods": {"type": "array", "items": {"type": "string"}},
                "probe_fraction": {"type": ["number", "null"]},
                "rows": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "required": ["backend", "variant", "f1", "samples", "pairs", "stability", "consistency"],
                        "properties": {
                            "backend": {"type": "string"},
                            "variant": {"type": "string"},
                            "f1": {"type": "number", "minimum": 0, "maximum": 1},
                            "samples": {"type": "integer", "minimum": 2},
                            "pairs": {"type": "integer", "minimum": 1},
                            "stability": number_map,
                            "consistency": number_map,
                        },
                    },
                },
            },
        },
        "ScoreRequest": {
            "type": "object",
            "required": ["shape", "pixels"],
            "properties": {
                "sample_id": {"type": "string"},
                "shape": {"type": "array", "minItems": 3, "maxItems": 3, "items": {"type": "integer", "minimum": 1}},
                "pixels": {"type": "string", "contentEncoding": "base64"},
            },
        },
        "ScoreResponse": {
            "type": "object",
            "required": ["scores", "labels", "model_version"],
            "properties": {
                "scores": {"type": "array", "minItems": 1, "items": {"type": "number", "minimum": 0, "maximum": 1}},
                "labels": {"type": "array", "items": {"type": "string"}},
                "model_version": {"type": "string"},
            },
        },
    }
    job_param = {"name": "id", "in": "path", "required": True, "schema": {"type": "string"}}
    paths = {
        "/v1/openapi": {"get": {"summary": "This API description", "responses": {"200": {"description": "OpenAPI document", "content": {"application/json": {"schema": {"type": "object", "required": ["openapi", "paths"]}}}}}}},
        "/v1/datasets": {
            "post": {
                "summary": "Register a dataset (synthetic spec, inline XTEN images or multipart upload)",
                "requestBody": {
                    "content": {
                        "application/json": {"schema": {"$ref": "#/components/schemas/DatasetSpec"}},
                        "multipart/form-data": {"schema": {"type": "object", "properties": {"id": {"type": "string"}, "labels": {"type": "string"}, "images": {"type": "array", "items": {"type": "string", "format": "binary"}}}}},
                    }
                },
                "responses": {"201": {"description": "Dataset stored", **_json("DatasetCreated")}, "400": _err("Invalid body"), "409": _err("Duplicate dataset id"), "503": _err("Shutting down")},
            }
        },
        "/v1/pipelines": {
            "post": {
                "summary": "Submit a pipeline job",
                "requestBody": {"content": {"application/json": {"schema": {"$ref": "#/components/schemas/PipelineConfig"}}}},
                "responses": {"202": {"description": "Job accepted", **_json("JobAccepted")}, "400": _err("Invalid config"), "404": _err("Unknown dataset"), "503": _err("Shutting down")},
            }
        },
        "/v1/jobs/{id}": {
            "get": {"summary": "Job state and telemetry", "parameters": [job_param],
                    "responses": {"200": {"description": "Job status", **_json("JobStatus")}, "404": _err("Unknown job")}}
        },
        "/v1/jobs/{id}/report": {
            "get": {"summary": "Metric report of a finished job", "parameters": [job_param],
                    "responses": {"200": {"description": "Report", **_json("MetricReport")}, "404": _err("Unknown job"), "409": _err("Job not finished")}}
        },
        "/v1/jobs/{id}/saliency/{sample}/{method}": {
            "get": {
                "summary": "Saliency map as XTEN bytes",
                "parameters": [
                    job_param,
                    {"name": "sample", "in": "path", "required": True, "schema": {"type": "string"}},
                    {"name": "method", "in": "path", "required": True, "schema": {"type": "string"}},
                    {"name": "variant", "in": "query", "required": False, "schema": {"type": "string"}},
                ],
                "responses": {"200": {"description": "XTEN tensor", "content": {"application/octet-stream": {"schema": {"type": "string", "format": "binary"}}}}, "404": _err("Unknown job or map")},
            }
        },
        "/v1/score": {
            "post": {
                "summary": "Score one image with the local surrogate",
                "requestBody": {"content": {"application/json": {"schema": {"$ref": "#/components/schemas/ScoreRequest"}}}},
                "responses": {"200": {"description": "Class probabilities", **_json("ScoreResponse")}, "400": _err("Invalid body")},
            }
        },
    }
    return {
        "openapi": "3.1.0",
        "info": {"title": "xaiport", "version": __version__},
        "paths": paths,
        "components": {"schemas": schemas},
    }


# ----------------------------------------------------------------------------
# Service
# ----------------------------------------------------------------------------


class GatewayService:
    """Owns a data directory, a worker pool and the HTTP listener."""

    def __init__(self, data_dir: str | Path, host: str = "127.0.0.1", port: int = 0,
                 workers: int = 2, model: Model | None = None):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self._lock_path = self.data_dir / LOCK_NAME
        try:
            fd = os.open(self._lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(f"data directory {self.data_dir} is locked by another service ({self._lock_path})") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        self.model = model or init_model(ModelSpec())
        self.executor = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="xaiport-job")
        self.futures: dict[str, Future] = {}
        self._jobs_lock = threading.Lock()
        self.closing = False
        self.openapi = openapi_document()
        self.httpd = ThreadingHTTPServer((host, port), _GatewayHandler)
        self.httpd.daemon_threads = True
        self.httpd.service = self
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "GatewayService":
        self._thread = threading.Thread(target=self.httpd.serve_forever, name="xaiport-gateway", daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        try:
            self.httpd.serve_forever()
        finally:
            self.shutdown()

    def shutdown(self) -> None:
        if self.closing and not self._lock_path.exists():
            return
        self.closing = True
        # drain running jobs while still answering (with 503), then stop listening
        self.executor.shutdown(wait=True)
        if self._thread is not None:
            self.httpd.shutdown()
        self.httpd.server_close()
        self._lock_path.unlink(missing_ok=True)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.shutdown()

    # -- datasets -------------------------------------------------------------

    @property
    def datasets_dir(self) -> Path:
        return self.data_dir / "datasets"

    def create_dataset(self, spec: dict, dataset: LabeledDataset | None = None) -> dict:
        explicit = spec.get("id")
        if explicit is not None and not re.fullmatch(r"[A-Za-z0-9_.-]+", str(explicit)):
            raise ApiError(400, "invalid_body", "dataset id may only use letters, digits, '.', '_' and '-'", "id")
        if dataset is None:
            resolved = {"kind": "synthetic_bars", "n": spec["n"], "seed": spec.get("seed", 0)}
            fingerprint = canonical_json(resolved)
            samples = spec["n"]
        else:
            resolved = None
            fingerprint = b"".join(img.tobytes() for img in dataset.images) + canonical_json(dataset.labels.tolist())
            samples = len(dataset)
        did = explicit or content_id(fingerprint)[:16]
        target = self.datasets_dir / did
        if target.exists():
            if explicit is not None:
                raise ApiError(409, "dataset_exists", f"dataset {did!r} already exists", "id")
            return {"dataset_id": did, "kind": spec["kind"], "samples": samples}
        if dataset is None:
            target.mkdir(parents=True)
            (target / "spec.json").write_text(json.dumps(resolved), encoding="utf-8")
        else:
            save_image_directory(dataset, target)
        return {"dataset_id": did, "kind": spec["kind"], "samples": samples}

    def resolve_dataset(self, ref: dict) -> dict:
        target = self.datasets_dir / str(ref["id"])
        if not target.is_dir():
            raise ApiError(404, "dataset_not_found", f"no dataset {ref['id']!r}", "dataset.id")
        spec_file = target / "spec.json"
        if spec_file.exists():
            return json.loads(spec_file.read_text(encoding="utf-8"))
        return {"kind": "directory", "path": str(target)}

    # -- jobs -----------------------------------------------------------------

    def submit(self, body: dict) -> dict:
        if not isinstance(body, dict):
            raise ApiError(400, "invalid_body", "config must be a JSON object")
        body = dict(body)
        dataset = body.get("dataset")
        if isinstance(dataset, dict) and dataset.get("kind") == "uploaded":
            body["dataset"] = self.resolve_dataset(dataset)
        body.pop("output_dir", None)
        try:
            cfg = validate_config(body)
        except ConfigError as exc:
            raise ApiError(400, "invalid_body", str(exc), exc.field) from None
        jid = cfg.job_id()
        with self._jobs_lock:
            fut = self.futures.get(jid)
            if fut is not None and not fut.done():
                return {"job_id": jid, "state": self._state(jid)}
            try:
                if find_job(self.data_dir, jid).state == "succeeded":
                    return {"job_id": jid, "state": "succeeded"}
            except KeyError:
                pass
            self.futures[jid] = self.executor.submit(run_pipeline, cfg, self.data_dir)
        return {"job_id": jid, "state": "pending"}

    def _state(self, jid: str) -> str:
        try:
            return find_job(self.data_dir, jid).state
        except (KeyError, json.JSONDecodeError):
            return "pending"

    def job_status(self, jid: str) -> dict:
        fut = self.futures.get(jid)
        try:
            job = find_job(self.data_dir, jid)
        except (KeyError, json.JSONDecodeError):
            if fut is not None:
                return {"job_id": jid, "state": "pending", "telemetry": {}, "error": None}
            raise ApiError(404, "job_not_found", f"no job {jid!r}") from None
        if fut is not None and fut.done() and fut.exception() is not None:
            exc = fut.exception()
            return {"job_id": jid, "state": "failed", "telemetry": {},
                    "error": {"stage": "coordination", "type": type(exc).__name__, "message": str(exc)}}
        return {"job_id": jid, "state": job.state, "telemetry": job.telemetry, "error": job.error}

    def finished_job(self, jid: str) -> PipelineJob:
        try:
            job = find_job(self.data_dir, jid)
        except (KeyError, json.JSONDecodeError):
            if jid in self.futures:
                raise ApiError(409, "job_not_finished", f"job {jid!r} has not finished") from None
            raise ApiError(404, "job_not_found", f"no job {jid!r}") from None
        if job.state != "succeeded":
            raise ApiError(409, "job_not_finished", f"job {jid!r} is {job.state}")
        return job

    def saliency_bytes(self, jid: str, sample: str, method: str, variant: str | None) -> bytes:
        try:
            job = find_job(self.data_dir, jid)
        except (KeyError, json.JSONDecodeError):
            raise ApiError(404, "job_not_found", f"no job {jid!r}") from None
        for entry in job.manifest["artifacts"]["saliency"]:
            if entry["sample_id"] == sample and entry["method"] == method and variant in (None, entry["variant"]):
                return (self.data_dir / "artifacts" / entry["id"]).read_bytes()
        raise ApiError(404, "saliency_not_found", f"no {method} map for sample {sample!r} in job {jid!r}")


def _parse_multipart(content_type: str, body: bytes) -> tuple[dict, LabeledDataset]:
    msg = email.parser.BytesParser(policy=email.policy.HTTP).parsebytes(
        b"Content-Type: " + content_type.encode("latin-1") + b"\r\n\r\n" + body
    )
    if not msg.is_multipart():
        raise ApiError(400, "invalid_body", "expected multipart/form-data")
    fields, files = {}, []
    for part in msg.iter_parts():
        name = part.get_param("name", header="content-disposition")
        filename = part.get_filename()
        payload = part.get_payload(decode=True) or b""
        if filename:
            files.append((Path(filename).stem, payload))
        elif name:
            fields[name] = payload.decode("utf-8")
    try:
        labels = json.loads(fields.get("labels", "null"))
    except json.JSONDecodeError:
        raise ApiError(400, "invalid_body", "labels must be a JSON list", "labels") from None
    spec = {"kind": "multipart"}
    if "id" in fields:
        spec["id"] = fields["id"]
    classes = json.loads(fields["classes"]) if "classes" in fields else None
    return spec, _inline_dataset([f[1] for f in files], labels, classes, ids=[f[0] for f in files])


def _inline_dataset(blobs, labels, classes=None, ids=None) -> LabeledDataset:
    if not isinstance(labels, list) or len(labels) != len(blobs) or len(blobs) < 2:
        raise ApiError(400, "invalid_body", "need at least two images and one label per image", "labels")
    try:
        images = np.stack([from_xten(b) for b in blobs]).astype(np.float32)
    except (XtenFormatError, ValueError) as exc:
        raise ApiError(400, "invalid_body", f"bad image payload: {exc}", "images") from None
    if images.ndim != 4:
        raise ApiError(400, "invalid_body", "images must be (C, H, W) tensors", "images")
    labels_arr = np.asarray(labels, dtype=np.int64)
    n_classes = len(classes) if classes else int(labels_arr.max()) + 1
    return LabeledDataset(images=images, labels=labels_arr, num_classes=n_classes,
                          ids=ids or [], class_names=tuple(classes or ()))


_ROUTES = [
    ("GET", re.compile(r"^/v1/openapi$"), "openapi"),
    ("POST", re.compile(r"^/v1/datasets$"), "datasets"),
    ("POST", re.compile(r"^/v1/pipelines$"), "pipelines"),
    ("GET", re.compile(r"^/v1/jobs/(?P<id>[^/]+)$"), "job"),
    ("GET", re.compile(r"^/v1/jobs/(?P<id>[^/]+)/report$"), "report"),
    ("GET", re.compile(r"^/v1/jobs/(?P<id>[^/]+)/saliency/(?P<sample>[^/]+)/(?P<method>[^/]+)$"), "saliency"),
    ("POST", re.compile(r"^/v1/score$"), "score"),
]


class _GatewayHandler(BaseHTTPRequestHandler):
    server_version = f"xaiport/{__version__}"
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        log.debug("gateway: " + fmt, *args)

    @property
    def service(self) -> GatewayService:
        return self.server.service

    def _send(self, status: int, blob: bytes, ctype: str) -> None:
        self.send_response(status)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(blob)))
        self.end_headers()
        self.wfile.write(blob)

    def _send_json(self, status: int, payload) -> None:
        self._send(status, json.dumps(payload).encode("utf-8"), "application/json")

    def _body(self) -> bytes:
        return self.rfile.read(int(self.headers.get("Content-Length", 0) or 0))

    def _json_body(self):
        raw = self._body()
        try:
            return json.loads(raw or b"null")
        except json.JSONDecodeError as exc:
            raise ApiError(400, "invalid_body", f"body is not JSON: {exc.msg} (line {exc.lineno})") from None

    def _dispatch(self, method: str) -> None:
        try:
            if self.service.closing:
                raise ApiError(503, "shutting_down", "service is shutting down")
            url = urlsplit(self.path)
            allowed = False
            for verb, pattern, name in _ROUTES:
                match = pattern.match(url.path)
                if not match:
                    continue
                allowed = True
                if verb == method:
                    getattr(self, f"_h_{name}")(query=parse_qs(url.query), **match.groupdict())
                    return
            if allowed:
                raise ApiError(405, "method_not_allowed", f"{method} not allowed on {url.path}")
            raise ApiError(404, "not_found", f"no route for {url.path}")
        except ApiError as exc:
            self._send_json(exc.status, exc.body())
        except Exception as exc:  # pragma: no cover - last-resort guard
            log.exception("unhandled error")
            self._send_json(500, ApiError(500, "internal_error", str(exc)).body())

    def do_GET(self):
        self._dispatch("GET")

    def do_POST(self):
        self._dispatch("POST")

    # -- handlers -------------------------------------------------------------

    def _h_openapi(self, query):
        self._send_json(200, self.service.openapi)

    def _h_datasets(self, query):
        ctype = self.headers.get("Content-Type", "")
        if ctype.startswith("multipart/form-data"):
            spec, dataset = _parse_multipart(ctype, self._body())
            self._send_json(201, self.service.create_dataset(spec, dataset))
            return
        body = self._json_body()
        if not isinstance(body, dict) or body.get("kind") not in ("synthetic_bars", "inline"):
            raise ApiError(400, "invalid_body", "kind must be 'synthetic_bars' or 'inline'", "kind")
        if body["kind"] == "synthetic_bars":
            n = body.get("n")
            if not isinstance(n, int) or isinstance(n, bool) or n < 2:
                raise ApiError(400, "invalid_body", "n must be an integer >= 2", "n")
            seed = body.get("seed", 0)
            if not isinstance(seed, int) or seed < 0:
                raise ApiError(400, "invalid_body", "seed must be a non-negative integer", "seed")
            self._send_json(201, self.service.create_dataset(body))
            return
        try:
            blobs = [base64.b64decode(s, validate=True) for s in body.get("images", [])]
        except (ValueError, TypeError):
            raise ApiError(400, "invalid_body", "images must be base64 XTEN strings", "images") from None
        dataset = _inline_dataset(blobs, body.get("labels"), body.get("classes"))
        self._send_json(201, self.service.create_dataset(body, dataset))

    def _h_pipelines(self, query):
        self._send_json(202, self.service.submit(self._json_body()))

    def _h_job(self, query, id):
        self._send_json(200, self.service.job_status(id))

    def _h_report(self, query, id):
        job = self.service.finished_job(id)
        self._send(200, job.report_path.read_bytes(), "application/json")

    def _h_saliency(self, query, id, sample, method):
        variant = query.get("variant", [None])[0]
        self._send(200, self.service.saliency_bytes(id, sample, method, variant), "application/octet-stream")

    def _h_score(self, query):
        body = self._json_body()
        try:
            _, image = decode_score_request(body)
            model = self.service.model
            payload = score_response(model, image, [str(i) for i in range(model.num_classes)], f"surrogate-{__version__}")
        except (ProtocolError, ShapeError) as exc:
            raise ApiError(400, "invalid_body", str(exc)) from None
        self._send_json(200, payload)


def serve(port: int, data_dir: str | Path, host: str = "127.0.0.1", workers: int = 2,
          model: Model | None = None, block: bool = True) -> GatewayService:
    """Start the service.  With ``block=False`` it runs on a background thread."""
    service = GatewayService(data_dir, host=host, port=port, workers=workers, model=model)
    if block:
        log.info("xaiport gateway listening on %s", service.url)
        service.serve_forever()
        return service
    return service.start()
