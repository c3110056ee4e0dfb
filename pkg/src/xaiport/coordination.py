"""Pipeline configuration and the five-stage job runner.

A job runs, for every configured training variant:

1. data processing   - materialise the dataset, compute per-channel means
2. feature variation - train the local surrogate with the variant's mixer
3. inference         - score clean inputs on every backend
4. xai               - saliency maps for every (method, sample) on the surrogate
5. evaluation        - deletion probes on every backend, stability/consistency

Everything a job produces lands in a content-addressed store; the job
directory holds ``manifest.json``, ``report.json`` and ``telemetry.json``.
"""

from __future__ import annotations

import copy
import datetime as _dt
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .backends import Backend, BackendRef, HttpBackend, LocalBackend, MockBackend, MockRules
from .errors import ConfigError, StageError
from .evaluation import VARIANTS, ExplanationSummary, build_report, deletion_score, f1_score
from .explainers import METHODS, explain
from .model import LabeledDataset, ModelSpec, TrainConfig, forward_capture, init_model, make_synthetic_bars, train
from .store import ArtifactStore, canonical_json, content_id
from .telemetry import PowerModel, TelemetryCollector, estimate_energy, telemetry_report
from .tensor import from_xten, to_xten

log = logging.getLogger(__name__)

AUGMENTATION_OF = {"baseline": "none", "cutmix": "cutmix", "saliency-mix": "saliency-mix"}
JOB_STATES = ("pending", "running", "succeeded", "failed")
_TRANSITIONS = {"pending": {"running"}, "running": {"succeeded", "failed"}}

_TRAIN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "epochs": {"type": "integer", "minimum": 1},
        "batch_size": {"type": "integer", "minimum": 1},
        "learning_rate": {"type": "number", "exclusiveMinimum": 0},
        "mix_probability": {"type": "number", "minimum": 0, "maximum": 1},
    },
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "PipelineConfig",
    "type": "object",
    "additionalProperties": False,
    "required": ["dataset", "variants", "backends", "methods"],
    "properties": {
        "dataset": {
            "type": "object",
            "required": ["kind"],
            "oneOf": [
                {
                    "additionalProperties": False,
                    "properties": {
                        "kind": {"const": "synthetic_bars"},
                        "n": {"type": "integer", "minimum": 2},
                        "seed": {"type": "integer", "minimum": 0},
                    },
                    "required": ["kind", "n"],
                },
                {
                    "additionalProperties": False,
                    "properties": {"kind": {"const": "directory"}, "path": {"type": "string", "minLength": 1}},
                    "required": ["kind", "path"],
                },
            ],
        },
        "variants": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["name"],
                "properties": {"name": {"enum": list(VARIANTS)}, "train": _TRAIN_SCHEMA},
            },
        },
        "backends": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["id", "kind"],
                "properties": {
                    "id": {"type": "string", "minLength": 1},
                    "kind": {"enum": ["local", "http", "mock"]},
                    "endpoint": {"type": "string"},
                    "timeout_ms": {"type": "number", "exclusiveMinimum": 0},
                    "retries": {"type": "integer", "minimum": 0},
                    "labels": {"type": "array", "minItems": 1, "items": {"type": "string"}},
                    "max_in_flight": {"type": "integer", "minimum": 1},
                    "mock": {
                        "type": "object",
                        "additionalProperties": False,
                        "properties": {
                            "fixed": {"type": "array", "minItems": 1, "items": {"type": "number"}},
                            "linear": {"type": "array"},
                            "latency_ms": {"type": "number", "minimum": 0},
                            "failure_every": {"type": "integer", "minimum": 0},
                        },
                    },
                },
            },
        },
        "methods": {"type": "array", "minItems": 1, "uniqueItems": True, "items": {"enum": list(METHODS)}},
        "probe_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string"},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "layers": {"type": "array", "minItems": 1, "items": {"type": "string"}},
                "target_layer": {"type": "string"},
            },
        },
        "power_model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "cpu_w": {"type": "number", "minimum": 0},
                "gpu_w": {"type": ["number", "null"], "minimum": 0},
                "ram_w": {"type": "number", "minimum": 0},
            },
        },
    },
}

DEFAULT_TRAIN = {"epochs": 10, "batch_size": 8, "learning_rate": 0.1, "mix_probability": 0.5}


@dataclass
class PipelineConfig:
    dataset: dict
    variants: list[dict]
    backends: list[dict]
    methods: list[str]
    probe_fraction: float = 0.25
    seed: int = 0
    output_dir: str | None = None
    model: dict = field(default_factory=dict)
    power_model: dict = field(default_factory=dict)

    def canonical(self) -> dict:
        """Fully defaulted config without the output location (which is not content)."""
        return {
            "dataset": self.dataset,
            "variants": self.variants,
            "backends": self.backends,
            "methods": self.methods,
            "probe_fraction": self.probe_fraction,
            "seed": self.seed,
            "model": self.model,
            "power_model": self.power_model,
        }

    def job_id(self, code_version: str = __version__) -> str:
        blob = canonical_json({"config": self.canonical(), "code_version": code_version})
        return content_id(blob)[:16]


def _error_field(err: jsonschema.ValidationError) -> str:
    path = [str(p) for p in err.absolute_path]
    if err.validator == "required":
        missing = [k for k in err.validator_value if k not in (err.instance or {})]
        path += missing[:1]
    elif err.validator == "additionalProperties" and isinstance(err.instance, dict):
        allowed = set(err.schema.get("properties", {}))
        extra = sorted(k for k in err.instance if k not in allowed)
        path += extra[:1]
    return ".".join(path)


def validate_config(raw: str | bytes | dict) -> PipelineConfig:
    """Parse and check a JSON pipeline configuration.

    Raises :class:`ConfigError` whose ``field`` names the offending entry.
    """
    if isinstance(raw, (str, bytes)):
        try:
            data = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}", line=exc.lineno) from None
    else:
        data = copy.deepcopy(raw)
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if errors:
        err = errors[0]
        if err.validator == "oneOf" and err.context:
            err = min(err.context, key=lambda e: len(list(e.absolute_path)))
        name = _error_field(err)
        raise ConfigError(f"invalid {name or 'config'}: {err.message}", field=name or None)

    names = [v["name"] for v in data["variants"]]
    if len(set(names)) != len(names):
        raise ConfigError("variant names must be unique", field="variants")
    ids = [b["id"] for b in data["backends"]]
    if len(set(ids)) != len(ids):
        raise ConfigError("backend ids must be unique", field="backends")

    dataset = dict(data["dataset"])
    if dataset["kind"] == "synthetic_bars":
        dataset.setdefault("seed", data.get("seed", 0))
    else:
        dataset["path"] = str(Path(dataset["path"]).resolve())
    variants = [{"name": v["name"], "train": {**DEFAULT_TRAIN, **v.get("train", {})}} for v in data["variants"]]

    backends = []
    for i, b in enumerate(data["backends"]):
        b = dict(b)
        b.setdefault("timeout_ms", 10_000)
        b.setdefault("retries", 0)
        if b["kind"] == "http" and not b.get("endpoint"):
            raise ConfigError("http backends need an endpoint", field=f"backends.{i}.endpoint")
        if b["kind"] == "mock":
            rules = b.get("mock")
            if not rules:
                raise ConfigError("mock backends need a mock rule set", field=f"backends.{i}.mock")
            try:
                MockRules(**rules)
            except (ValueError, TypeError) as exc:
                raise ConfigError(str(exc), field=f"backends.{i}.mock") from None
        backends.append(b)

    model = {"layers": list(ModelSpec().layers), "target_layer": ModelSpec().target_layer, **data.get("model", {})}
    power = {**PowerModel().to_dict(), **data.get("power_model", {})}
    return PipelineConfig(
        dataset=dataset,
        variants=variants,
        backends=backends,
        methods=list(data["methods"]),
        probe_fraction=float(data.get("probe_fraction", 0.25)),
        seed=int(data.get("seed", 0)),
        output_dir=data.get("output_dir"),
        model=model,
        power_model=power,
    )


# ----------------------------------------------------------------------------
# Jobs
# ----------------------------------------------------------------------------


@dataclass
class PipelineJob:
    job_id: str
    state: str = "pending"
    telemetry: dict = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)
    error: dict | None = None
    cached: bool = False
    directory: Path | None = None

    def transition(self, new: str) -> None:
        if new not in _TRANSITIONS.get(self.state, ()):
            raise ValueError(f"illegal job transition {self.state} -> {new}")
        self.state = new
        self.manifest["state"] = new

    @property
    def report_path(self) -> Path:
        return self.directory / "report.json"

    @property
    def telemetry_path(self) -> Path:
        return self.directory / "telemetry.json"

    def report(self) -> dict:
        return json.loads(self.report_path.read_text(encoding="utf-8"))

    @classmethod
    def load(cls, directory: Path) -> "PipelineJob":
        manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
        telemetry = {}
        if (directory / "telemetry.json").exists():
            telemetry = json.loads((directory / "telemetry.json").read_text(encoding="utf-8"))
        return cls(
            job_id=manifest["job_id"],
            state=manifest["state"],
            telemetry=telemetry,
            manifest=manifest,
            error=manifest.get("error"),
            directory=directory,
        )


DEFAULT_DATA_DIR = "xaiport-out"


def default_data_dir() -> Path:
    """``$XAIPORT_DATA_DIR`` if set, else ``./xaiport-out``."""
    return Path(os.environ.get("XAIPORT_DATA_DIR") or DEFAULT_DATA_DIR)


def job_dir(output_dir: str | Path, job_id: str) -> Path:
    return Path(output_dir) / "jobs" / job_id


def find_job(output_dir: str | Path, job_id: str) -> PipelineJob:
    path = job_dir(output_dir, job_id)
    if not (path / "manifest.json").exists():
        raise KeyError(job_id)
    return PipelineJob.load(path)


def _write_json(path: Path, obj) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")
    tmp.replace(path)


def load_dataset(spec: dict) -> LabeledDataset:
    if spec["kind"] == "synthetic_bars":
        return make_synthetic_bars(spec["n"], spec.get("seed", 0))
    return load_image_directory(spec["path"])


def load_image_directory(path: str | Path) -> LabeledDataset:
    """Read ``labels.json`` (``{"classes": [...], "samples": {file: label}}``) plus XTEN images."""
    root = Path(path)
    meta = json.loads((root / "labels.json").read_text(encoding="utf-8"))
    files = sorted(meta["samples"])
    if len(files) < 2:
        raise ValueError(f"{root} holds fewer than two images")
    images = np.stack([from_xten((root / f).read_bytes()) for f in files]).astype(np.float32)
    labels = np.array([int(meta["samples"][f]) for f in files], dtype=np.int64)
    classes = tuple(meta.get("classes") or [str(c) for c in range(int(labels.max()) + 1)])
    return LabeledDataset(images=images, labels=labels, num_classes=len(classes),
                          ids=[Path(f).stem for f in files], class_names=classes)


def save_image_directory(dataset: LabeledDataset, path: str | Path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    samples = {}
    for sid, img, lab in zip(dataset.ids, dataset.images, dataset.labels):
        (root / f"{sid}.xten").write_bytes(to_xten(img))
        samples[f"{sid}.xten"] = int(lab)
    _write_json(root / "labels.json", {"classes": list(dataset.class_names), "samples": samples})
    return root


def _build_backend(ref_cfg: dict, labels, input_dims) -> Backend:
    labels = tuple(ref_cfg.get("labels") or labels)
    common = dict(
        id=ref_cfg["id"], kind=ref_cfg["kind"], labels=labels, timeout_ms=ref_cfg["timeout_ms"],
        retries=ref_cfg["retries"], max_in_flight=ref_cfg.get("max_in_flight", 8),
    )
    if ref_cfg["kind"] == "http":
        return HttpBackend(BackendRef(endpoint=ref_cfg["endpoint"], input_dims=tuple(input_dims), **common))
    if ref_cfg["kind"] == "mock":
        rules = MockRules(**ref_cfg["mock"])
        dims = None if rules.linear is None else tuple(rules.linear.shape[1:])
        return MockBackend(BackendRef(input_dims=dims or tuple(input_dims), **common), rules)
    return None  # local backends are bound to each variant's surrogate


def _model_artifact(store: ArtifactStore, model) -> str:
    tensors = {}
    for name, (w, b) in sorted(model.params.items()):
        tensors[f"{name}.weight"] = {"id": store.put(to_xten(w)), "dims": list(w.shape)}
        tensors[f"{name}.bias"] = {"id": store.put(to_xten(b)), "dims": list(b.shape)}
    return store.put_json({**model.spec.to_dict(), "tensors": tensors})


class _Run:
    """Mutable state of one executing job."""

    def __init__(self, cfg: PipelineConfig, job: PipelineJob, store: ArtifactStore):
        self.cfg = cfg
        self.job = job
        self.store = store
        self.telemetry = TelemetryCollector()
        self.seq = 0
        self.stage = "data_processing"

    def log_stage(self, stage: str, variant: str | None = None) -> None:
        self.stage = stage
        self.job.manifest["stage_log"].append({"seq": self.seq, "stage": stage, "variant": variant})
        self.seq += 1


def run_pipeline(cfg: PipelineConfig, output_dir: str | Path | None = None) -> PipelineJob:
    """Run (or fetch the cached result of) the job described by ``cfg``."""
    out = Path(output_dir or cfg.output_dir or default_data_dir())
    jid = cfg.job_id()
    directory = job_dir(out, jid)
    if (directory / "manifest.json").exists():
        prior = PipelineJob.load(directory)
        if prior.state == "succeeded":
            prior.cached = True
            return prior
    directory.mkdir(parents=True, exist_ok=True)
    store = ArtifactStore(out / "artifacts")
    job = PipelineJob(job_id=jid, directory=directory)
    job.manifest = {
        "job_id": jid,
        "state": "pending",
        "code_version": __version__,
        "config": cfg.canonical(),
        "created_at": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "stage_log": [],
        "artifacts": {"models": {}, "mix_specs": {}, "saliency": [], "summaries": [], "report": None},
        "error": None,
    }
    job.transition("running")
    _write_json(directory / "manifest.json", job.manifest)

    run = _Run(cfg, job, store)
    wall_start = time.perf_counter()
    try:
        _execute(run)
    except Exception as exc:  # any stage failure ends the job
        err = exc.cause if isinstance(exc, StageError) else exc
        job.error = {"stage": run.stage, "type": type(err).__name__, "message": str(err)}
        job.manifest["error"] = job.error
        job.transition("failed")
        log.warning("job %s failed in %s: %s", jid, run.stage, err)
    else:
        job.transition("succeeded")
    wall = time.perf_counter() - wall_start

    busy = sum(t.total for t in run.telemetry.active())
    power = PowerModel(**cfg.power_model)
    energy = estimate_energy({"cpu": busy, "gpu": 0.0, "ram": busy}, power)
    job.telemetry = telemetry_report(run.telemetry, energy, wall_s=wall)
    _write_json(directory / "telemetry.json", job.telemetry)
    _write_json(directory / "manifest.json", job.manifest)
    return job


def _execute(run: _Run) -> None:
    cfg, store, tel = run.cfg, run.store, run.telemetry
    arts = run.job.manifest["artifacts"]

    run.log_stage("data_processing")
    with tel.stage("data_processing"):
        dataset = load_dataset(cfg.dataset)
        fill = dataset.channel_mean()
    input_dims = dataset.images.shape[1:]
    spec = ModelSpec(input_dims=input_dims, layers=tuple(cfg.model["layers"]),
                     target_layer=cfg.model["target_layer"], seed=cfg.seed)
    remote = [_build_backend(b, dataset.class_names, input_dims) for b in cfg.backends]

    summaries: list[ExplanationSummary] = []
    f1: dict[tuple[str, str], float] = {}
    for variant in cfg.variants:
        name = variant["name"]

        run.log_stage("feature_variation", name)
        tcfg = TrainConfig(seed=cfg.seed, augmentation=AUGMENTATION_OF[name], **variant["train"])
        mix_log: list = []
        with tel.stage("feature_variation"):
            surrogate, losses = train(init_model(spec), dataset, tcfg, mix_log=mix_log)
        arts["models"][name] = _model_artifact(store, surrogate)
        arts["mix_specs"][name] = store.put_json([m.to_dict() for m in mix_log])

        backends = []
        for b_cfg, b in zip(cfg.backends, remote):
            if b is None:
                ref = BackendRef(id=b_cfg["id"], kind="local", labels=tuple(b_cfg.get("labels") or dataset.class_names),
                                 timeout_ms=b_cfg["timeout_ms"], retries=b_cfg["retries"])
                b = LocalBackend(ref, surrogate)
            backends.append(b)

        run.log_stage("inference", name)
        clean: dict[str, list[np.ndarray]] = {}
        for b in backends:
            rows = []
            for sid, img in zip(dataset.ids, dataset.images):
                with tel.stage("inference"):
                    rows.append(b.score(img, sid).scores)
            clean[b.id] = rows
            preds = [int(np.argmax(r)) for r in rows]
            f1[(b.id, name)] = f1_score(preds, dataset.labels.tolist(), num_classes=dataset.num_classes)

        run.log_stage("xai", name)
        maps: dict[str, list] = {m: [] for m in cfg.methods}
        for sid, img in zip(dataset.ids, dataset.images):
            with tel.stage("xai"):
                probs = surrogate.predict_proba(img)
                _, capture = forward_capture(surrogate, img, int(np.argmax(probs)))
            for method in cfg.methods:
                with tel.stage("xai"):
                    smap = explain(method, capture, sample_id=sid)
                entry = {"variant": name, **smap.manifest(), "id": store.put(to_xten(smap.values))}
                arts["saliency"].append(entry)
                maps[method].append(smap)

        run.log_stage("evaluation", name)
        for b in backends:
            for method in cfg.methods:
                scores = []
                for i, (sid, img) in enumerate(zip(dataset.ids, dataset.images)):
                    with tel.stage("evaluation"):
                        scores.append(deletion_score(b, img, maps[method][i], cfg.probe_fraction, fill,
                                                     sample_id=sid, clean=clean[b.id][i]))
                summary = ExplanationSummary(method=method, backend_id=b.id, sample_ids=dataset.ids,
                                             deletion=scores, probe_fraction=cfg.probe_fraction, variant=name)
                summaries.append(summary)
                arts["summaries"].append({"variant": name, "backend": b.id, "method": method,
                                          "id": store.put_json(summary.to_dict())})

    with tel.stage("evaluation"):
        report = build_report(summaries, f1, backends=[b["id"] for b in cfg.backends],
                              variants=[v["name"] for v in cfg.variants], methods=cfg.methods)
        text = report.to_json()
    arts["report"] = store.put(text.encode("utf-8"))
    (run.job.directory / "report.json").write_text(text, encoding="utf-8")
