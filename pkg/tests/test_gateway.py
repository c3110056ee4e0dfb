import base64
import json
import time

import numpy as np
import pytest
import requests
from jsonschema import Draft202012Validator
from referencing import Registry, Resource
from referencing.jsonschema import DRAFT202012

from xaiport.backends import encode_score_request
from xaiport.gateway import GatewayService, serve
from xaiport.model import ModelSpec, init_model
from xaiport.tensor import from_xten, to_xten

DOC_URI = "urn:xaiport:openapi"


@pytest.fixture
def gateway(tmp_path):
    svc = serve(0, tmp_path / "data", block=False)
    yield svc
    svc.shutdown()


class Conformance:
    """Validates responses against the schemas in the served OpenAPI document."""

    def __init__(self, doc):
        self.doc = doc
        self.registry = Registry().with_resource(DOC_URI, Resource.from_contents(doc, default_specification=DRAFT202012))

    def check(self, path, method, resp):
        op = self.doc["paths"][path][method]
        spec = op["responses"][str(resp.status_code)]
        ctype = resp.headers["Content-Type"]
        assert ctype in spec["content"], (path, resp.status_code, ctype)
        if ctype == "application/json":
            schema = dict(spec["content"][ctype]["schema"])
            if "$ref" in schema:
                schema = {"$ref": DOC_URI + schema["$ref"]}
            Draft202012Validator(schema, registry=self.registry).validate(resp.json())
        return resp


@pytest.fixture
def api(gateway):
    doc = requests.get(gateway.url + "/v1/openapi").json()
    return gateway.url, Conformance(doc)


def pipeline(dataset_id, **over):
    cfg = {
        "dataset": {"kind": "uploaded", "id": dataset_id},
        "variants": [{"name": "baseline", "train": {"epochs": 2}}],
        "backends": [{"id": "mock", "kind": "mock", "mock": {"fixed": [0.3, 0.7]}}],
        "methods": ["grad_cam", "grad_cam_pp", "eigen_cam", "layer_cam", "xgrad_cam"],
    }
    cfg.update(over)
    return cfg


def wait(url, conf, jid, limit=10.0):
    deadline = time.perf_counter() + limit
    while time.perf_counter() < deadline:
        r = conf.check("/v1/jobs/{id}", "get", requests.get(f"{url}/v1/jobs/{jid}"))
        if r.json()["state"] in ("succeeded", "failed"):
            return r.json()
        time.sleep(0.05)
    raise AssertionError("job did not finish")


def test_openapi_document(api):
    url, conf = api
    doc = conf.doc
    assert doc["openapi"].startswith("3.")
    for path in ("/v1/openapi", "/v1/datasets", "/v1/pipelines", "/v1/jobs/{id}", "/v1/jobs/{id}/report",
                 "/v1/jobs/{id}/saliency/{sample}/{method}", "/v1/score"):
        assert path in doc["paths"]
    Draft202012Validator.check_schema(doc["components"]["schemas"]["PipelineConfig"])


def test_round_trip(api):
    url, conf = api
    start = time.perf_counter()
    r = conf.check("/v1/datasets", "post", requests.post(url + "/v1/datasets",
                   json={"id": "bars", "kind": "synthetic_bars", "n": 24, "seed": 1}))
    assert r.status_code == 201 and r.json()["dataset_id"] == "bars"
    r = conf.check("/v1/pipelines", "post", requests.post(url + "/v1/pipelines", json=pipeline("bars")))
    assert r.status_code == 202
    jid = r.json()["job_id"]
    status = wait(url, conf, jid)
    assert status["state"] == "succeeded" and status["error"] is None
    assert "inference" in status["telemetry"]
    rep = conf.check("/v1/jobs/{id}/report", "get", requests.get(f"{url}/v1/jobs/{jid}/report")).json()
    assert len(rep["rows"]) == 1 and len(rep["rows"][0]["stability"]) == 5
    assert time.perf_counter() - start < 10
    sal = conf.check("/v1/jobs/{id}/saliency/{sample}/{method}", "get",
                     requests.get(f"{url}/v1/jobs/{jid}/saliency/s0003/eigen_cam?variant=baseline"))
    m = from_xten(sal.content)
    assert m.shape == (16, 16) and m.max() <= 1
    # resubmission is idempotent
    again = requests.post(url + "/v1/pipelines", json=pipeline("bars")).json()
    assert again == {"job_id": jid, "state": "succeeded"}


def test_error_shapes(api):
    url, conf = api
    r = conf.check("/v1/jobs/{id}", "get", requests.get(url + "/v1/jobs/unknown"))
    assert r.status_code == 404 and r.json()["code"] == "job_not_found"
    r = conf.check("/v1/jobs/{id}/report", "get", requests.get(url + "/v1/jobs/unknown/report"))
    assert r.status_code == 404
    r = conf.check("/v1/pipelines", "post", requests.post(url + "/v1/pipelines", json=pipeline("x", probe_fraction=1.5)))
    assert r.status_code == 404 and r.json()["code"] == "dataset_not_found"
    requests.post(url + "/v1/datasets", json={"id": "d1", "kind": "synthetic_bars", "n": 4})
    r = conf.check("/v1/pipelines", "post", requests.post(url + "/v1/pipelines", json=pipeline("d1", probe_fraction=1.5)))
    assert r.status_code == 400 and r.json()["field"] == "probe_fraction"
    r = conf.check("/v1/pipelines", "post", requests.post(url + "/v1/pipelines", data=b"{not json"))
    assert r.status_code == 400 and r.json()["code"] == "invalid_body"
    r = conf.check("/v1/datasets", "post", requests.post(url + "/v1/datasets", json={"id": "d1", "kind": "synthetic_bars", "n": 4}))
    assert r.status_code == 409 and r.json()["code"] == "dataset_exists"
    r = conf.check("/v1/datasets", "post", requests.post(url + "/v1/datasets", json={"kind": "synthetic_bars", "n": 1}))
    assert r.status_code == 400 and r.json()["field"] == "n"
    r = conf.check("/v1/score", "post", requests.post(url + "/v1/score", json={"shape": [1, 16, 16], "pixels": "!!"}))
    assert r.status_code == 400
    r = requests.get(url + "/v1/nothing")
    assert r.status_code == 404 and set(r.json()) == {"status", "code", "message", "field"}
    r = requests.get(url + "/v1/score")
    assert r.status_code == 405 and r.json()["code"] == "method_not_allowed"


def test_saliency_not_found(api):
    url, conf = api
    requests.post(url + "/v1/datasets", json={"id": "b", "kind": "synthetic_bars", "n": 6})
    jid = requests.post(url + "/v1/pipelines", json=pipeline("b")).json()["job_id"]
    wait(url, conf, jid)
    r = conf.check("/v1/jobs/{id}/saliency/{sample}/{method}", "get",
                   requests.get(f"{url}/v1/jobs/{jid}/saliency/s9999/grad_cam"))
    assert r.status_code == 404 and r.json()["code"] == "saliency_not_found"


def test_score_is_bitwise_in_process(api):
    url, conf = api
    rs = np.random.default_rng(0)
    model = init_model(ModelSpec())
    for _ in range(5):
        img = rs.random((1, 16, 16)).astype(np.float32)
        r = conf.check("/v1/score", "post", requests.post(url + "/v1/score", json=encode_score_request(img)))
        assert np.array_equal(np.array(r.json()["scores"], dtype=np.float32), model.predict_proba(img))


def test_inline_and_multipart_uploads(api):
    url, conf = api
    rs = np.random.default_rng(1)
    imgs = [rs.random((1, 8, 8)).astype(np.float32) for _ in range(4)]
    body = {"kind": "inline", "images": [base64.b64encode(to_xten(i)).decode() for i in imgs],
            "labels": [0, 1, 0, 1], "classes": ["a", "b"]}
    r = conf.check("/v1/datasets", "post", requests.post(url + "/v1/datasets", json=body))
    assert r.status_code == 201 and r.json()["samples"] == 4
    first = r.json()["dataset_id"]
    # identical content without an explicit id maps to the same dataset
    assert requests.post(url + "/v1/datasets", json=body).json()["dataset_id"] == first
    files = [("images", (f"img{k}.xten", to_xten(i), "application/octet-stream")) for k, i in enumerate(imgs)]
    r = conf.check("/v1/datasets", "post", requests.post(url + "/v1/datasets", files=files,
                                                         data={"id": "mp", "labels": "[0, 1, 0, 1]"}))
    assert r.status_code == 201 and r.json()["dataset_id"] == "mp"
    cfg = pipeline("mp", backends=[{"id": "local", "kind": "local"}], methods=["layer_cam"])
    jid = requests.post(url + "/v1/pipelines", json=cfg).json()["job_id"]
    status = wait(url, conf, jid)
    assert status["state"] == "succeeded"
    r = requests.get(f"{url}/v1/jobs/{jid}/saliency/img2/layer_cam")
    assert from_xten(r.content).shape == (8, 8)
    bad = requests.post(url + "/v1/datasets", files=files, data={"labels": "[0]"})
    assert bad.status_code == 400 and bad.json()["field"] == "labels"


def test_status_polls_do_not_block(api):
    url, conf = api
    requests.post(url + "/v1/datasets", json={"id": "slow", "kind": "synthetic_bars", "n": 10})
    cfg = pipeline("slow", backends=[{"id": "m", "kind": "mock", "mock": {"fixed": [0.5, 0.5], "latency_ms": 40}}],
                   methods=["grad_cam"])
    jid = requests.post(url + "/v1/pipelines", json=cfg).json()["job_id"]
    seen = set()
    for _ in range(10):
        t0 = time.perf_counter()
        state = requests.get(f"{url}/v1/jobs/{jid}").json()["state"]
        assert time.perf_counter() - t0 < 0.5
        seen.add(state)
        time.sleep(0.02)
    assert seen & {"pending", "running"}
    r = conf.check("/v1/jobs/{id}/report", "get", requests.get(f"{url}/v1/jobs/{jid}/report"))
    assert r.status_code in (200, 409)
    assert wait(url, conf, jid)["state"] == "succeeded"


def test_failed_job_status(api):
    url, conf = api
    requests.post(url + "/v1/datasets", json={"id": "f", "kind": "synthetic_bars", "n": 6})
    cfg = pipeline("f", backends=[{"id": "m", "kind": "mock", "mock": {"fixed": [0.5, 0.5], "failure_every": 1}}])
    jid = requests.post(url + "/v1/pipelines", json=cfg).json()["job_id"]
    status = wait(url, conf, jid)
    assert status["state"] == "failed" and status["error"]["stage"] == "inference"
    r = conf.check("/v1/jobs/{id}/report", "get", requests.get(f"{url}/v1/jobs/{jid}/report"))
    assert r.status_code == 409 and r.json()["code"] == "job_not_finished"


def test_shutdown_returns_503_while_draining(tmp_path):
    import threading

    svc = serve(0, tmp_path / "data", block=False)
    url = svc.url
    requests.post(url + "/v1/datasets", json={"id": "s", "kind": "synthetic_bars", "n": 10})
    cfg = pipeline("s", backends=[{"id": "m", "kind": "mock", "mock": {"fixed": [0.5, 0.5], "latency_ms": 30}}],
                   methods=["grad_cam"])
    jid = requests.post(url + "/v1/pipelines", json=cfg).json()["job_id"]
    stopper = threading.Thread(target=svc.shutdown)
    stopper.start()
    time.sleep(0.05)
    r = requests.get(f"{url}/v1/jobs/{jid}")
    assert r.status_code == 503 and r.json()["code"] == "shutting_down"
    stopper.join()
    # the running job was drained to completion, not abandoned
    from xaiport.coordination import find_job

    assert find_job(tmp_path / "data", jid).state == "succeeded"


def test_data_dir_lock(tmp_path):
    svc = GatewayService(tmp_path / "d")
    try:
        with pytest.raises(RuntimeError, match="locked"):
            GatewayService(tmp_path / "d")
    finally:
        svc.shutdown()
    assert not (tmp_path / "d" / ".xaiport.lock").exists()
    GatewayService(tmp_path / "d").shutdown()
