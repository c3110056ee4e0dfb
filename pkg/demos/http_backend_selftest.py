"""Serve a model over /v1/score and check the HTTP client against local scoring.

Both sides must agree bit for bit: the request and response carry raw
little-endian float32 payloads.
"""

import threading

import numpy as np

from xaiport.backends import BackendRef, HttpBackend, LocalBackend, make_score_server
from xaiport.model import ModelSpec, init_model

model = init_model(ModelSpec(seed=4))
server = make_score_server(model)
threading.Thread(target=server.serve_forever, daemon=True).start()
host, port = server.server_address[:2]

remote = HttpBackend(BackendRef("remote", "http", endpoint=f"http://{host}:{port}", retries=1))
local = LocalBackend(BackendRef("local", "local"), model)

rs = np.random.default_rng(0)
mismatches = 0
latencies = []
for i in range(25):
    img = rs.random(model.spec.input_dims, dtype=np.float32)
    r = remote.score(img, f"img{i}")
    latencies.append(r.latency_ms)
    mismatches += not np.array_equal(r.scores, local.score(img).scores)

server.shutdown()
server.server_close()
print(f"25 requests, {mismatches} mismatches, median latency {np.median(latencies):.2f} ms")
raise SystemExit(1 if mismatches else 0)
