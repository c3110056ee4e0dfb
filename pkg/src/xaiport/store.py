"""Content-addressed artifact storage keyed by SHA-256."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path


def content_id(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


class ArtifactStore:
    """Flat directory of ``<sha256>`` files.

    Writes go through a temp file and an atomic rename, so concurrent writers
    of the same bytes are harmless.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, cid: str) -> Path:
        return self.root / cid

    def put(self, blob: bytes) -> str:
        cid = content_id(blob)
        target = self.path(cid)
        if target.exists():
            return cid
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=".tmp-")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(blob)
            os.replace(tmp, target)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        return cid

    def put_json(self, obj) -> str:
        return self.put(canonical_json(obj))

    def get(self, cid: str) -> bytes:
        try:
            return self.path(cid).read_bytes()
        except FileNotFoundError:
            raise KeyError(cid) from None

    def get_json(self, cid: str):
        return json.loads(self.get(cid))

    def __contains__(self, cid: str) -> bool:
        return self.path(cid).exists()


def store_artifact(store: ArtifactStore, blob: bytes) -> str:
    return store.put(blob)
