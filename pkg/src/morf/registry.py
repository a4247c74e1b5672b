"""Content-addressed artifact store with persistent identifiers.

Every experimental artifact (image, config, script, features, model,
predictions, metrics, labels) is stored once per content digest and minted a
persistent identifier ``morf:<job_id>:<kind>:<digest-prefix-8>``. Records
are append-only; blobs are written temp-then-rename so a blob is either
absent or complete. Intermediate artifact kinds are gated behind a trusted
flag: execute-against users only ever receive summaries.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from morf.errors import MorfError

ARTIFACT_KINDS = (
    "image",
    "config",
    "script",
    "rulefile",
    "features",
    "model",
    "predictions",
    "metrics",
    "labels",
)

# kinds never served without the trusted flag
RESTRICTED_KINDS = frozenset({"features", "model", "predictions", "labels"})


class RegistryError(MorfError):
    pass


class UnknownArtifactError(RegistryError):
    pass


class IntegrityError(RegistryError):
    pass


class AccessDeniedError(RegistryError):
    pass


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def persistent_id(job_id: str, kind: str, digest: str) -> str:
    return f"morf:{job_id}:{kind}:{digest[:8]}"


@dataclass(frozen=True)
class ArtifactRecord:
    persistent_id: str
    kind: str
    digest: str
    size: int
    created_at: float
    job_id: str
    task_id: Optional[str] = None

    def as_dict(self) -> dict:
        return {
            "persistent_id": self.persistent_id,
            "kind": self.kind,
            "digest": self.digest,
            "size": self.size,
            "created_at": self.created_at,
            "job_id": self.job_id,
            "task_id": self.task_id,
        }

    @staticmethod
    def from_dict(d: dict) -> "ArtifactRecord":
        return ArtifactRecord(
            persistent_id=d["persistent_id"],
            kind=d["kind"],
            digest=d["digest"],
            size=int(d["size"]),
            created_at=float(d["created_at"]),
            job_id=d["job_id"],
            task_id=d.get("task_id"),
        )


class ArtifactRegistry:
    """Local artifact store: ``blobs/<2-hex>/<digest>`` plus a record log."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.blob_root = self.root / "blobs"
        self.records_path = self.root / "records.jsonl"
        self.blob_root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._records = {}
        if self.records_path.exists():
            with self.records_path.open() as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        rec = ArtifactRecord.from_dict(json.loads(line))
                        self._records[rec.persistent_id] = rec

    def blob_path(self, digest: str) -> Path:
        return self.blob_root / digest[:2] / digest

    def _write_blob(self, digest: str, data: bytes) -> None:
        path = self.blob_path(digest)
        if path.exists():
            return  # dedup: one blob per digest
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    def put_artifact(
        self, kind: str, data: bytes, job_id: str, task_id: Optional[str] = None
    ) -> ArtifactRecord:
        """Store bytes and mint a record; idempotent per (job, kind, digest)."""
        if kind not in ARTIFACT_KINDS:
            raise RegistryError(f"unknown artifact kind {kind!r}")
        digest = sha256_hex(data)
        pid = persistent_id(job_id, kind, digest)
        with self._lock:
            existing = self._records.get(pid)
            if existing is not None:
                if existing.digest != digest:
                    raise RegistryError(f"persistent id collision for {pid}")
                return existing
            self._write_blob(digest, data)
            record = ArtifactRecord(
                persistent_id=pid,
                kind=kind,
                digest=digest,
                size=len(data),
                created_at=time.time(),
                job_id=job_id,
                task_id=task_id,
            )
            with self.records_path.open("a") as fh:
                fh.write(json.dumps(record.as_dict()) + "\n")
            self._records[pid] = record
        return record

    def adopt_artifact(self, pid: str, job_id: str, task_id: Optional[str] = None) -> ArtifactRecord:
        """Mint a record for an existing blob under another job (reuse/fork).

        The blob is shared; only a new persistent identifier is created, so a
        job built on cached or forked artifacts is still fully citable.
        """
        source = self.get_record(pid)
        new_pid = persistent_id(job_id, source.kind, source.digest)
        with self._lock:
            existing = self._records.get(new_pid)
            if existing is not None:
                return existing
            if not self.blob_path(source.digest).exists():
                raise IntegrityError(f"blob missing for {pid}")
            record = ArtifactRecord(
                persistent_id=new_pid,
                kind=source.kind,
                digest=source.digest,
                size=source.size,
                created_at=time.time(),
                job_id=job_id,
                task_id=task_id,
            )
            with self.records_path.open("a") as fh:
                fh.write(json.dumps(record.as_dict()) + "\n")
            self._records[new_pid] = record
        return record

    def get_record(self, pid: str) -> ArtifactRecord:
        record = self._records.get(pid)
        if record is None:
            raise UnknownArtifactError(f"unknown artifact {pid}")
        return record

    def get_artifact(self, pid: str, trusted: bool = False) -> tuple:
        """Fetch (record, bytes); bytes are digest-verified on every read."""
        record = self.get_record(pid)
        if record.kind in RESTRICTED_KINDS and not trusted:
            raise AccessDeniedError(
                f"artifact kind {record.kind!r} requires trusted access"
            )
        path = self.blob_path(record.digest)
        if not path.exists():
            raise IntegrityError(f"blob missing for {pid}")
        data = path.read_bytes()
        if sha256_hex(data) != record.digest:
            raise IntegrityError(f"blob corrupted for {pid}: digest mismatch on read")
        return record, data

    def list_artifacts(self, job_id: Optional[str] = None, kind: Optional[str] = None) -> list:
        records = sorted(self._records.values(), key=lambda r: r.persistent_id)
        if job_id is not None:
            records = [r for r in records if r.job_id == job_id]
        if kind is not None:
            records = [r for r in records if r.kind == kind]
        return records

    def fsck(self) -> list:
        """Verify every record's blob exists and rehashes to its digest."""
        problems = []
        for pid, record in sorted(self._records.items()):
            path = self.blob_path(record.digest)
            if not path.exists():
                problems.append(f"{pid}: blob missing")
                continue
            if sha256_hex(path.read_bytes()) != record.digest:
                problems.append(f"{pid}: digest mismatch")
        return problems
