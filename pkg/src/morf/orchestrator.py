"""Job descriptors, the lifecycle state machine, and durable job records.

A job moves submitted -> validated -> fetching -> running -> archiving ->
completed, with failed reachable from every non-terminal state and terminal
states immutable. Each job's history lives in an append-only event log
(``events.jsonl``) next to a snapshot; the log doubles as the user-facing
notification feed and as the audit trail the state machine tests replay.
"""

from __future__ import annotations

import configparser
import json
import os
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from morf.errors import MorfError

SUBMITTED = "submitted"
VALIDATED = "validated"
FETCHING = "fetching"
RUNNING = "running"
ARCHIVING = "archiving"
COMPLETED = "completed"
FAILED = "failed"

TERMINAL_STATES = frozenset({COMPLETED, FAILED})

ALLOWED_EDGES = {
    SUBMITTED: frozenset({VALIDATED, FAILED}),
    VALIDATED: frozenset({FETCHING, FAILED}),
    FETCHING: frozenset({RUNNING, FAILED}),
    RUNNING: frozenset({ARCHIVING, FAILED}),
    ARCHIVING: frozenset({COMPLETED, FAILED}),
    COMPLETED: frozenset(),
    FAILED: frozenset(),
}

# event name emitted when a job enters a state
_STATE_EVENTS = {
    SUBMITTED: "submitted",
    VALIDATED: "validated",
    FETCHING: "stage_started",
    RUNNING: "stage_started",
    ARCHIVING: "stage_started",
    COMPLETED: "completed",
    FAILED: "failed",
}

MODES = ("predict", "rules")


class ConfigError(MorfError):
    pass


class JobStoreError(MorfError):
    pass


class IllegalTransitionError(JobStoreError):
    pass


class UnknownJobError(JobStoreError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    """A submitted job descriptor.

    ``controller_text``/``rules_text`` carry inline payloads (HTTP uploads);
    otherwise the ``controller``/``rules`` references are read at submission.
    """

    mode: str
    image: str = ""
    image_digest: Optional[str] = None
    controller: Optional[str] = None
    rules: Optional[str] = None
    label_type: Optional[str] = None
    webhook: Optional[str] = None
    controller_text: Optional[str] = None
    rules_text: Optional[str] = None
    user_id: str = "anonymous"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        has_controller = bool(self.controller or self.controller_text)
        has_rules = bool(self.rules or self.rules_text)
        if self.mode == "predict":
            if not has_controller or has_rules:
                raise ConfigError("predict mode requires a controller script and no rule file")
            if not self.image:
                raise ConfigError("predict mode requires an image reference")
        else:
            if not has_rules or has_controller:
                raise ConfigError("rules mode requires a rule file and no controller script")


def parse_config(text: str, user_id: str = "anonymous") -> ExperimentConfig:
    """Parse the INI submission format: one ``[morf]`` section."""
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    if "morf" not in parser:
        raise ConfigError("config must contain a [morf] section")
    section = parser["morf"]
    known = {"mode", "image", "image_digest", "controller", "rules", "label_type", "webhook"}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "mode" not in section:
        raise ConfigError("config missing required key 'mode'")
    return ExperimentConfig(
        mode=section.get("mode"),
        image=section.get("image", ""),
        image_digest=section.get("image_digest") or None,
        controller=section.get("controller") or None,
        rules=section.get("rules") or None,
        label_type=section.get("label_type") or None,
        webhook=section.get("webhook") or None,
        user_id=user_id,
    )


def canonical_config_text(config: ExperimentConfig) -> str:
    """Deterministic INI form of a config, as archived."""
    lines = ["[morf]", f"mode = {config.mode}"]
    if config.image:
        lines.append(f"image = {config.image}")
    if config.image_digest:
        lines.append(f"image_digest = {config.image_digest}")
    if config.controller or config.controller_text:
        lines.append(f"controller = {config.controller or '<inline>'}")
    if config.rules or config.rules_text:
        lines.append(f"rules = {config.rules or '<inline>'}")
    if config.label_type:
        lines.append(f"label_type = {config.label_type}")
    if config.webhook:
        lines.append(f"webhook = {config.webhook}")
    return "\n".join(lines) + "\n"


@dataclass
class JobRecord:
    job_id: str
    user_id: str
    mode: str
    state: str
    created_at: float
    updated_at: float
    label_type: Optional[str] = None
    image_reference: str = ""
    image_digest: Optional[str] = None
    webhook: Optional[str] = None
    plan_text: str = ""  # canonical controller script or rule text
    dataset_version: str = ""
    failure_reason: str = ""
    task_statuses: dict = field(default_factory=dict)
    artifact_ids: list = field(default_factory=list)
    features_index: dict = field(default_factory=dict)  # "course|session" -> pid
    fork_of: Optional[str] = None
    forked_by: list = field(default_factory=list)
    metrics_artifact: Optional[str] = None

    def as_dict(self) -> dict:
        return {
            "job_id": self.job_id,
            "user_id": self.user_id,
            "mode": self.mode,
            "state": self.state,
            "created_at": self.created_at,
            "updated_at": self.updated_at,
            "label_type": self.label_type,
            "image_reference": self.image_reference,
            "image_digest": self.image_digest,
            "webhook": self.webhook,
            "plan_text": self.plan_text,
            "dataset_version": self.dataset_version,
            "failure_reason": self.failure_reason,
            "task_statuses": self.task_statuses,
            "artifact_ids": self.artifact_ids,
            "features_index": self.features_index,
            "fork_of": self.fork_of,
            "forked_by": self.forked_by,
            "metrics_artifact": self.metrics_artifact,
        }

    @staticmethod
    def from_dict(d: dict) -> "JobRecord":
        return JobRecord(**d)


def scope_key(course_id: Optional[str], session_id: Optional[str]) -> str:
    return f"{course_id or ''}|{session_id or ''}"


def parse_scope_key(key: str) -> tuple:
    course, _, session = key.partition("|")
    return (course or None, session or None)


class JobStore:
    """Durable job records: per-job event log plus atomic snapshot."""

    def __init__(self, root: Path, on_event: Optional[Callable] = None):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self.on_event = on_event

    def _job_dir(self, job_id: str) -> Path:
        return self.root / job_id

    def next_job_id(self) -> str:
        with self._lock:
            counter_path = self.root / "counter"
            current = int(counter_path.read_text()) if counter_path.exists() else 0
            current += 1
            counter_path.write_text(str(current))
            return f"j-{current:04d}"

    def list_ids(self) -> list:
        return sorted(p.name for p in self.root.iterdir() if p.is_dir())

    def exists(self, job_id: str) -> bool:
        return (self._job_dir(job_id) / "snapshot.json").exists()

    def load(self, job_id: str) -> JobRecord:
        path = self._job_dir(job_id) / "snapshot.json"
        if not path.exists():
            raise UnknownJobError(f"unknown job {job_id}")
        return JobRecord.from_dict(json.loads(path.read_text()))

    def _write_snapshot(self, record: JobRecord) -> None:
        job_dir = self._job_dir(record.job_id)
        job_dir.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=job_dir, prefix=".snapshot-")
        with os.fdopen(fd, "w") as fh:
            json.dump(record.as_dict(), fh, indent=1)
        os.replace(tmp, job_dir / "snapshot.json")

    def _append_event(self, job_id: str, event: str, detail: dict) -> dict:
        entry = {"ts": time.time(), "job_id": job_id, "event": event, "detail": detail}
        with (self._job_dir(job_id) / "events.jsonl").open("a") as fh:
            fh.write(json.dumps(entry) + "\n")
        if self.on_event is not None:
            self.on_event(entry)
        return entry

    def create(self, record: JobRecord) -> JobRecord:
        with self._lock:
            if self.exists(record.job_id):
                raise JobStoreError(f"job {record.job_id} already exists")
            self._write_snapshot(record)
            self._append_event(record.job_id, "submitted", {"mode": record.mode})
        return record

    def update(self, record: JobRecord) -> JobRecord:
        """Snapshot-only metadata update; never changes state."""
        with self._lock:
            current = self.load(record.job_id)
            if current.state != record.state:
                raise IllegalTransitionError("update() must not change job state")
            record.updated_at = time.time()
            self._write_snapshot(record)
        return record

    def transition(self, job_id: str, new_state: str, reason: str = "", detail: Optional[dict] = None) -> JobRecord:
        with self._lock:
            record = self.load(job_id)
            if new_state not in ALLOWED_EDGES[record.state]:
                raise IllegalTransitionError(
                    f"job {job_id}: illegal transition {record.state} -> {new_state}"
                )
            record.state = new_state
            record.updated_at = time.time()
            if new_state == FAILED:
                record.failure_reason = reason
            self._write_snapshot(record)
            event = _STATE_EVENTS[new_state]
            payload = dict(detail or {})
            if event == "stage_started":
                payload["stage"] = new_state
            if reason:
                payload["reason"] = reason
            self._append_event(job_id, event, payload)
        return record

    def stage_completed(self, job_id: str, stage: str, detail: Optional[dict] = None) -> None:
        with self._lock:
            payload = {"stage": stage}
            payload.update(detail or {})
            self._append_event(job_id, "stage_completed", payload)

    def events(self, job_id: str) -> list:
        path = self._job_dir(job_id) / "events.jsonl"
        if not path.exists():
            raise UnknownJobError(f"unknown job {job_id}")
        entries = []
        with path.open() as fh:
            for line in fh:
                line = line.strip()
                if line:
                    entries.append(json.loads(line))
        return entries


def states_from_events(events: list) -> list:
    """Replay an event feed into the state sequence it encodes."""
    states = []
    for entry in events:
        event = entry["event"]
        if event == "stage_started":
            states.append(entry["detail"]["stage"])
        elif event in (SUBMITTED, VALIDATED, COMPLETED, FAILED):
            states.append(event)
    return states
