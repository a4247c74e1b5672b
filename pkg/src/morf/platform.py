"""The running platform instance: one directory owning data, jobs, artifacts.

Jobs run serially; a job's tasks run concurrently over a bounded worker
pool. Extract and train results are cached by a key covering the image
digest, the dataset version, the task scope, and the step parameters, so an
unchanged re-run touches no sandbox and a code change invalidates
everything. Holdout labels never reach a sandbox: evaluation happens
in-process, platform-side.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import tarfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from morf import catalog as catalog_mod
from morf import dsl, evaluation, rules, sandbox
from morf.catalog import MountContext, resolve_mounts
from morf.errors import MorfError
from morf.orchestrator import (
    ARCHIVING,
    COMPLETED,
    FAILED,
    FETCHING,
    RUNNING,
    SUBMITTED,
    TERMINAL_STATES,
    VALIDATED,
    ExperimentConfig,
    JobRecord,
    JobStore,
    UnknownJobError,
    canonical_config_text,
    parse_scope_key,
    scope_key,
)
from morf.registry import ArtifactRegistry
from morf.scheduler import ScheduledTask, schedule

logger = logging.getLogger("morf.platform")


class SubmissionError(MorfError):
    pass


class JobNotTerminalError(MorfError):
    pass


class ResultsUnavailableError(MorfError):
    pass


@dataclass
class PlatformSettings:
    workers: int = 4
    backend: str = "auto"
    limits: sandbox.ResourceLimits = field(default_factory=sandbox.ResourceLimits)
    manifest: Optional[Path] = None
    tokens: dict = field(default_factory=dict)  # token -> {"user_id", "trusted"}
    image_size_cap: int = sandbox.DEFAULT_IMAGE_CAP
    job_wall_seconds: Optional[float] = None
    run_seed: str = "0"


def load_settings(root: Path) -> PlatformSettings:
    """Read optional ``platform.json`` next to the platform root."""
    settings = PlatformSettings()
    path = Path(root) / "platform.json"
    if not path.exists():
        return settings
    data = json.loads(path.read_text())
    for key in ("workers", "backend", "tokens", "run_seed", "image_size_cap", "job_wall_seconds"):
        if key in data:
            setattr(settings, key, data[key])
    if data.get("manifest"):
        manifest = Path(data["manifest"])
        settings.manifest = manifest if manifest.is_absolute() else Path(root) / manifest
    if "limits" in data:
        settings.limits = sandbox.ResourceLimits(**data["limits"])
    return settings


class _TaskFailure(MorfError):
    """Raised inside a scheduled task to mark it failed with a reason."""


@dataclass
class _RunContext:
    """Mutable state shared by one job's tasks; lock-guarded."""

    features: dict = field(default_factory=dict)  # (course,session) -> pid
    models: dict = field(default_factory=dict)  # (course,session) -> pid
    predictions: dict = field(default_factory=dict)  # course -> pid
    metrics: dict = field(default_factory=dict)  # course -> MetricSet
    labels_used: dict = field(default_factory=dict)  # (course,session) -> csv text
    cached_tasks: set = field(default_factory=set)
    lock: threading.Lock = field(default_factory=threading.Lock)


class MorfPlatform:
    """A self-hosted platform instance rooted at one directory."""

    def __init__(self, root: Path, settings: Optional[PlatformSettings] = None):
        self.root = Path(root)
        self.settings = settings or PlatformSettings()
        self.registry = ArtifactRegistry(self.root / "registry")
        self._event_listeners = []
        self.jobs = JobStore(self.root / "jobs", on_event=self._dispatch_event)
        for sub in ("images", "labels", "scratch"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        self._catalog = None
        self._catalog_lock = threading.Lock()
        self.sandbox_invocations = []  # (job_id, task_id, stage)
        self._label_lock = threading.Lock()
        self._cache_lock = threading.Lock()
        self.recover()

    # -- events ------------------------------------------------------------

    def add_event_listener(self, listener: Callable) -> None:
        self._event_listeners.append(listener)

    def _dispatch_event(self, entry: dict) -> None:
        for listener in list(self._event_listeners):
            try:
                listener(entry)
            except Exception:  # noqa: BLE001 - notification must never fail a job
                logger.exception("event listener failed")

    # -- catalog -----------------------------------------------------------

    @property
    def manifest_path(self) -> Path:
        if self.settings.manifest is not None:
            return Path(self.settings.manifest)
        return self.root / "data" / "manifest.csv"

    @property
    def catalog(self) -> catalog_mod.Catalog:
        with self._catalog_lock:
            if self._catalog is None:
                self._catalog = catalog_mod.designate_holdouts(
                    catalog_mod.load_manifest(self.manifest_path)
                )
            return self._catalog

    def reload_catalog(self) -> None:
        with self._catalog_lock:
            self._catalog = None

    # -- crash recovery ------------------------------------------------------

    def recover(self) -> list:
        """Fail any job left non-terminal by an interrupted process."""
        interrupted = []
        for job_id in self.jobs.list_ids():
            record = self.jobs.load(job_id)
            if record.state not in TERMINAL_STATES:
                self.jobs.transition(job_id, FAILED, reason="interrupted by platform restart")
                interrupted.append(job_id)
        return interrupted

    # -- submission -----------------------------------------------------------

    def _load_reference(self, reference: str) -> str:
        path = Path(reference)
        if not path.is_file():
            raise SubmissionError(f"referenced file not found: {reference}")
        return path.read_text()

    def submit_job(self, config: ExperimentConfig) -> JobRecord:
        """Persist a submission and validate it; returns the job record in
        state ``validated`` or ``failed`` (with the reason recorded)."""
        job_id = self.jobs.next_job_id()
        now = time.time()
        record = JobRecord(
            job_id=job_id,
            user_id=config.user_id,
            mode=config.mode,
            state=SUBMITTED,
            created_at=now,
            updated_at=now,
            label_type=config.label_type,
            image_reference=config.image,
            image_digest=config.image_digest,
            webhook=config.webhook,
        )
        self.jobs.create(record)
        try:
            record = self._validate_submission(record, config)
        except MorfError as exc:
            return self.jobs.transition(job_id, FAILED, reason=str(exc))
        record = self.jobs.update(record)
        return self.jobs.transition(job_id, VALIDATED)

    def _validate_submission(self, record: JobRecord, config: ExperimentConfig) -> JobRecord:
        catalog = self.catalog
        record.dataset_version = catalog.dataset_version

        if config.mode == "predict":
            # predictive experiments need a holdout, hence a multi-session course
            if not catalog.eligible_courses():
                raise SubmissionError("catalog has no eligible multi-session course")
            script = config.controller_text or self._load_reference(config.controller)
            plan = dsl.parse_script(script)
            validated = dsl.validate_plan(plan, config)
            record.plan_text = dsl.render_script(plan)
            record.label_type = validated.label_type or config.label_type
            if record.label_type is None:
                record.label_type = "dropout"
            if validated.fork_source is not None:
                source = self._check_fork_source(validated.fork_source, catalog)
                record.fork_of = source.job_id
        else:
            rule_text = config.rules_text or self._load_reference(config.rules)
            rules.parse_rule(rule_text)
            if config.label_type not in (None, "dropout"):
                raise SubmissionError("rules mode supports only the dropout label")
            record.label_type = "dropout"
            record.plan_text = rule_text
        # archive the submitted descriptor up front so even failed runs are citable
        config_record = self.registry.put_artifact(
            "config", canonical_config_text(config).encode(), job_id=record.job_id
        )
        record.artifact_ids.append(config_record.persistent_id)
        return record

    def _check_fork_source(self, source_job_id: str, catalog) -> JobRecord:
        try:
            source = self.jobs.load(source_job_id)
        except UnknownJobError as exc:
            raise SubmissionError(f"fork source not found: {source_job_id}") from exc
        if source.state != COMPLETED:
            raise SubmissionError(f"fork source {source_job_id} is not completed")
        if source.dataset_version != catalog.dataset_version:
            raise SubmissionError(
                "fork source was produced against a different dataset version"
            )
        if not source.features_index:
            raise SubmissionError(f"fork source {source_job_id} produced no features")
        return source

    # -- labels ---------------------------------------------------------------

    def _labels_dir(self, label_type: str) -> Path:
        return self.root / "labels" / self.catalog.dataset_version[:12] / label_type

    def ensure_labels(self, course_id: Optional[str], session_id: Optional[str], label_type: str) -> Path:
        """Materialize the platform-computed labels CSV for a scope."""
        base = self._labels_dir(label_type)
        with self._label_lock:
            if course_id is not None and session_id is not None:
                path = base / course_id / session_id / "labels.csv"
                if not path.exists():
                    session = self.catalog.course(course_id).session(session_id)
                    if session.is_holdout:
                        raise catalog_mod.LabelLeakageError(
                            "holdout labels are never materialized for mounting"
                        )
                    table = catalog_mod.extract_labels(session, label_type)
                    path.parent.mkdir(parents=True, exist_ok=True)
                    path.write_text(table.to_csv(label_type))
                return path
            # pooled scopes concatenate the per-session tables
            if course_id is not None:
                path = base / course_id / "labels.csv"
                sessions = self.catalog.course(course_id).training_sessions()
            else:
                path = base / "labels.csv"
                sessions = [
                    s for c in self.catalog.eligible_courses() for s in c.training_sessions()
                ]
        parts = [self.ensure_labels(s.course_id, s.session_id, label_type) for s in sessions]
        with self._label_lock:
            if not path.exists():
                lines = ["user_id,label"]
                for part in parts:
                    lines.extend(part.read_text().splitlines()[1:])
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_text("\n".join(lines) + "\n")
        return path

    # -- caching ----------------------------------------------------------------

    def _cache_path(self) -> Path:
        return self.root / "cache.jsonl"

    def _cache_load(self) -> dict:
        cache = {}
        path = self._cache_path()
        if path.exists():
            with path.open() as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        entry = json.loads(line)
                        cache[entry["key"]] = entry["artifact"]
        return cache

    def _cache_store(self, key: str, artifact_pid: str) -> None:
        with self._cache_lock:
            with self._cache_path().open("a") as fh:
                fh.write(json.dumps({"key": key, "artifact": artifact_pid}) + "\n")

    def _cache_key(self, record: JobRecord, task: dsl.Task, scopes: list, params: dict) -> str:
        payload = {
            "stage": task.stage.value,
            "granularity": task.granularity.value if task.granularity else None,
            "scopes": sorted(scope_key(c, s) for c, s in scopes),
            "image_digest": record.image_digest,
            "dataset_version": record.dataset_version,
            "params": dict(sorted(params.items())),
        }
        canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    # -- running ----------------------------------------------------------------

    def run_job(self, job_id: str) -> JobRecord:
        """Drive a validated job to a terminal state."""
        record = self.jobs.load(job_id)
        if record.state != VALIDATED:
            raise MorfError(f"job {job_id} is in state {record.state}, not {VALIDATED}")
        if record.mode == "predict":
            return self._run_predict_job(record)
        return self._run_rules_job(record)

    def _fail(self, job_id: str, reason: str) -> JobRecord:
        logger.warning("job %s failed: %s", job_id, reason)
        return self.jobs.transition(job_id, FAILED, reason=reason)

    def _run_predict_job(self, record: JobRecord) -> JobRecord:
        job_id = record.job_id
        catalog = self.catalog
        deadline = (
            time.monotonic() + self.settings.job_wall_seconds
            if self.settings.job_wall_seconds
            else None
        )

        record = self.jobs.transition(job_id, FETCHING)
        try:
            image = sandbox.fetch_image(
                record.image_reference,
                self.registry,
                job_id=job_id,
                pinned_digest=record.image_digest,
                size_cap=self.settings.image_size_cap,
            )
            record.image_digest = image.digest
            image_dir = sandbox.unpack_image(self.registry, image.digest, self.root / "images")
            backend = sandbox.get_backend(self.settings.backend)
            sandbox.probe_image(image_dir, backend, self.root / "scratch")
        except MorfError as exc:
            return self._fail(job_id, f"image check failed: {exc}")
        record = self.jobs.update(record)
        self.jobs.stage_completed(job_id, FETCHING, {"image_digest": image.digest})

        plan = dsl.validate_plan(dsl.parse_script(record.plan_text))
        graph = dsl.expand_tasks(plan, catalog)
        context = _RunContext()
        cache = self._cache_load()

        record = self.jobs.transition(job_id, RUNNING, detail={"n_tasks": len(graph.tasks)})
        source_index = None
        if record.fork_of:
            source_index = self.jobs.load(record.fork_of).features_index

        tasks = [
            ScheduledTask(
                task_id=task.task_id,
                run=self._task_runner(
                    record, task, graph, image_dir, backend, context, cache, source_index, deadline
                ),
                depends_on=task.depends_on,
            )
            for task in graph.tasks
        ]
        trace = schedule(tasks, workers=self.settings.workers)

        base = trace.started_at
        record.task_statuses = {
            tid: {
                "status": "cached" if tid in context.cached_tasks else rec.status,
                "duration": rec.duration,
                "start": None if rec.start is None else rec.start - base,
                "end": None if rec.end is None else rec.end - base,
                "error": rec.error,
            }
            for tid, rec in trace.records.items()
        }
        record = self.jobs.update(record)
        self.jobs.stage_completed(
            job_id,
            RUNNING,
            {
                "succeeded": len(trace.by_status("succeeded")),
                "failed": len(trace.by_status("failed")),
                "skipped": len(trace.by_status("skipped")),
            },
        )

        record = self.jobs.transition(job_id, ARCHIVING)
        try:
            record = self._archive_predict(record, plan, context)
        except MorfError as exc:
            return self._fail(job_id, f"archiving failed: {exc}")
        self.jobs.stage_completed(job_id, ARCHIVING, {"n_artifacts": len(record.artifact_ids)})

        if not trace.ok:
            failures = [
                f"{tid}: {trace.records[tid].error}" for tid in sorted(trace.by_status("failed"))
            ]
            return self._fail(job_id, "; ".join(failures) or "task failure")
        return self.jobs.transition(job_id, COMPLETED)

    def _task_runner(
        self, record, task, graph, image_dir, backend, context, cache, source_index, deadline
    ):
        def run():
            if deadline is not None and time.monotonic() > deadline:
                raise _TaskFailure("job wall-clock limit exceeded before task start")
            if task.stage is dsl.Stage.FORK_FEATURES:
                return self._run_fork_task(record, context, source_index)
            if task.stage in (dsl.Stage.EXTRACT, dsl.Stage.EXTRACT_HOLDOUT):
                return self._run_extract_task(record, task, image_dir, backend, context, cache)
            if task.stage is dsl.Stage.TRAIN:
                return self._run_train_task(record, task, image_dir, backend, context, cache)
            if task.stage is dsl.Stage.TEST:
                return self._run_test_task(record, task, graph, image_dir, backend, context)
            return self._run_evaluate_task(record, task, context)

        return run

    def _task_scope(self, task: dsl.Task) -> tuple:
        if task.stage is dsl.Stage.EXTRACT_HOLDOUT:
            holdout = self.catalog.course(task.course_id).holdout_session()
            return (task.course_id, holdout.session_id)
        if task.granularity is dsl.Granularity.SESSION:
            return (task.course_id, task.session_id)
        if task.granularity is dsl.Granularity.COURSE:
            return (task.course_id, None)
        return (None, None)

    def _scopes_covered(self, task: dsl.Task) -> list:
        """Concrete (course, session) pairs whose raw data a task reads."""
        if task.stage is dsl.Stage.EXTRACT_HOLDOUT:
            return [self._task_scope(task)]
        if task.granularity is dsl.Granularity.SESSION:
            return [(task.course_id, task.session_id)]
        courses = (
            [self.catalog.course(task.course_id)]
            if task.course_id
            else self.catalog.eligible_courses()
        )
        return [(c.course_id, s.session_id) for c in courses for s in c.training_sessions()]

    def _sandboxed(self, record, task, mounts, image_dir, backend):
        """One sandbox run with a single retry for platform-side failures."""
        for attempt in (1, 2):
            self.sandbox_invocations.append((record.job_id, task.task_id, task.stage.value))
            try:
                result = sandbox.run_sandboxed(
                    image_dir,
                    mounts,
                    self.settings.limits,
                    backend,
                    task_id=task.task_id,
                    scratch_root=self.root / "scratch",
                    env={"MORF_SEED": self.settings.run_seed},
                )
                return result
            except sandbox.SandboxInfraError as exc:
                if attempt == 2:
                    raise _TaskFailure(f"sandbox infrastructure failure: {exc}") from exc
                logger.warning("task %s: retrying after infra error: %s", task.task_id, exc)

    def _finish_run(self, result: sandbox.RunResult) -> None:
        sandbox.cleanup_scratch(result.scratch_dir)

    def _run_fork_task(self, record, context, source_index):
        resolved = {}
        for key, pid in (source_index or {}).items():
            rec = self.registry.get_record(pid)
            if not self.registry.blob_path(rec.digest).exists():
                raise _TaskFailure(f"forked feature artifact {pid} has no blob")
            adopted = self.registry.adopt_artifact(pid, job_id=record.job_id, task_id="fork")
            resolved[parse_scope_key(key)] = adopted.persistent_id
        if not resolved:
            raise _TaskFailure("fork source produced no features")
        with context.lock:
            context.features.update(resolved)
        return len(resolved)

    def _feature_mount_context(self, context) -> MountContext:
        with context.lock:
            features = {
                scope: self.registry.blob_path(self.registry.get_record(pid).digest)
                for scope, pid in context.features.items()
            }
        return MountContext(features=features)

    def _run_extract_task(self, record, task, image_dir, backend, context, cache):
        scopes = self._scopes_covered(task)
        key = self._cache_key(record, task, scopes, {})
        scope = self._task_scope(task)
        cached_pid = cache.get(key)
        if cached_pid is not None:
            rec = self.registry.get_record(cached_pid)
            if self.registry.blob_path(rec.digest).exists():
                adopted = self.registry.adopt_artifact(
                    cached_pid, job_id=record.job_id, task_id=task.task_id
                )
                with context.lock:
                    context.features[scope] = adopted.persistent_id
                    context.cached_tasks.add(task.task_id)
                return "cached"
        mounts = resolve_mounts(task, self.catalog, MountContext(), record.label_type)
        result = self._sandboxed(record, task, mounts, image_dir, backend)
        try:
            if not result.ok:
                raise _TaskFailure(result.failure_reason or "sandbox run failed")
            data = result.outputs["features.csv"].read_bytes()
        finally:
            self._finish_run(result)
        artifact = self.registry.put_artifact(
            "features", data, job_id=record.job_id, task_id=task.task_id
        )
        with context.lock:
            context.features[scope] = artifact.persistent_id
        self._cache_store(key, artifact.persistent_id)
        return artifact.persistent_id

    def _run_train_task(self, record, task, image_dir, backend, context, cache):
        scopes = self._scopes_covered(task)
        key = self._cache_key(record, task, scopes, {"label_type": record.label_type})
        scope = self._task_scope(task)
        cached_pid = cache.get(key)
        if cached_pid is not None:
            rec = self.registry.get_record(cached_pid)
            if self.registry.blob_path(rec.digest).exists():
                adopted = self.registry.adopt_artifact(
                    cached_pid, job_id=record.job_id, task_id=task.task_id
                )
                with context.lock:
                    context.models[scope] = adopted.persistent_id
                    context.cached_tasks.add(task.task_id)
                return "cached"
        ctx = self._feature_mount_context(context)
        ctx.labels = lambda c, s: self.ensure_labels(c, s, record.label_type)
        mounts = resolve_mounts(task, self.catalog, ctx, record.label_type)
        result = self._sandboxed(record, task, mounts, image_dir, backend)
        try:
            if not result.ok:
                raise _TaskFailure(result.failure_reason or "sandbox run failed")
            model_tar = _tar_directory_bytes(result.outputs["model"])
        finally:
            self._finish_run(result)
        artifact = self.registry.put_artifact(
            "model", model_tar, job_id=record.job_id, task_id=task.task_id
        )
        with context.lock:
            context.models[scope] = artifact.persistent_id
        self._cache_store(key, artifact.persistent_id)
        return artifact.persistent_id

    def _run_test_task(self, record, task, graph, image_dir, backend, context):
        # the trained model comes from this test's train dependency
        train_scope = None
        for dep in task.depends_on:
            dep_task = graph.task(dep)
            if dep_task.stage is dsl.Stage.TRAIN:
                train_scope = self._task_scope(dep_task)
        if train_scope is None:
            raise _TaskFailure("test task has no train dependency")
        with context.lock:
            model_pid = context.models.get(train_scope)
        if model_pid is None:
            raise _TaskFailure(f"trained model missing for scope {train_scope}")

        model_dir = self.root / "scratch" / f"{task.task_id}-model-{model_pid.split(':')[-1]}"
        if not model_dir.exists():
            rec, data = self.registry.get_artifact(model_pid, trusted=True)
            _untar_directory_bytes(data, model_dir)

        ctx = self._feature_mount_context(context)
        ctx.model = model_dir
        mounts = resolve_mounts(task, self.catalog, ctx, record.label_type)
        result = self._sandboxed(record, task, mounts, image_dir, backend)
        try:
            if not result.ok:
                raise _TaskFailure(result.failure_reason or "sandbox run failed")
            data = result.outputs["predictions.csv"].read_bytes()
        finally:
            self._finish_run(result)
        sandbox.cleanup_scratch(model_dir)
        artifact = self.registry.put_artifact(
            "predictions", data, job_id=record.job_id, task_id=task.task_id
        )
        with context.lock:
            context.predictions[task.course_id] = artifact.persistent_id
        return artifact.persistent_id

    def _run_evaluate_task(self, record, task, context):
        with context.lock:
            pred_pid = context.predictions.get(task.course_id)
        if pred_pid is None:
            raise _TaskFailure(f"no predictions available for course {task.course_id}")
        _, data = self.registry.get_artifact(pred_pid, trusted=True)
        holdout = self.catalog.course(task.course_id).holdout_session()
        table = catalog_mod.extract_labels(holdout, record.label_type)
        labels = table.as_mapping(record.label_type)
        text = data.decode()
        if record.label_type == "dropout_week":
            predictions = _parse_week_predictions(text)
            metric_set = evaluation.regression_report(predictions, labels)
        else:
            predictions = evaluation.parse_predictions_csv(text)
            metric_set = evaluation.classification_report(predictions, labels)
        with context.lock:
            context.metrics[task.course_id] = metric_set
            context.labels_used[(task.course_id, holdout.session_id)] = table.to_csv(
                record.label_type
            )
        return metric_set

    def _archive_predict(self, record, plan, context) -> JobRecord:
        registry = self.registry
        job_id = record.job_id
        script_rec = registry.put_artifact("script", record.plan_text.encode(), job_id=job_id)
        new_ids = [script_rec.persistent_id]
        with context.lock:
            record.features_index = {
                scope_key(c, s): pid for (c, s), pid in sorted(context.features.items(), key=str)
            }
            metrics_by_course = dict(context.metrics)
            labels_used = dict(context.labels_used)

        for (course_id, session_id), text in sorted(labels_used.items()):
            rec = registry.put_artifact(
                "labels", text.encode(), job_id=job_id, task_id=f"labels-{course_id}-{session_id}"
            )
            new_ids.append(rec.persistent_id)

        report = evaluation.MetricReport(
            job_id=job_id,
            label_type=record.label_type,
            rows=tuple((c, metrics_by_course[c]) for c in sorted(metrics_by_course)),
        )
        if report.rows or plan.plan.steps_by_stage(dsl.Stage.EVALUATE):
            metrics_rec = registry.put_artifact(
                "metrics",
                json.dumps(report.as_dict(), sort_keys=True, indent=1).encode(),
                job_id=job_id,
            )
            new_ids.append(metrics_rec.persistent_id)
            record.metrics_artifact = metrics_rec.persistent_id

        with context.lock:
            artifact_pids = sorted(
                set(context.features.values())
                | set(context.models.values())
                | set(context.predictions.values())
            )
        record.artifact_ids = sorted(set(record.artifact_ids) | set(new_ids) | set(artifact_pids))
        # a completed job's image artifact is already recorded at fetch time
        image_records = registry.list_artifacts(job_id=job_id, kind="image")
        record.artifact_ids = sorted(
            set(record.artifact_ids) | {r.persistent_id for r in image_records}
        )
        if record.fork_of and self.jobs.exists(record.fork_of):
            source = self.jobs.load(record.fork_of)
            if record.job_id not in source.forked_by:
                source.forked_by.append(record.job_id)
                self.jobs.update(source)
        return self.jobs.update(record)

    # -- rules jobs -----------------------------------------------------------

    def _run_rules_job(self, record: JobRecord) -> JobRecord:
        job_id = record.job_id
        rule = rules.parse_rule(record.plan_text)
        record = self.jobs.transition(job_id, FETCHING)
        self.jobs.stage_completed(job_id, FETCHING, {"note": "rules mode runs platform-side"})

        sessions = [s for c in self.catalog.courses for s in c.sessions if rule.week <= s.weeks]
        if not sessions:
            return self._fail(job_id, f"no session has at least {rule.week} weeks")
        record = self.jobs.transition(job_id, RUNNING, detail={"n_tasks": len(sessions)})

        def session_task(session):
            def run():
                table = catalog_mod.extract_labels(session, "dropout")
                contingency = rules.evaluate_rule(rule, session, table)
                return rules.test_rule(contingency)

            return run

        tasks = [
            ScheduledTask(
                task_id=f"rule-{s.course_id}-{s.session_id}", run=session_task(s), depends_on=()
            )
            for s in sessions
        ]
        trace = schedule(tasks, workers=self.settings.workers)
        record.task_statuses = {
            tid: {"status": rec.status, "duration": rec.duration, "error": rec.error}
            for tid, rec in trace.records.items()
        }
        record = self.jobs.update(record)
        self.jobs.stage_completed(job_id, RUNNING, {"succeeded": len(trace.by_status("succeeded"))})

        record = self.jobs.transition(job_id, ARCHIVING)
        rule_rec = self.registry.put_artifact("rulefile", record.plan_text.encode(), job_id=job_id)
        record.artifact_ids.append(rule_rec.persistent_id)
        if trace.ok:
            results = [trace.results[t.task_id] for t in tasks]
            report = rules.aggregate_results(results)
            metrics_rec = self.registry.put_artifact(
                "metrics",
                json.dumps(report.as_dict(), sort_keys=True, indent=1).encode(),
                job_id=job_id,
            )
            record.metrics_artifact = metrics_rec.persistent_id
            record.artifact_ids.append(metrics_rec.persistent_id)
        record = self.jobs.update(record)
        self.jobs.stage_completed(job_id, ARCHIVING, {"n_artifacts": len(record.artifact_ids)})
        if not trace.ok:
            failures = [
                f"{tid}: {trace.records[tid].error}" for tid in sorted(trace.by_status("failed"))
            ]
            return self._fail(job_id, "; ".join(failures))
        return self.jobs.transition(job_id, COMPLETED)

    # -- user-facing reads ------------------------------------------------------

    def submit_and_run(self, config: ExperimentConfig) -> JobRecord:
        record = self.submit_job(config)
        if record.state != VALIDATED:
            return record
        return self.run_job(record.job_id)

    def job(self, job_id: str) -> JobRecord:
        return self.jobs.load(job_id)

    def events(self, job_id: str) -> list:
        return self.jobs.events(job_id)

    def results(self, job_id: str) -> dict:
        """Summary results only; never raw rows, features, models, or predictions."""
        record = self.jobs.load(job_id)
        if record.state not in TERMINAL_STATES:
            raise JobNotTerminalError(f"job {job_id} is still {record.state}")
        if record.metrics_artifact is None:
            if record.state == COMPLETED:
                return {"job_id": job_id, "mode": record.mode, "state": record.state, "report": None}
            raise ResultsUnavailableError(
                f"job {job_id} ended {record.state} without results: {record.failure_reason}"
            )
        _, data = self.registry.get_artifact(record.metrics_artifact)
        payload = json.loads(data.decode())
        return {"job_id": job_id, "mode": record.mode, "state": record.state, "report": payload}

    def metric_report(self, job_id: str) -> evaluation.MetricReport:
        payload = self.results(job_id)
        if self.jobs.load(job_id).mode != "predict":
            raise ResultsUnavailableError(f"job {job_id} is not a predict job")
        return evaluation.MetricReport.from_dict(payload["report"])

    def compare(self, job_a: str, job_b: str, metric: str) -> evaluation.TestResult:
        return evaluation.compare_jobs(
            self.metric_report(job_a), self.metric_report(job_b), metric
        )

    def courses_listing(self) -> list:
        return [
            {
                "course_id": c.course_id,
                "n_sessions": len(c.sessions),
                "eligible": c.eligible,
            }
            for c in self.catalog.courses
        ]


def _parse_week_predictions(text: str) -> dict:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or "user_id" not in reader.fieldnames or "predicted_week" not in reader.fieldnames:
        raise evaluation.EvaluationError(
            f"week predictions need header user_id,predicted_week, got {reader.fieldnames}"
        )
    return {row["user_id"]: float(row["predicted_week"]) for row in reader}


def _tar_directory_bytes(path: Path) -> bytes:
    """Deterministic tar of a directory tree (fixed metadata, sorted order)."""
    buf = io.BytesIO()
    path = Path(path)
    with tarfile.open(fileobj=buf, mode="w", format=tarfile.USTAR_FORMAT) as tar:
        for sub in sorted(path.rglob("*")):
            if not sub.is_file():
                continue
            info = tarfile.TarInfo(name=str(sub.relative_to(path)))
            data = sub.read_bytes()
            info.size = len(data)
            info.mtime = 0
            info.uid = info.gid = 0
            info.mode = 0o644
            tar.addfile(info, io.BytesIO(data))
    return buf.getvalue()


def _untar_directory_bytes(data: bytes, target: Path) -> Path:
    target = Path(target)
    target.mkdir(parents=True, exist_ok=True)
    with tarfile.open(fileobj=io.BytesIO(data)) as tar:
        for member in tar.getmembers():
            name = Path(member.name)
            if name.is_absolute() or ".." in name.parts:
                raise MorfError(f"unsafe path in model archive: {member.name}")
        tar.extractall(target)
    return target
