"""HTTP API and notification delivery: the user's only path to the platform.

Every response carries summaries only (job states, events, metric rows,
course counts). Raw rows, features, models, and predictions are reachable
solely through the artifact endpoint with a trusted token. Webhook delivery
is at-least-once with exponential backoff and never affects job outcome.
"""

from __future__ import annotations

import logging
import threading
import time
from typing import Optional

import httpx
from fastapi import BackgroundTasks, Depends, FastAPI, File, Header, HTTPException, UploadFile
from fastapi.responses import JSONResponse, PlainTextResponse, Response

from morf.errors import MorfError
from morf.orchestrator import VALIDATED, ConfigError, parse_config
from morf.platform import JobNotTerminalError, MorfPlatform, ResultsUnavailableError
from morf.registry import AccessDeniedError, UnknownArtifactError
from morf.orchestrator import UnknownJobError

logger = logging.getLogger("morf.gateway")


class WebhookNotifier:
    """Posts job events to per-job webhook URLs; failures only get logged."""

    def __init__(self, retries: int = 3, base_delay: float = 0.2, timeout: float = 2.0):
        self.retries = retries
        self.base_delay = base_delay
        self.timeout = timeout
        self.attempts = []  # (url, event name, attempt number, delivered)
        self._threads = []
        self._lock = threading.Lock()

    def deliver(self, url: str, event: dict) -> None:
        thread = threading.Thread(target=self._deliver, args=(url, event), daemon=True)
        with self._lock:
            self._threads.append(thread)
        thread.start()

    def _deliver(self, url: str, event: dict) -> None:
        for attempt in range(1, self.retries + 1):
            delivered = False
            try:
                response = httpx.post(url, json=event, timeout=self.timeout)
                delivered = response.status_code < 400
            except httpx.HTTPError:
                delivered = False
            with self._lock:
                self.attempts.append((url, event["event"], attempt, delivered))
            if delivered:
                return
            if attempt < self.retries:
                time.sleep(self.base_delay * 2 ** (attempt - 1))
        logger.warning("webhook delivery to %s failed after %d attempts", url, self.retries)

    def flush(self, timeout: float = 10.0) -> None:
        deadline = time.monotonic() + timeout
        with self._lock:
            threads = list(self._threads)
        for thread in threads:
            thread.join(max(0.0, deadline - time.monotonic()))


def attach_webhook_notifier(platform: MorfPlatform, notifier: Optional[WebhookNotifier] = None) -> WebhookNotifier:
    """Wire job events to per-job webhooks through the platform event bus."""
    notifier = notifier or WebhookNotifier()

    def listener(entry: dict) -> None:
        try:
            record = platform.jobs.load(entry["job_id"])
        except MorfError:
            return
        if record.webhook:
            notifier.deliver(record.webhook, entry)

    platform.add_event_listener(listener)
    return notifier


def create_app(platform: MorfPlatform, notifier: Optional[WebhookNotifier] = None) -> FastAPI:
    app = FastAPI(title="morf", version="0.1.0")
    app.state.platform = platform
    app.state.notifier = attach_webhook_notifier(platform, notifier)

    def identity(authorization: Optional[str] = Header(default=None)) -> dict:
        if not authorization:
            return {"user_id": "anonymous", "trusted": False}
        token = authorization.removeprefix("Bearer ").strip()
        entry = platform.settings.tokens.get(token)
        if entry is None:
            raise HTTPException(status_code=401, detail="unknown token")
        return {"user_id": entry.get("user_id", "anonymous"), "trusted": bool(entry.get("trusted"))}

    def job_summary(record) -> dict:
        counts = {}
        for status in record.task_statuses.values():
            counts[status["status"]] = counts.get(status["status"], 0) + 1
        return {
            "job_id": record.job_id,
            "state": record.state,
            "mode": record.mode,
            "user_id": record.user_id,
            "label_type": record.label_type,
            "created_at": record.created_at,
            "updated_at": record.updated_at,
            "failure_reason": record.failure_reason,
            "task_counts": counts,
            "fork_of": record.fork_of,
            "artifact_ids": record.artifact_ids,
        }

    @app.post("/jobs", status_code=202)
    async def submit(
        background: BackgroundTasks,
        config: UploadFile = File(...),
        controller: Optional[UploadFile] = File(default=None),
        rules: Optional[UploadFile] = File(default=None),
        caller: dict = Depends(identity),
    ):
        try:
            parsed = parse_config((await config.read()).decode(), user_id=caller["user_id"])
            if controller is not None:
                parsed = parsed.__class__(
                    **{**parsed.__dict__, "controller_text": (await controller.read()).decode()}
                )
            if rules is not None:
                parsed = parsed.__class__(
                    **{**parsed.__dict__, "rules_text": (await rules.read()).decode()}
                )
        except (ConfigError, UnicodeDecodeError) as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        record = platform.submit_job(parsed)
        if record.state != VALIDATED:
            return JSONResponse(
                status_code=422,
                content={"job_id": record.job_id, "state": record.state, "error": record.failure_reason},
            )
        background.add_task(platform.run_job, record.job_id)
        return {"job_id": record.job_id, "state": record.state}

    @app.get("/jobs/{job_id}")
    def job_status(job_id: str):
        try:
            return job_summary(platform.job(job_id))
        except UnknownJobError as exc:
            raise HTTPException(status_code=404, detail=str(exc)) from exc

    @app.get("/jobs/{job_id}/events")
    def job_events(job_id: str):
        try:
            return platform.events(job_id)
        except UnknownJobError as exc:
            raise HTTPException(status_code=404, detail=str(exc)) from exc

    @app.get("/jobs/{job_id}/results")
    def job_results(job_id: str, format: str = "json"):
        try:
            payload = platform.results(job_id)
        except UnknownJobError as exc:
            raise HTTPException(status_code=404, detail=str(exc)) from exc
        except JobNotTerminalError as exc:
            raise HTTPException(status_code=409, detail=str(exc)) from exc
        except ResultsUnavailableError:
            record = platform.job(job_id)
            payload = {
                "job_id": job_id,
                "mode": record.mode,
                "state": record.state,
                "report": None,
                "failure_reason": record.failure_reason,
            }
        if format == "csv":
            if payload.get("mode") != "predict" or payload.get("report") is None:
                raise HTTPException(status_code=400, detail="no metric report to render as CSV")
            from morf.evaluation import MetricReport

            csv_text = MetricReport.from_dict(payload["report"]).to_csv()
            return PlainTextResponse(csv_text, media_type="text/csv")
        return payload

    @app.get("/artifacts/{persistent_id}")
    def artifact(persistent_id: str, caller: dict = Depends(identity)):
        try:
            record, data = platform.registry.get_artifact(
                persistent_id, trusted=caller["trusted"]
            )
        except UnknownArtifactError as exc:
            raise HTTPException(status_code=404, detail=str(exc)) from exc
        except AccessDeniedError as exc:
            raise HTTPException(status_code=403, detail=str(exc)) from exc
        return Response(
            content=data,
            media_type="application/octet-stream",
            headers={"X-Morf-Kind": record.kind, "X-Morf-Digest": record.digest},
        )

    @app.get("/courses")
    def courses():
        return platform.courses_listing()

    return app
