"""Bounded-worker DAG scheduler with execution tracing.

One scheduler drives many workers: a task starts only after every
dependency succeeded, at most ``workers`` tasks run at any instant, and a
failure marks all transitive dependents skipped. The recorded trace carries
per-task start/finish timestamps so tests can assert the concurrency bound
and ordering directly.
"""

from __future__ import annotations

import threading
import time
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from graphlib import CycleError, TopologicalSorter
from typing import Callable, Optional

from morf.errors import MorfError

SUCCEEDED = "succeeded"
FAILED = "failed"
SKIPPED = "skipped"


class SchedulerError(MorfError):
    pass


@dataclass(frozen=True)
class ScheduledTask:
    task_id: str
    run: Callable  # () -> result; an exception marks the task failed
    depends_on: tuple = ()


@dataclass
class TaskTrace:
    task_id: str
    status: str
    start: Optional[float] = None
    end: Optional[float] = None
    error: str = ""

    @property
    def duration(self) -> Optional[float]:
        if self.start is None or self.end is None:
            return None
        return self.end - self.start


@dataclass
class ExecutionTrace:
    records: dict = field(default_factory=dict)  # task_id -> TaskTrace
    results: dict = field(default_factory=dict)  # task_id -> return value
    started_at: float = 0.0
    finished_at: float = 0.0

    @property
    def ok(self) -> bool:
        return all(r.status == SUCCEEDED for r in self.records.values())

    def status(self, task_id: str) -> str:
        return self.records[task_id].status

    def by_status(self, status: str) -> list:
        return [t for t, r in self.records.items() if r.status == status]

    @property
    def makespan(self) -> float:
        return self.finished_at - self.started_at

    def max_concurrency(self) -> int:
        """Peak number of simultaneously running tasks, from the timestamps."""
        events = []
        for record in self.records.values():
            if record.start is not None and record.end is not None:
                events.append((record.start, 1))
                events.append((record.end, -1))
        events.sort()
        peak = current = 0
        for _, delta in events:
            current += delta
            peak = max(peak, current)
        return peak


def schedule(tasks: list, workers: int) -> ExecutionTrace:
    """Run a task list over a bounded worker pool, honoring dependencies.

    Failures are recorded in the trace, never raised: a failed task's
    transitive dependents are marked skipped without running.
    """
    if workers < 1:
        raise SchedulerError("workers must be positive")
    by_id = {t.task_id: t for t in tasks}
    if len(by_id) != len(tasks):
        raise SchedulerError("duplicate task ids")
    for task in tasks:
        for dep in task.depends_on:
            if dep not in by_id:
                raise SchedulerError(f"task {task.task_id} depends on unknown task {dep}")

    sorter = TopologicalSorter({t.task_id: set(t.depends_on) for t in tasks})
    try:
        sorter.prepare()
    except CycleError as exc:
        raise SchedulerError(f"task graph contains a cycle: {exc}") from exc

    trace = ExecutionTrace(started_at=time.monotonic())
    not_ok = set()  # failed or skipped
    lock = threading.Lock()

    def execute(task: ScheduledTask) -> None:
        record = TaskTrace(task_id=task.task_id, status=FAILED, start=time.monotonic())
        try:
            result = task.run()
            record.status = SUCCEEDED
            with lock:
                trace.results[task.task_id] = result
        except Exception as exc:  # noqa: BLE001 - failures belong in the trace
            record.error = f"{type(exc).__name__}: {exc}"
        record.end = time.monotonic()
        with lock:
            trace.records[task.task_id] = record

    with ThreadPoolExecutor(max_workers=workers) as pool:
        in_flight = {}
        while sorter.is_active():
            for task_id in sorter.get_ready():
                task = by_id[task_id]
                if any(dep in not_ok for dep in task.depends_on):
                    trace.records[task_id] = TaskTrace(task_id=task_id, status=SKIPPED)
                    not_ok.add(task_id)
                    sorter.done(task_id)
                    continue
                in_flight[pool.submit(execute, task)] = task_id
            if not in_flight:
                continue
            done, _ = wait(in_flight, return_when=FIRST_COMPLETED)
            for future in done:
                task_id = in_flight.pop(future)
                future.result()  # execute() never raises
                if trace.records[task_id].status != SUCCEEDED:
                    not_ok.add(task_id)
                sorter.done(task_id)

    trace.finished_at = time.monotonic()
    return trace
