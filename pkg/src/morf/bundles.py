"""Raw export bundle schema: file layout, readers, and schema validation.

A session's raw export is a directory of exactly seven files: a newline
delimited JSON clickstream log, five CSV tables, and a structured-text
course metadata file. The schema is public; experiment authors develop
against it locally and submit code that runs against any conforming bundle.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

from morf.errors import MorfError

CLICKSTREAM_FILE = "clickstream.jsonl"
METADATA_FILE = "course_metadata.txt"

BUNDLE_FILES = (
    CLICKSTREAM_FILE,
    "forum_posts.csv",
    "forum_comments.csv",
    "assignment_submissions.csv",
    "grades.csv",
    "demographic_survey.csv",
    METADATA_FILE,
)

CLICKSTREAM_FIELDS = ("timestamp", "user_id", "url", "action")

TABLE_HEADERS = {
    "forum_posts.csv": ["post_id", "thread_id", "user_id", "timestamp", "upvotes"],
    "forum_comments.csv": ["comment_id", "post_id", "user_id", "timestamp"],
    "assignment_submissions.csv": ["submission_id", "assignment_id", "user_id", "timestamp", "score"],
    "grades.csv": ["user_id", "final_grade"],
    "demographic_survey.csv": ["user_id", "age_band", "education", "country"],
}

WEEK_SECONDS = 7 * 86400


class BundleError(MorfError):
    pass


@dataclass(frozen=True)
class ClickEvent:
    timestamp: int
    user_id: str
    url: str
    action: str


@dataclass
class ExportBundle:
    """Read access to one on-disk session export directory."""

    path: Path
    _meta: Optional[dict] = field(default=None, repr=False, compare=False)

    def file(self, name: str) -> Path:
        return self.path / name

    def metadata(self) -> dict:
        """Parse (and memoize) ``key: value`` lines of the course metadata file."""
        if self._meta is None:
            meta = {}
            for line in self.file(METADATA_FILE).read_text().splitlines():
                line = line.strip()
                if not line:
                    continue
                key, _, value = line.partition(":")
                meta[key.strip()] = value.strip()
            self._meta = meta
        return self._meta

    @property
    def start_epoch(self) -> int:
        return int(self.metadata()["start_epoch"])

    @property
    def weeks(self) -> int:
        return int(self.metadata()["weeks"])

    def clickstream(self) -> Iterator[ClickEvent]:
        with self.file(CLICKSTREAM_FILE).open() as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                yield ClickEvent(
                    timestamp=int(rec["timestamp"]),
                    user_id=rec["user_id"],
                    url=rec["url"],
                    action=rec["action"],
                )

    def table_rows(self, name: str) -> list:
        with self.file(name).open(newline="") as fh:
            return list(csv.DictReader(fh))

    def roster(self) -> list:
        """All user ids; the grades table carries one row per enrolled user."""
        return [row["user_id"] for row in self.table_rows("grades.csv")]

    def week_of(self, timestamp: int) -> int:
        """1-based course week containing an epoch timestamp, clamped to [1, weeks]."""
        week = (timestamp - self.start_epoch) // WEEK_SECONDS + 1
        return max(1, min(self.weeks, int(week)))


@dataclass
class SchemaReport:
    """Per-check pass/fail outcomes for one bundle; failures are entries, not errors."""

    bundle_path: Path
    checks: list = field(default_factory=list)  # (check name, ok, detail)

    def record(self, name: str, ok: bool, detail: str = "") -> None:
        self.checks.append((name, ok, detail))

    @property
    def ok(self) -> bool:
        return all(ok for _, ok, _ in self.checks)

    def failures(self) -> list:
        return [(n, d) for n, ok, d in self.checks if not ok]


def validate_bundle(bundle: ExportBundle) -> SchemaReport:
    """Check seven-file completeness, headers, clickstream record fields, and
    referential integrity (every table user_id appears in the clickstream or
    roster)."""
    report = SchemaReport(bundle_path=bundle.path)

    missing = [name for name in BUNDLE_FILES if not bundle.file(name).exists()]
    extra = sorted(
        p.name for p in bundle.path.iterdir() if p.is_file() and p.name not in BUNDLE_FILES
    ) if bundle.path.is_dir() else []
    report.record(
        "completeness",
        not missing and not extra and bundle.path.is_dir(),
        f"missing={missing} unexpected={extra}",
    )
    if missing or not bundle.path.is_dir():
        return report

    known_users = set()
    clickstream_ok = True
    detail = ""
    try:
        for event in bundle.clickstream():
            known_users.add(event.user_id)
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        clickstream_ok = False
        detail = str(exc)
    report.record("clickstream_records", clickstream_ok, detail)

    try:
        meta = bundle.metadata()
        meta_ok = all(k in meta for k in ("course_id", "session_id", "weeks", "start_epoch"))
        report.record("metadata_keys", meta_ok, f"keys={sorted(meta)}")
    except OSError as exc:
        report.record("metadata_keys", False, str(exc))

    known_users.update(bundle.roster())

    for name, header in TABLE_HEADERS.items():
        path = bundle.file(name)
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            try:
                actual = next(reader)
            except StopIteration:
                actual = []
        report.record(f"header:{name}", actual == header, f"got {actual}")

    orphaned = []
    for name in TABLE_HEADERS:
        for row in bundle.table_rows(name):
            uid = row.get("user_id", "")
            if uid and uid not in known_users:
                orphaned.append((name, uid))
    report.record(
        "referential_integrity",
        not orphaned,
        f"{len(orphaned)} rows reference unknown users" if orphaned else "",
    )
    return report
