"""Shared fixtures: golden synthetic catalog and handmade bundles."""

import csv
import json
from pathlib import Path

import pytest

from morf import catalog as catalog_mod
from morf import synth
from morf.bundles import TABLE_HEADERS, WEEK_SECONDS

GOLDEN_SEED = 42
GOLDEN_SIGNAL = 0.8
GOLDEN_USERS = 100
GOLDEN_WEEKS = 6
GOLDEN_COURSES = ("course-a", "course-b")


def golden_specs():
    return [
        synth.CourseSpec(
            course_id=cid,
            n_sessions=3,
            users_per_session=GOLDEN_USERS,
            weeks=GOLDEN_WEEKS,
            seed=GOLDEN_SEED,
            signal_strength=GOLDEN_SIGNAL,
        )
        for cid in GOLDEN_COURSES
    ]


@pytest.fixture(scope="session")
def golden_root(tmp_path_factory):
    """Golden 2-course x 3-session synthetic catalog on disk, with manifest."""
    root = tmp_path_factory.mktemp("golden-data")
    manifest = synth.write_manifest(golden_specs(), root)
    return root, manifest


@pytest.fixture(scope="session")
def golden_catalog(golden_root):
    _, manifest = golden_root
    return catalog_mod.designate_holdouts(catalog_mod.load_manifest(manifest))


def make_bundle(bundle_dir: Path, weekly_events: dict, weeks: int, start: int = 1451865600,
                forum_rows=(), submission_rows=()):
    """Write a minimal schema-conformant bundle by hand.

    ``weekly_events`` maps user_id -> iterable of (week, count); one event is
    written per count at a deterministic offset inside the week.
    """
    bundle_dir.mkdir(parents=True, exist_ok=True)
    events = []
    for user_id, weeks_counts in weekly_events.items():
        for week, count in weeks_counts:
            for k in range(count):
                ts = start + (week - 1) * WEEK_SECONDS + 3600 * (k + 1)
                events.append({"timestamp": ts, "user_id": user_id, "url": "/c/x", "action": "pageview"})
    events.sort(key=lambda e: (e["timestamp"], e["user_id"]))
    with (bundle_dir / "clickstream.jsonl").open("w") as fh:
        for e in events:
            fh.write(json.dumps(e, separators=(",", ":")) + "\n")

    def write_table(name, rows):
        with (bundle_dir / name).open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(TABLE_HEADERS[name])
            writer.writerows(rows)

    write_table("forum_posts.csv", forum_rows)
    write_table("forum_comments.csv", [])
    write_table("assignment_submissions.csv", submission_rows)
    write_table("grades.csv", [(u, 50) for u in sorted(weekly_events)])
    write_table("demographic_survey.csv", [])
    (bundle_dir / "course_metadata.txt").write_text(
        f"course_id: handmade\nsession_id: 001\nweeks: {weeks}\nstart_epoch: {start}\n"
    )
    return bundle_dir
