"""Deterministic synthetic export generator with a planted dropout signal.

Real platform exports are privacy-restricted, so the platform is exercised
end to end on schema-conformant synthetic bundles instead. Every random
draw comes from a counter-based generator keyed by (seed, course, session,
user index), which makes bundle bytes a pure function of the course spec and
lets distinct sessions generate concurrently without shared state.

The planted signal: each user has a latent engagement level that drives both
weekly activity volume and (scaled by ``signal_strength``) the probability
of finishing the course, so early activity predicts dropout with a tunable
strength. With ``signal_strength`` zero the label is independent of
behavior.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.random import Generator, Philox

from morf import bundles
from morf.bundles import BUNDLE_FILES, WEEK_SECONDS
from morf.errors import MorfError

# course time starts on a fixed Monday (2016-01-04 00:00 UTC); sessions of a
# course are spaced two calendar weeks apart beyond their duration
_BASE_EPOCH = 1451865600

_ACTIONS = ("pageview", "video_play", "video_pause", "quiz_view", "forum_view")
_AGE_BANDS = ("18-24", "25-34", "35-44", "45-54", "55+")
_EDUCATION = ("secondary", "bachelor", "master", "doctorate")
_COUNTRIES = ("US", "IN", "BR", "GB", "DE", "CN", "NG", "ES")

# completion probability averages 0.40, tilted by engagement when a signal
# is planted; event volume and forum posting both scale with engagement
_BASE_COMPLETION = 0.40
_COMPLETION_TILT = 1.25
_EVENT_RATE_BASE = 1.0
_EVENT_RATE_SLOPE = 18.0
_LATE_JOIN_SCALE = 0.35
_POST_P_BASE = 0.02
_POST_P_SLOPE = 0.9
_SUBMIT_P_BASE = 0.03
_SUBMIT_P_SLOPE = 0.6


class SpecError(MorfError):
    pass


@dataclass(frozen=True)
class CourseSpec:
    course_id: str
    n_sessions: int
    users_per_session: int
    weeks: int
    seed: int
    signal_strength: float

    def __post_init__(self):
        if self.users_per_session < 10:
            raise SpecError("users_per_session must be at least 10")
        if self.weeks < 2:
            raise SpecError("weeks must be at least 2")
        if self.n_sessions < 1:
            raise SpecError("n_sessions must be at least 1")
        if not 0.0 <= self.signal_strength <= 1.0:
            raise SpecError("signal_strength must be in [0, 1]")


def parse_spec_file(path: Path) -> CourseSpec:
    """Read a ``key = value`` spec file mirroring the CourseSpec fields."""
    fields = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise SpecError(f"malformed spec line: {line!r}")
        fields[key.strip()] = value.strip()
    try:
        return CourseSpec(
            course_id=fields["course_id"],
            n_sessions=int(fields["n_sessions"]),
            users_per_session=int(fields["users_per_session"]),
            weeks=int(fields["weeks"]),
            seed=int(fields["seed"]),
            signal_strength=float(fields["signal_strength"]),
        )
    except KeyError as exc:
        raise SpecError(f"spec file missing field {exc.args[0]!r}") from exc


def _stream(*parts) -> Generator:
    """Counter-based generator keyed by identifiers, not a shared sequence."""
    digest = hashlib.blake2b(
        b"\x1f".join(str(p).encode() for p in parts), digest_size=16
    ).digest()
    return Generator(Philox(key=np.frombuffer(digest, dtype=np.uint64)))


@dataclass
class _UserDraw:
    user_id: str
    engagement: float
    join_week: int
    counts: np.ndarray  # events per week
    posts: np.ndarray  # bool per week
    submits: np.ndarray  # bool per week
    grade: int
    survey: tuple  # None or (age, education, country)


def _draw_user(spec: CourseSpec, session_id: str, idx: int) -> _UserDraw:
    rng = _stream("morf-synth", spec.seed, spec.course_id, session_id, "user", idx)
    weeks, signal = spec.weeks, spec.signal_strength

    e = rng.random()
    q = min(max(_BASE_COMPLETION + signal * _COMPLETION_TILT * (e - 0.5), 0.0), 1.0)
    completed = rng.random() < q
    if completed:
        last_week = weeks
    else:
        r = (1.0 - signal) * rng.random() + signal * e
        last_week = min(1 + int(r * (weeks - 1)), weeks - 1)
    join_week = 1
    if rng.random() < _LATE_JOIN_SCALE * (1.0 - e) ** 2:
        join_week = 2 + int(rng.random() * min(2, weeks - 2))
    last_week = max(last_week, join_week)

    lam = _EVENT_RATE_BASE + _EVENT_RATE_SLOPE * e
    counts = rng.poisson(lam, size=weeks)
    counts[: join_week - 1] = 0
    counts[last_week:] = 0
    if counts[last_week - 1] == 0:
        counts[last_week - 1] = 1  # the designated last-active week has activity

    p_post = _POST_P_BASE + _POST_P_SLOPE * e * e
    posts = (rng.random(weeks) < p_post) & (counts > 0)
    p_submit = _SUBMIT_P_BASE + _SUBMIT_P_SLOPE * e
    submits = (rng.random(weeks) < p_submit) & (counts > 0)

    grade = int(round(100 * min(max(0.2 + 0.5 * e + 0.2 * (last_week == weeks) + 0.1 * rng.random(), 0.0), 1.0)))
    survey = None
    if rng.random() < 0.6:
        survey = (
            _AGE_BANDS[int(rng.random() * len(_AGE_BANDS))],
            _EDUCATION[int(rng.random() * len(_EDUCATION))],
            _COUNTRIES[int(rng.random() * len(_COUNTRIES))],
        )
    return _UserDraw(
        user_id=f"u-{spec.course_id}-{session_id}-{idx:04d}",
        engagement=e,
        join_week=join_week,
        counts=counts,
        posts=posts,
        submits=submits,
        grade=grade,
        survey=survey,
    )


def session_start_epoch(spec: CourseSpec, session_index: int) -> int:
    return _BASE_EPOCH + session_index * (spec.weeks + 2) * WEEK_SECONDS


def _write_csv(path: Path, header: list, rows: list) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def generate_session(spec: CourseSpec, session_id: str, out_dir: Path) -> Path:
    """Emit one session's seven-file bundle under ``out_dir``; deterministic."""
    bundle_dir = Path(out_dir)
    bundle_dir.mkdir(parents=True, exist_ok=True)
    start = session_start_epoch(spec, int(session_id) - 1)
    users = [_draw_user(spec, session_id, i) for i in range(spec.users_per_session)]

    events = []
    post_rows = []
    comment_candidates = []
    submission_rows = []
    post_counter = 0
    submit_counter = 0
    for user in users:
        rng = _stream("morf-synth", spec.seed, spec.course_id, session_id, "events", user.user_id)
        for week_index in range(spec.weeks):
            k = int(user.counts[week_index])
            if k == 0:
                continue
            week_start = start + week_index * WEEK_SECONDS
            offsets = np.sort(rng.integers(0, WEEK_SECONDS, size=k))
            for off in offsets:
                action = _ACTIONS[int(rng.integers(0, len(_ACTIONS)))]
                item = int(rng.integers(1, 40))
                events.append(
                    (
                        int(week_start + off),
                        user.user_id,
                        f"/course/{spec.course_id}/item/{item}",
                        action,
                    )
                )
            if user.posts[week_index]:
                post_counter += 1
                post_id = f"p{post_counter:05d}"
                thread = int(rng.integers(1, 12))
                ts = int(week_start + rng.integers(0, WEEK_SECONDS))
                upvotes = int(rng.integers(0, 10))
                post_rows.append((post_id, f"th{thread:03d}", user.user_id, ts, upvotes))
                comment_candidates.append((post_id, ts))
            if user.submits[week_index]:
                submit_counter += 1
                assignment = week_index + 1
                ts = int(week_start + rng.integers(0, WEEK_SECONDS))
                score = int(rng.integers(40, 101))
                submission_rows.append(
                    (f"s{submit_counter:05d}", f"a{assignment:02d}", user.user_id, ts, score)
                )

    events.sort(key=lambda ev: (ev[0], ev[1]))
    with (bundle_dir / bundles.CLICKSTREAM_FILE).open("w") as fh:
        for ts, uid, url, action in events:
            fh.write(
                json.dumps(
                    {"timestamp": ts, "user_id": uid, "url": url, "action": action},
                    separators=(",", ":"),
                )
                + "\n"
            )

    # comments are attributed by a session-level stream over the roster
    comment_rows = []
    crng = _stream("morf-synth", spec.seed, spec.course_id, session_id, "comments")
    for post_id, post_ts in comment_candidates:
        if crng.random() < 0.3:
            commenter = users[int(crng.integers(0, len(users)))]
            ts = int(post_ts + crng.integers(300, 86400))
            comment_rows.append((f"c{len(comment_rows) + 1:05d}", post_id, commenter.user_id, ts))

    _write_csv(bundle_dir / "forum_posts.csv", bundles.TABLE_HEADERS["forum_posts.csv"], post_rows)
    _write_csv(
        bundle_dir / "forum_comments.csv", bundles.TABLE_HEADERS["forum_comments.csv"], comment_rows
    )
    _write_csv(
        bundle_dir / "assignment_submissions.csv",
        bundles.TABLE_HEADERS["assignment_submissions.csv"],
        submission_rows,
    )
    _write_csv(
        bundle_dir / "grades.csv",
        bundles.TABLE_HEADERS["grades.csv"],
        [(u.user_id, u.grade) for u in users],
    )
    _write_csv(
        bundle_dir / "demographic_survey.csv",
        bundles.TABLE_HEADERS["demographic_survey.csv"],
        [(u.user_id,) + u.survey for u in users if u.survey is not None],
    )
    (bundle_dir / bundles.METADATA_FILE).write_text(
        "\n".join(
            [
                f"course_id: {spec.course_id}",
                f"session_id: {session_id}",
                f"weeks: {spec.weeks}",
                f"start_epoch: {start}",
                f"title: Synthetic course {spec.course_id}",
                f"platform: morf-synth",
            ]
        )
        + "\n"
    )
    return bundle_dir


def generate_course(spec: CourseSpec, out_root: Path) -> list:
    """Generate all sessions of a course; returns the bundle directories.

    Layout: ``<out_root>/<course_id>/<session_id>/<seven files>``.
    """
    out_root = Path(out_root)
    paths = []
    for s in range(1, spec.n_sessions + 1):
        session_id = f"{s:03d}"
        bundle_dir = out_root / spec.course_id / session_id
        generate_session(spec, session_id, bundle_dir)
        paths.append(bundle_dir)
    return paths


def write_manifest(specs: list, out_root: Path, manifest_path: Path = None) -> Path:
    """Generate every course in ``specs`` and write the catalog manifest CSV."""
    out_root = Path(out_root)
    manifest_path = manifest_path or out_root / "manifest.csv"
    rows = []
    for spec in specs:
        for bundle_dir in generate_course(spec, out_root):
            rows.append(
                (
                    spec.course_id,
                    bundle_dir.name,
                    spec.weeks,
                    str(bundle_dir.relative_to(manifest_path.parent)),
                )
            )
    _write_csv(manifest_path, ["course_id", "session_id", "weeks", "bundle_path"], rows)
    return manifest_path


def bundle_digest(bundle_dir: Path) -> str:
    """SHA-256 over the bundle's file names and bytes, for determinism checks."""
    h = hashlib.sha256()
    for name in BUNDLE_FILES:
        h.update(name.encode())
        h.update((Path(bundle_dir) / name).read_bytes())
    return h.hexdigest()
