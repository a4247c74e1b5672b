"""Course/session catalog: registration, holdouts, labels, and data mounts.

The catalog is immutable once loaded; holdout designation returns a new
catalog. The holdout for every multi-session course is its highest-ordinal
(most recent) session, reserved for testing so that reported performance
estimates prediction on a future offering rather than a cross-validated
rearrangement of the past. Courses with a single session are excluded from
predictive experiments: nothing would remain to train on.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional

from morf import dsl
from morf.bundles import ExportBundle, validate_bundle
from morf.errors import MorfError

logger = logging.getLogger("morf.catalog")

MANIFEST_HEADER = ["course_id", "session_id", "weeks", "bundle_path"]

DATA_ROOT = "/morf-data"
OUTPUT_PATH = f"{DATA_ROOT}/output"
MODEL_PATH = f"{DATA_ROOT}/model"


class CatalogError(MorfError):
    pass


class EmptyUserSetError(MorfError):
    pass


class MissingArtifactError(MorfError):
    pass


class LabelLeakageError(MorfError):
    """Raised when a resolved mount would expose holdout labels."""


@dataclass(frozen=True)
class Session:
    course_id: str
    session_id: str
    weeks: int
    bundle_path: Path
    is_holdout: bool = False

    def bundle(self) -> ExportBundle:
        return ExportBundle(path=Path(self.bundle_path))


@dataclass(frozen=True)
class Course:
    course_id: str
    sessions: tuple  # ordered by ordinal session_id

    @property
    def eligible(self) -> bool:
        return len(self.sessions) >= 2

    def holdout_session(self) -> Session:
        for s in self.sessions:
            if s.is_holdout:
                return s
        raise CatalogError(f"course {self.course_id} has no designated holdout")

    def training_sessions(self) -> list:
        return [s for s in self.sessions if not s.is_holdout]

    def session(self, session_id: str) -> Session:
        for s in self.sessions:
            if s.session_id == session_id:
                return s
        raise CatalogError(f"course {self.course_id} has no session {session_id}")


@dataclass(frozen=True)
class Catalog:
    courses: tuple
    dataset_version: str

    def course(self, course_id: str) -> Course:
        for c in self.courses:
            if c.course_id == course_id:
                return c
        raise CatalogError(f"unknown course {course_id}")

    def eligible_courses(self) -> list:
        return [c for c in self.courses if c.eligible]

    def sessions(self) -> list:
        return [s for c in self.courses for s in c.sessions]

    def summary(self) -> dict:
        return {"sessions": len(self.sessions()), "courses": len(self.courses)}


def _canonical_manifest_bytes(rows: list) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for row in sorted(rows):
        writer.writerow(row)
    return buf.getvalue().encode()


def load_manifest(path: Path) -> Catalog:
    """Load and verify a catalog manifest.

    Every referenced bundle must exist on disk and pass schema validation;
    the manifest's declared week count must match the bundle metadata. The
    catalog's dataset_version is the digest of the canonical manifest bytes.
    """
    path = Path(path)
    if not path.exists():
        raise CatalogError(f"manifest not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_HEADER:
            raise CatalogError(
                f"manifest header must be {','.join(MANIFEST_HEADER)}, got {reader.fieldnames}"
            )
        records = list(reader)

    seen = set()
    rows = []
    by_course = {}
    for rec in records:
        course_id, session_id = rec["course_id"], rec["session_id"]
        key = (course_id, session_id)
        if key in seen:
            raise CatalogError(f"duplicate (course, session): {key}")
        seen.add(key)
        weeks = int(rec["weeks"])
        bundle_path = Path(rec["bundle_path"])
        if not bundle_path.is_absolute():
            bundle_path = path.parent / bundle_path
        if not bundle_path.is_dir():
            raise CatalogError(f"bundle directory missing: {bundle_path}")
        report = validate_bundle(ExportBundle(path=bundle_path))
        if not report.ok:
            raise CatalogError(
                f"bundle {bundle_path} fails schema validation: {report.failures()}"
            )
        meta_weeks = ExportBundle(path=bundle_path).weeks
        if meta_weeks != weeks:
            raise CatalogError(
                f"manifest declares {weeks} weeks for {key} but bundle metadata says {meta_weeks}"
            )
        rows.append((course_id, session_id, str(weeks), rec["bundle_path"]))
        by_course.setdefault(course_id, []).append(
            Session(course_id=course_id, session_id=session_id, weeks=weeks, bundle_path=bundle_path)
        )

    courses = tuple(
        Course(course_id=cid, sessions=tuple(sorted(ss, key=lambda s: s.session_id)))
        for cid, ss in sorted(by_course.items())
    )
    version = hashlib.sha256(_canonical_manifest_bytes(rows)).hexdigest()
    return Catalog(courses=courses, dataset_version=version)


def designate_holdouts(catalog: Catalog) -> Catalog:
    """Mark the highest-ordinal session of every multi-session course as holdout."""
    courses = []
    for course in catalog.courses:
        if not course.eligible:
            logger.warning(
                "course %s has a single session; ineligible for predictive experiments",
                course.course_id,
            )
            courses.append(course)
            continue
        last = course.sessions[-1]
        sessions = tuple(
            replace(s, is_holdout=(s.session_id == last.session_id)) for s in course.sessions
        )
        courses.append(replace(course, sessions=sessions))
    return replace(catalog, courses=tuple(courses))


# ---------------------------------------------------------------------------
# ground-truth labels
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LabelRow:
    user_id: str
    dropout: int
    dropout_week: int


@dataclass(frozen=True)
class LabelTable:
    rows: tuple
    weeks: int

    def as_mapping(self, label_type: str) -> dict:
        if label_type == "dropout":
            return {r.user_id: r.dropout for r in self.rows}
        if label_type == "dropout_week":
            return {r.user_id: r.dropout_week for r in self.rows}
        raise CatalogError(f"unknown label_type {label_type!r}")

    def to_csv(self, label_type: str) -> str:
        mapping = self.as_mapping(label_type)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["user_id", "label"])
        for user_id in sorted(mapping):
            writer.writerow([user_id, mapping[user_id]])
        return buf.getvalue()


def extract_labels(session: Session, label_type: str) -> LabelTable:
    """Compute dropout labels for one session from its clickstream.

    A user's dropout_week is the 1-based index of the last course week with
    any clickstream activity; dropout is 1 iff that week precedes the final
    week. One scan supports both the binary and the regression task.
    """
    if label_type not in dsl.LABEL_TYPES:
        raise CatalogError(f"unknown label_type {label_type!r}")
    bundle = session.bundle()
    last_week = {}
    for event in bundle.clickstream():
        week = bundle.week_of(event.timestamp)
        prev = last_week.get(event.user_id, 0)
        if week > prev:
            last_week[event.user_id] = week
    if not last_week:
        raise EmptyUserSetError(f"session {session.course_id}/{session.session_id} has no active users")
    rows = tuple(
        LabelRow(user_id=u, dropout=int(w < session.weeks), dropout_week=w)
        for u, w in sorted(last_week.items())
    )
    return LabelTable(rows=rows, weeks=session.weeks)


# ---------------------------------------------------------------------------
# data mounts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InvocationArgs:
    mode: str
    course_id: str
    session_id: str
    label_type: str

    def argv(self) -> list:
        return [
            "--mode", self.mode,
            "--course", self.course_id,
            "--session", self.session_id,
            "--label-type", self.label_type,
        ]


@dataclass(frozen=True)
class MountSpec:
    """Resolved data mounts for one sandbox run; all inputs are read-only."""

    mode: str  # extract | train | test
    read_only_mounts: tuple  # ((host Path, container path str), ...)
    invocation: InvocationArgs
    writable_output: str = OUTPUT_PATH

    def container_paths(self) -> list:
        return [container for _, container in self.read_only_mounts]

    def labels_paths(self) -> list:
        return [p for p in self.container_paths() if p.startswith(f"{DATA_ROOT}/labels/")]


@dataclass
class MountContext:
    """Host-side inputs available to mount resolution.

    ``features`` maps an extraction scope (course_id or None, session_id or
    None) to the host path of that scope's features.csv artifact. ``labels``
    returns the host path of the platform-computed labels file for a scope.
    ``model`` is the unpacked trained-model directory for test mounts.
    """

    features: dict = None
    labels: Optional[Callable] = None
    model: Optional[Path] = None

    def __post_init__(self):
        if self.features is None:
            self.features = {}


def features_container_path(course_id: Optional[str], session_id: Optional[str]) -> str:
    if course_id is None:
        return f"{DATA_ROOT}/features/features.csv"
    if session_id is None:
        return f"{DATA_ROOT}/features/{course_id}/features.csv"
    return f"{DATA_ROOT}/features/{course_id}/{session_id}/features.csv"


def labels_container_path(course_id: Optional[str], session_id: Optional[str]) -> str:
    if course_id is None:
        return f"{DATA_ROOT}/labels/labels.csv"
    if session_id is None:
        return f"{DATA_ROOT}/labels/{course_id}/labels.csv"
    return f"{DATA_ROOT}/labels/{course_id}/{session_id}/labels.csv"


def raw_container_path(course_id: str, session_id: str) -> str:
    return f"{DATA_ROOT}/raw/{course_id}/{session_id}"


def _raw_scope_sessions(task: dsl.Task, catalog: Catalog) -> list:
    """Sessions whose raw bundles an extract-stage task reads."""
    if task.stage is dsl.Stage.EXTRACT_HOLDOUT:
        return [catalog.course(task.course_id).holdout_session()]
    if task.course_id is not None and task.session_id is not None:
        return [catalog.course(task.course_id).session(task.session_id)]
    if task.course_id is not None:
        return catalog.course(task.course_id).training_sessions()
    return [s for c in catalog.eligible_courses() for s in c.training_sessions()]


def _feature_scopes_for_train(task: dsl.Task, features: dict) -> list:
    """Extraction scopes feeding a train task, most specific available first."""
    if task.granularity is dsl.Granularity.SESSION:
        for scope in ((task.course_id, task.session_id), (task.course_id, None), (None, None)):
            if scope in features:
                return [scope]
        raise MissingArtifactError(
            f"no feature artifact covers {task.course_id}/{task.session_id}"
        )
    if task.granularity is dsl.Granularity.COURSE:
        session_scopes = sorted(
            s for s in features if s[0] == task.course_id and s[1] is not None
        )
        if session_scopes:
            return session_scopes
        for scope in ((task.course_id, None), (None, None)):
            if scope in features:
                return [scope]
        raise MissingArtifactError(f"no feature artifact covers course {task.course_id}")
    scopes = sorted(features, key=lambda s: (s[0] or "", s[1] or ""))
    if not scopes:
        raise MissingArtifactError("no feature artifacts available for train_all")
    return scopes


def resolve_mounts(
    task: dsl.Task,
    catalog: Catalog,
    ctx: MountContext,
    label_type: Optional[str],
) -> MountSpec:
    """Resolve the read-only mounts and invocation for one task's sandbox run.

    Raw data is mounted only for extract-mode runs, labels only for train
    mode, and the holdout's features (never its labels) for test mode. The
    returned spec is checked against the leakage rules before use.
    """
    label_arg = label_type or "-"
    course_arg = task.course_id or "-"
    session_arg = task.session_id or "-"
    mounts = []

    if task.stage in (dsl.Stage.EXTRACT, dsl.Stage.EXTRACT_HOLDOUT):
        mode = "extract"
        for session in _raw_scope_sessions(task, catalog):
            if task.stage is dsl.Stage.EXTRACT and session.is_holdout:
                raise LabelLeakageError(
                    f"holdout session {session.course_id}/{session.session_id} "
                    "cannot appear in a non-holdout extract mount"
                )
            mounts.append(
                (Path(session.bundle_path), raw_container_path(session.course_id, session.session_id))
            )
    elif task.stage is dsl.Stage.TRAIN:
        mode = "train"
        if ctx.labels is None:
            raise MissingArtifactError("train mounts require a labels provider")
        for course_id, session_id in _feature_scopes_for_train(task, ctx.features):
            if course_id is not None and session_id is not None:
                if catalog.course(course_id).session(session_id).is_holdout:
                    raise LabelLeakageError(
                        f"holdout session {course_id}/{session_id} cannot feed a train mount"
                    )
            mounts.append(
                (Path(ctx.features[(course_id, session_id)]), features_container_path(course_id, session_id))
            )
            mounts.append(
                (Path(ctx.labels(course_id, session_id)), labels_container_path(course_id, session_id))
            )
    elif task.stage is dsl.Stage.TEST:
        mode = "test"
        holdout = catalog.course(task.course_id).holdout_session()
        scope = (task.course_id, holdout.session_id)
        if scope not in ctx.features:
            raise MissingArtifactError(
                f"missing holdout feature artifact for course {task.course_id}"
            )
        mounts.append((Path(ctx.features[scope]), features_container_path(*scope)))
        if ctx.model is None:
            raise MissingArtifactError(f"missing trained model for course {task.course_id}")
        mounts.append((Path(ctx.model), MODEL_PATH))
        session_arg = holdout.session_id
    else:
        raise CatalogError(f"stage {task.stage.value} has no sandbox mounts")

    spec = MountSpec(
        mode=mode,
        read_only_mounts=tuple(mounts),
        invocation=InvocationArgs(
            mode=mode, course_id=course_arg, session_id=session_arg, label_type=label_arg
        ),
    )
    if spec.mode == "test" and spec.labels_paths():
        raise LabelLeakageError("test-mode mounts must not contain any labels path")
    return spec
