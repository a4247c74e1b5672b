"""Controller-script DSL: parsing, validation, and task-graph expansion.

Controller scripts are a restricted call-statement language, not a general
purpose program: a script is a sequence of statements of the form
``name(key = 'value', ...)``, with ``#`` line comments. The recognized
statement names are the cross product {extract, extract_holdout, train,
test} x {session, course, all}, plus ``evaluate_course``, ``evaluate_all``
and ``fork_features``. Everything here is pure; no shared mutable state.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

from morf.errors import MorfError

LABEL_TYPES = ("dropout", "dropout_week")


class Stage(str, enum.Enum):
    EXTRACT = "extract"
    EXTRACT_HOLDOUT = "extract_holdout"
    TRAIN = "train"
    TEST = "test"
    EVALUATE = "evaluate"
    FORK_FEATURES = "fork_features"


class Granularity(str, enum.Enum):
    SESSION = "session"
    COURSE = "course"
    ALL = "all"

    @property
    def level(self) -> int:
        return {"session": 0, "course": 1, "all": 2}[self.value]


# statement name -> (stage, granularity)
STATEMENT_NAMES = {}
for _stage in (Stage.EXTRACT, Stage.EXTRACT_HOLDOUT, Stage.TRAIN, Stage.TEST):
    for _gran in Granularity:
        STATEMENT_NAMES[f"{_stage.value}_{_gran.value}"] = (_stage, _gran)
STATEMENT_NAMES["evaluate_course"] = (Stage.EVALUATE, Granularity.COURSE)
STATEMENT_NAMES["evaluate_all"] = (Stage.EVALUATE, Granularity.ALL)
STATEMENT_NAMES["fork_features"] = (Stage.FORK_FEATURES, None)

# parameter keys recognized per stage
_STAGE_PARAMS = {
    Stage.EXTRACT: frozenset(),
    Stage.EXTRACT_HOLDOUT: frozenset(),
    Stage.TRAIN: frozenset({"label_type"}),
    Stage.TEST: frozenset({"label_type"}),
    Stage.EVALUATE: frozenset({"label_type"}),
    Stage.FORK_FEATURES: frozenset({"job"}),
}

_LABELED_STAGES = (Stage.TRAIN, Stage.TEST, Stage.EVALUATE)


class DslError(MorfError):
    pass


class LexicalError(DslError):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"line {line}, column {col}: {message}")
        self.line = line
        self.col = col


class UnknownStatementError(DslError):
    pass


class UnknownParameterError(DslError):
    pass


class InvalidParameterValueError(DslError):
    pass


class DuplicateStatementError(DslError):
    pass


class EmptyPlanError(DslError):
    pass


class PlanValidationError(MorfError):
    """Base for post-parse plan validation failures."""


class OrderingError(PlanValidationError):
    pass


class GranularityMismatchError(PlanValidationError):
    pass


class MissingLabelTypeError(PlanValidationError):
    pass


class LabelTypeConflictError(PlanValidationError):
    pass


class ForkConflictError(PlanValidationError):
    pass


class NoEligibleCourseError(MorfError):
    pass


@dataclass(frozen=True)
class WorkflowStep:
    stage: Stage
    granularity: Optional[Granularity]
    params: tuple = ()  # sorted ((key, value), ...)

    @property
    def label_type(self) -> Optional[str]:
        return dict(self.params).get("label_type")

    @property
    def fork_source(self) -> Optional[str]:
        return dict(self.params).get("job")

    @property
    def statement_name(self) -> str:
        if self.stage is Stage.FORK_FEATURES:
            return "fork_features"
        return f"{self.stage.value}_{self.granularity.value}"


@dataclass(frozen=True)
class WorkflowPlan:
    steps: tuple
    source_text: str = ""

    def steps_by_stage(self, stage: Stage) -> list:
        return [s for s in self.steps if s.stage is stage]


@dataclass(frozen=True)
class ValidatedPlan:
    plan: WorkflowPlan
    label_type: Optional[str]
    fork_source: Optional[str] = None

    @property
    def steps(self) -> tuple:
        return self.plan.steps


# ---------------------------------------------------------------------------
# tokenizer / parser
# ---------------------------------------------------------------------------

_QUOTE_PAIRS = {"'": "'", '"': '"', "`": "'"}  # open -> close


@dataclass(frozen=True)
class _Token:
    kind: str  # ident | string | punct | end
    value: str
    line: int
    col: int


def _tokenize(text: str) -> list:
    tokens = []
    line, col = 1, 1
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch == "\n":
            line += 1
            col = 1
            i += 1
            continue
        if ch in " \t\r":
            i += 1
            col += 1
            continue
        if ch == "#":
            while i < n and text[i] != "\n":
                i += 1
            continue
        if ch.isalpha() or ch == "_":
            start = i
            start_col = col
            while i < n and (text[i].isalnum() or text[i] == "_"):
                i += 1
                col += 1
            tokens.append(_Token("ident", text[start:i], line, start_col))
            continue
        if ch in _QUOTE_PAIRS:
            close = _QUOTE_PAIRS[ch]
            start_col = col
            i += 1
            col += 1
            start = i
            while i < n and text[i] != close:
                if text[i] == "\n":
                    raise LexicalError("unterminated string", line, start_col)
                i += 1
                col += 1
            if i >= n:
                raise LexicalError("unterminated string", line, start_col)
            tokens.append(_Token("string", text[start:i], line, start_col))
            i += 1
            col += 1
            continue
        if ch in "(),=":
            tokens.append(_Token("punct", ch, line, col))
            i += 1
            col += 1
            continue
        raise LexicalError(f"unexpected character {ch!r}", line, col)
    tokens.append(_Token("end", "", line, col))
    return tokens


class _Parser:
    def __init__(self, tokens: list):
        self.tokens = tokens
        self.pos = 0

    def peek(self) -> _Token:
        return self.tokens[self.pos]

    def take(self, kind: str, value: Optional[str] = None) -> _Token:
        tok = self.tokens[self.pos]
        if tok.kind != kind or (value is not None and tok.value != value):
            expected = value if value is not None else kind
            raise LexicalError(
                f"expected {expected!r}, found {tok.value or tok.kind!r}", tok.line, tok.col
            )
        self.pos += 1
        return tok

    def parse_statement(self) -> WorkflowStep:
        name_tok = self.take("ident")
        if name_tok.value not in STATEMENT_NAMES:
            raise UnknownStatementError(
                f"unknown statement {name_tok.value!r} at line {name_tok.line}"
            )
        stage, granularity = STATEMENT_NAMES[name_tok.value]
        self.take("punct", "(")
        params = {}
        if self.peek().kind == "ident":
            while True:
                key_tok = self.take("ident")
                self.take("punct", "=")
                val_tok = self.take("string")
                if key_tok.value not in _STAGE_PARAMS[stage]:
                    raise UnknownParameterError(
                        f"parameter {key_tok.value!r} not recognized for "
                        f"{name_tok.value!r} (line {key_tok.line})"
                    )
                if key_tok.value in params:
                    raise DuplicateStatementError(
                        f"parameter {key_tok.value!r} repeated in {name_tok.value!r}"
                    )
                params[key_tok.value] = val_tok.value
                if self.peek().kind == "punct" and self.peek().value == ",":
                    self.take("punct", ",")
                    continue
                break
        self.take("punct", ")")
        if "label_type" in params and params["label_type"] not in LABEL_TYPES:
            raise InvalidParameterValueError(
                f"label_type must be one of {LABEL_TYPES}, got {params['label_type']!r}"
            )
        return WorkflowStep(
            stage=stage, granularity=granularity, params=tuple(sorted(params.items()))
        )


def parse_script(text: str) -> WorkflowPlan:
    """Parse controller-script text into an ordered workflow plan.

    Raises a DslError subclass for lexical problems (with position), unknown
    statement names, unrecognized parameter keys, duplicate statements, and
    empty scripts.
    """
    tokens = _tokenize(text)
    parser = _Parser(tokens)
    steps = []
    seen = set()
    while parser.peek().kind != "end":
        step = parser.parse_statement()
        key = (step.stage, step.granularity)
        if key in seen:
            raise DuplicateStatementError(f"duplicate statement {step.statement_name!r}")
        seen.add(key)
        steps.append(step)
    if not steps:
        raise EmptyPlanError("script contains no statements")
    return WorkflowPlan(steps=tuple(steps), source_text=text)


def render_script(plan: WorkflowPlan) -> str:
    """Pretty-print a plan in canonical form.

    One statement per line, single-quoted values, a space around ``=`` and
    after commas. ``parse_script(render_script(p)).steps == p.steps``.
    """
    lines = []
    for step in plan.steps:
        params = ", ".join(f"{k} = '{v}'" for k, v in step.params)
        lines.append(f"{step.statement_name}({params})")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


def validate_plan(plan: WorkflowPlan, config=None) -> ValidatedPlan:
    """Check workflow ordering and label consistency; resolve the label type.

    Rules: a train step needs a preceding extract (or fork_features); a test
    step needs a preceding train of the same granularity plus a preceding
    extract_holdout (or fork); evaluate needs a preceding test; all
    train/test/evaluate steps must agree on one label_type. ``config``, when
    given, contributes an expected label_type to the consistency check.
    """
    steps = plan.steps
    for stage in (Stage.EXTRACT, Stage.EXTRACT_HOLDOUT, Stage.TRAIN, Stage.TEST, Stage.EVALUATE):
        if len(plan.steps_by_stage(stage)) > 1:
            raise OrderingError(f"plan has more than one {stage.value} step")

    fork_steps = plan.steps_by_stage(Stage.FORK_FEATURES)
    fork_source = fork_steps[0].fork_source if fork_steps else None
    if fork_steps and fork_source is None:
        raise MissingLabelTypeError("fork_features requires a job = '<job-id>' parameter")
    has_extract_like = bool(
        plan.steps_by_stage(Stage.EXTRACT) or plan.steps_by_stage(Stage.EXTRACT_HOLDOUT)
    )
    if fork_steps and has_extract_like:
        raise ForkConflictError("fork_features cannot be combined with extract steps")

    def index_of(stage: Stage) -> Optional[int]:
        for i, s in enumerate(steps):
            if s.stage is stage:
                return i
        return None

    i_extract = index_of(Stage.EXTRACT)
    i_holdout = index_of(Stage.EXTRACT_HOLDOUT)
    i_fork = index_of(Stage.FORK_FEATURES)
    i_train = index_of(Stage.TRAIN)
    i_test = index_of(Stage.TEST)
    i_evaluate = index_of(Stage.EVALUATE)

    if i_train is not None:
        sources = [i for i in (i_extract, i_fork) if i is not None and i < i_train]
        if not sources:
            raise OrderingError("train step requires a preceding extract step or fork_features")
        if i_extract is not None and i_extract < i_train:
            g_extract = steps[i_extract].granularity
            g_train = steps[i_train].granularity
            if g_extract.level > g_train.level:
                raise GranularityMismatchError(
                    f"extract granularity {g_extract.value!r} is coarser than "
                    f"train granularity {g_train.value!r}"
                )
    if i_test is not None:
        if i_train is None or i_train > i_test:
            raise OrderingError("test step requires a preceding train step")
        if steps[i_train].granularity is not steps[i_test].granularity:
            raise GranularityMismatchError(
                f"test granularity {steps[i_test].granularity.value!r} does not match "
                f"train granularity {steps[i_train].granularity.value!r}"
            )
        holdout_sources = [i for i in (i_holdout, i_fork) if i is not None and i < i_test]
        if not holdout_sources:
            raise OrderingError(
                "test step requires a preceding extract_holdout step or fork_features"
            )
    if i_evaluate is not None and (i_test is None or i_test > i_evaluate):
        raise OrderingError("evaluate step requires a preceding test step")

    label_types = set()
    for step in steps:
        if step.stage in _LABELED_STAGES:
            if step.label_type is None:
                raise MissingLabelTypeError(
                    f"{step.statement_name} requires a label_type parameter"
                )
            label_types.add(step.label_type)
    if len(label_types) > 1:
        raise LabelTypeConflictError(
            f"train/test/evaluate steps disagree on label_type: {sorted(label_types)}"
        )
    label_type = next(iter(label_types)) if label_types else None

    expected = getattr(config, "label_type", None) if config is not None else None
    if expected is not None and label_type is not None and expected != label_type:
        raise LabelTypeConflictError(
            f"config label_type {expected!r} does not match script label_type {label_type!r}"
        )
    if label_type is None:
        label_type = expected

    return ValidatedPlan(plan=plan, label_type=label_type, fork_source=fork_source)


# ---------------------------------------------------------------------------
# task-graph expansion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Task:
    task_id: str
    step_index: int
    stage: Stage
    granularity: Optional[Granularity]
    course_id: Optional[str] = None
    session_id: Optional[str] = None
    depends_on: tuple = ()


@dataclass(frozen=True)
class TaskGraph:
    tasks: tuple
    plan: ValidatedPlan

    def by_stage(self, stage: Stage) -> list:
        return [t for t in self.tasks if t.stage is stage]

    def task(self, task_id: str) -> Task:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise KeyError(task_id)

    def topological_order(self) -> list:
        """Kahn's algorithm; raises if the graph has a cycle."""
        indeg = {t.task_id: len(t.depends_on) for t in self.tasks}
        dependents = {t.task_id: [] for t in self.tasks}
        for t in self.tasks:
            for dep in t.depends_on:
                dependents[dep].append(t.task_id)
        ready = [tid for tid, d in indeg.items() if d == 0]
        order = []
        while ready:
            tid = ready.pop()
            order.append(tid)
            for child in dependents[tid]:
                indeg[child] -= 1
                if indeg[child] == 0:
                    ready.append(child)
        if len(order) != len(self.tasks):
            raise MorfError("task graph contains a cycle")
        return order


def _task_id(idx: int, stage: Stage, course: Optional[str], session: Optional[str]) -> str:
    parts = [f"t{idx:03d}", stage.value]
    if course is not None:
        parts.append(course)
    if session is not None:
        parts.append(session)
    return "-".join(parts)


def expand_tasks(validated: ValidatedPlan, catalog) -> TaskGraph:
    """Fan a validated plan out into per-course/per-session tasks.

    Cardinality: extract and train fan out by their granularity (one task
    per non-holdout session, per course, or one global task); holdout
    extraction, test, and evaluate are always per eligible course, since the
    holdout session that anchors them is a per-course notion.
    """
    courses = catalog.eligible_courses()
    if not courses:
        raise NoEligibleCourseError(
            "catalog has no course eligible for predictive experiments "
            "(a course needs at least two sessions)"
        )

    tasks = []
    counter = 0

    def add(stage, granularity, step_index, course_id=None, session_id=None, deps=()):
        nonlocal counter
        task = Task(
            task_id=_task_id(counter, stage, course_id, session_id),
            step_index=step_index,
            stage=stage,
            granularity=granularity,
            course_id=course_id,
            session_id=session_id,
            depends_on=tuple(deps),
        )
        counter += 1
        tasks.append(task)
        return task

    # per-scope lookup tables used to wire dependencies
    extract_tasks = []  # all extract-stage tasks (fork task stands in when forking)
    extract_by_session = {}  # (course_id, session_id) -> task
    extract_by_course = {}  # course_id -> task
    holdout_by_course = {}
    train_by_course = {}
    train_by_session = {}
    train_all_task = None
    test_by_course = {}
    fork_task = None

    for step_index, step in enumerate(validated.steps):
        stage, gran = step.stage, step.granularity
        if stage is Stage.FORK_FEATURES:
            fork_task = add(stage, None, step_index)
            extract_tasks.append(fork_task)
        elif stage is Stage.EXTRACT:
            if gran is Granularity.SESSION:
                for course in courses:
                    for session in course.training_sessions():
                        t = add(stage, gran, step_index, course.course_id, session.session_id)
                        extract_by_session[(course.course_id, session.session_id)] = t
                        extract_tasks.append(t)
            elif gran is Granularity.COURSE:
                for course in courses:
                    t = add(stage, gran, step_index, course.course_id)
                    extract_by_course[course.course_id] = t
                    extract_tasks.append(t)
            else:
                t = add(stage, gran, step_index)
                extract_tasks.append(t)
        elif stage is Stage.EXTRACT_HOLDOUT:
            for course in courses:
                holdout = course.holdout_session()
                t = add(stage, gran, step_index, course.course_id, holdout.session_id)
                holdout_by_course[course.course_id] = t
        elif stage is Stage.TRAIN:

            def deps_for_scope(course_id, session_id):
                if fork_task is not None:
                    return [fork_task.task_id]
                if extract_by_session:
                    if course_id is None:
                        return [t.task_id for t in extract_by_session.values()]
                    if session_id is None:
                        return [
                            t.task_id
                            for (c, _), t in extract_by_session.items()
                            if c == course_id
                        ]
                    return [extract_by_session[(course_id, session_id)].task_id]
                if extract_by_course:
                    if course_id is None:
                        return [t.task_id for t in extract_by_course.values()]
                    return [extract_by_course[course_id].task_id]
                return [t.task_id for t in extract_tasks]

            if gran is Granularity.SESSION:
                for course in courses:
                    for session in course.training_sessions():
                        t = add(
                            stage,
                            gran,
                            step_index,
                            course.course_id,
                            session.session_id,
                            deps=deps_for_scope(course.course_id, session.session_id),
                        )
                        train_by_session[(course.course_id, session.session_id)] = t
            elif gran is Granularity.COURSE:
                for course in courses:
                    t = add(
                        stage,
                        gran,
                        step_index,
                        course.course_id,
                        deps=deps_for_scope(course.course_id, None),
                    )
                    train_by_course[course.course_id] = t
            else:
                train_all_task = add(stage, gran, step_index, deps=deps_for_scope(None, None))
        elif stage is Stage.TEST:
            for course in courses:
                deps = []
                if gran is Granularity.SESSION:
                    last = course.training_sessions()[-1]
                    deps.append(train_by_session[(course.course_id, last.session_id)].task_id)
                elif gran is Granularity.COURSE:
                    deps.append(train_by_course[course.course_id].task_id)
                else:
                    deps.append(train_all_task.task_id)
                if fork_task is not None:
                    deps.append(fork_task.task_id)
                else:
                    deps.append(holdout_by_course[course.course_id].task_id)
                holdout = course.holdout_session()
                t = add(stage, gran, step_index, course.course_id, holdout.session_id, deps=deps)
                test_by_course[course.course_id] = t
        elif stage is Stage.EVALUATE:
            for course in courses:
                holdout = course.holdout_session()
                add(
                    stage,
                    gran,
                    step_index,
                    course.course_id,
                    holdout.session_id,
                    deps=[test_by_course[course.course_id].task_id],
                )

    graph = TaskGraph(tasks=tuple(tasks), plan=validated)
    graph.topological_order()  # construction sanity: must be acyclic
    return graph
