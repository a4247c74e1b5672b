"""Production-rule analysis: parse if-then rules, tabulate, and test.

A rule reads ``if a student [who is <attribute>] does <operator>(week = N)
then <outcome>``. Each session yields a 2x2 contingency table (antecedent x
outcome over eligible users), tested with the chi-square statistic, or
Fisher's exact test when any expected cell is small. Session results are
aggregated into a replication-style count of significant same-direction
findings plus a Stouffer combined z.

Rules are evaluated natively against the bundle tables; the fixed
attribute/operator/outcome vocabulary is the extension point for
user-defined predicates.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

from morf import catalog as catalog_mod
from morf.bundles import ExportBundle
from morf.errors import MorfError
from morf.evaluation import chi2_sf_1df, normal_inv_cdf

ATTRIBUTES = ("any", "early_joiner", "high_week1_activity", "low_week1_activity")
OPERATORS = ("posts_in_forum", "submits_assignment", "active", "inactive")
OUTCOMES = ("dropout", "completion")

_EARLY_JOIN_SECONDS = 2 * 86400  # first event within two days of course start


class RuleError(MorfError):
    pass


class RuleSyntaxError(RuleError):
    pass


class UnknownVocabularyError(RuleError):
    pass


class RuleEvaluationError(RuleError):
    pass


@dataclass(frozen=True)
class ProductionRule:
    attribute: str
    operator: str
    week: int
    outcome: str
    source_text: str = ""

    def describe(self) -> str:
        attr = "" if self.attribute == "any" else f"who is {self.attribute} "
        return f"if a student {attr}does {self.operator}(week = {self.week}) then {self.outcome}"


_RULE_RE = re.compile(
    r"^if\s+a\s+student"
    r"(?:\s+who\s+is\s+(?P<attr>\w+))?"
    r"\s+does\s+(?P<op>\w+)\s*\(\s*week\s*=\s*(?P<week>\S+?)\s*\)"
    r"\s+then\s+(?P<out>\w+)$",
    re.IGNORECASE,
)


def parse_rule(text: str) -> ProductionRule:
    """Parse a single-rule file; case-insensitive, ``#`` comments allowed."""
    lines = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
    statement = " ".join(part for part in lines if part).strip()
    if not statement:
        raise RuleSyntaxError("rule file contains no rule")
    if statement.lower().count("if a student") > 1:
        raise RuleSyntaxError("rule file must contain exactly one rule")
    match = _RULE_RE.match(statement)
    if not match:
        raise RuleSyntaxError(f"malformed rule: {statement!r}")
    attr = (match.group("attr") or "any").lower()
    op = match.group("op").lower()
    out = match.group("out").lower()
    if attr not in ATTRIBUTES:
        raise UnknownVocabularyError(f"unknown attribute {attr!r} (have {ATTRIBUTES})")
    if op not in OPERATORS:
        raise UnknownVocabularyError(f"unknown operator {op!r} (have {OPERATORS})")
    if out not in OUTCOMES:
        raise UnknownVocabularyError(f"unknown outcome {out!r} (have {OUTCOMES})")
    try:
        week = int(match.group("week"))
    except ValueError:
        raise RuleSyntaxError(f"malformed week value {match.group('week')!r}") from None
    return ProductionRule(attribute=attr, operator=op, week=week, outcome=out, source_text=text)


@dataclass(frozen=True)
class ContingencyTable:
    a: int  # antecedent true,  outcome true
    b: int  # antecedent true,  outcome false
    c: int  # antecedent false, outcome true
    d: int  # antecedent false, outcome false
    course_id: str = ""
    session_id: str = ""

    @property
    def total(self) -> int:
        return self.a + self.b + self.c + self.d

    def rate_difference(self) -> Optional[float]:
        if (self.a + self.b) == 0 or (self.c + self.d) == 0:
            return None
        return self.a / (self.a + self.b) - self.c / (self.c + self.d)


@dataclass(frozen=True)
class RuleTestResult:
    table: ContingencyTable
    statistic: Optional[float]
    p_value: Optional[float]
    direction: int
    test_used: str  # chi_square | fisher_exact | none
    reason: str = ""

    def as_dict(self) -> dict:
        return {
            "course_id": self.table.course_id,
            "session_id": self.table.session_id,
            "table": [self.table.a, self.table.b, self.table.c, self.table.d],
            "statistic": "NA" if self.statistic is None else self.statistic,
            "p_value": "NA" if self.p_value is None else self.p_value,
            "direction": self.direction,
            "test_used": self.test_used,
            "reason": self.reason,
        }


@dataclass
class _UserFacts:
    first_event_ts: Optional[int] = None
    weekly_events: dict = field(default_factory=dict)  # week -> count
    post_weeks: set = field(default_factory=set)
    submit_weeks: set = field(default_factory=set)

    def events_in(self, week: int) -> int:
        return self.weekly_events.get(week, 0)


def _session_facts(bundle: ExportBundle) -> dict:
    facts = {}
    for event in bundle.clickstream():
        fact = facts.setdefault(event.user_id, _UserFacts())
        week = bundle.week_of(event.timestamp)
        fact.weekly_events[week] = fact.weekly_events.get(week, 0) + 1
        if fact.first_event_ts is None or event.timestamp < fact.first_event_ts:
            fact.first_event_ts = event.timestamp
    for row in bundle.table_rows("forum_posts.csv"):
        fact = facts.setdefault(row["user_id"], _UserFacts())
        fact.post_weeks.add(bundle.week_of(int(row["timestamp"])))
    for row in bundle.table_rows("assignment_submissions.csv"):
        fact = facts.setdefault(row["user_id"], _UserFacts())
        fact.submit_weeks.add(bundle.week_of(int(row["timestamp"])))
    return facts


def _median(values: list) -> float:
    ordered = sorted(values)
    n = len(ordered)
    mid = n // 2
    return float(ordered[mid]) if n % 2 else (ordered[mid - 1] + ordered[mid]) / 2.0


def evaluate_rule(
    rule: ProductionRule, session: catalog_mod.Session, labels: catalog_mod.LabelTable
) -> ContingencyTable:
    """Tabulate one rule over one session's labeled users.

    Eligible users are those satisfying the attribute; the antecedent is the
    operator predicate over the behavioral tables; the outcome is drawn from
    the platform labels. a..d partition the eligible users.
    """
    if not 1 <= rule.week <= session.weeks:
        raise RuleEvaluationError(
            f"rule week {rule.week} outside session weeks [1, {session.weeks}]"
        )
    bundle = session.bundle()
    facts = _session_facts(bundle)
    start = bundle.start_epoch
    dropout_by_user = {r.user_id: r.dropout for r in labels.rows}

    week1_counts = [facts[u].events_in(1) for u in dropout_by_user if u in facts]
    median_week1 = _median(week1_counts) if week1_counts else 0.0

    def attribute_holds(user_id: str) -> bool:
        fact = facts.get(user_id, _UserFacts())
        if rule.attribute == "any":
            return True
        if rule.attribute == "early_joiner":
            return fact.first_event_ts is not None and fact.first_event_ts < start + _EARLY_JOIN_SECONDS
        if rule.attribute == "high_week1_activity":
            return fact.events_in(1) >= median_week1
        return fact.events_in(1) < median_week1  # low_week1_activity

    def antecedent_holds(user_id: str) -> bool:
        fact = facts.get(user_id, _UserFacts())
        if rule.operator == "posts_in_forum":
            return rule.week in fact.post_weeks
        if rule.operator == "submits_assignment":
            return rule.week in fact.submit_weeks
        if rule.operator == "active":
            return fact.events_in(rule.week) > 0
        return fact.events_in(rule.week) == 0  # inactive

    a = b = c = d = 0
    for user_id, dropout in dropout_by_user.items():
        if not attribute_holds(user_id):
            continue
        outcome = bool(dropout) if rule.outcome == "dropout" else not dropout
        if antecedent_holds(user_id):
            if outcome:
                a += 1
            else:
                b += 1
        elif outcome:
            c += 1
        else:
            d += 1
    return ContingencyTable(a=a, b=b, c=c, d=d, course_id=session.course_id, session_id=session.session_id)


def fisher_exact_two_sided(a: int, b: int, c: int, d: int) -> float:
    """Two-sided Fisher's exact p by summing tables no more probable than
    the observed one; exact integer arithmetic throughout."""
    r1, r2 = a + b, c + d
    m1 = a + c
    lo = max(0, m1 - r2)
    hi = min(m1, r1)
    observed = math.comb(r1, a) * math.comb(r2, m1 - a)
    total = 0
    accept = 0
    for k in range(lo, hi + 1):
        weight = math.comb(r1, k) * math.comb(r2, m1 - k)
        total += weight
        if weight <= observed:
            accept += weight
    return float(Fraction(accept, total))


def test_rule(table: ContingencyTable) -> RuleTestResult:
    """Chi-square test of association, falling back to Fisher's exact test
    when any expected cell count is below 5; zero margins yield an NA result."""
    a, b, c, d = table.a, table.b, table.c, table.d
    n = table.total
    if n <= 0:
        raise RuleEvaluationError("empty contingency table")
    row1, row2 = a + b, c + d
    col1, col2 = a + c, b + d
    if 0 in (row1, row2, col1, col2):
        return RuleTestResult(
            table=table,
            statistic=None,
            p_value=None,
            direction=0,
            test_used="none",
            reason="zero margin: association undefined",
        )
    diff = table.rate_difference()
    direction = (diff > 0) - (diff < 0)
    expected_min = min(row1 * col1, row1 * col2, row2 * col1, row2 * col2) / n
    if expected_min < 5:
        p = fisher_exact_two_sided(a, b, c, d)
        return RuleTestResult(
            table=table, statistic=None, p_value=p, direction=direction, test_used="fisher_exact"
        )
    stat = n * (a * d - b * c) ** 2 / (row1 * row2 * col1 * col2)
    p = chi2_sf_1df(stat)
    return RuleTestResult(
        table=table, statistic=stat, p_value=p, direction=direction, test_used="chi_square"
    )


@dataclass(frozen=True)
class AggregateReport:
    n_sessions: int
    n_significant_same_direction: int
    n_significant_opposite: int
    modal_direction: int
    combined_z: Optional[float]
    alpha: float
    per_session: tuple

    def as_dict(self) -> dict:
        return {
            "n_sessions": self.n_sessions,
            "n_significant_same_direction": self.n_significant_same_direction,
            "n_significant_opposite": self.n_significant_opposite,
            "modal_direction": self.modal_direction,
            "combined_z": "NA" if self.combined_z is None else self.combined_z,
            "alpha": self.alpha,
            "per_session": [r.as_dict() for r in self.per_session],
        }

    def to_text(self) -> str:
        lines = [
            f"{'course':<16} {'session':<8} {'a':>5} {'b':>5} {'c':>5} {'d':>5} "
            f"{'test':<13} {'p':>10} {'dir':>4}"
        ]
        for r in self.per_session:
            t = r.table
            p = "NA" if r.p_value is None else f"{r.p_value:.4g}"
            lines.append(
                f"{t.course_id:<16} {t.session_id:<8} {t.a:>5} {t.b:>5} {t.c:>5} {t.d:>5} "
                f"{r.test_used:<13} {p:>10} {r.direction:>+4}"
            )
        z = "NA" if self.combined_z is None else f"{self.combined_z:.3f}"
        lines.append(
            f"sessions={self.n_sessions} significant_same={self.n_significant_same_direction} "
            f"significant_opposite={self.n_significant_opposite} combined_z={z}"
        )
        return "\n".join(lines)


def aggregate_results(results: list, alpha: float = 0.05) -> AggregateReport:
    """Replication-count aggregation plus Stouffer's combined z over sessions.

    The modal direction is the most common direction among testable sessions
    (tie broken toward the sign of the summed z). Each session contributes a
    signed z recovered from its two-sided p.
    """
    if not results:
        raise RuleError("no session results to aggregate")
    testable = [r for r in results if r.p_value is not None]
    z_scores = []
    for r in testable:
        p = min(max(r.p_value, 1e-300), 1.0)
        z = normal_inv_cdf(1.0 - p / 2.0) if p < 1.0 else 0.0
        z_scores.append(r.direction * z)

    n_pos = sum(1 for r in testable if r.direction > 0)
    n_neg = sum(1 for r in testable if r.direction < 0)
    if n_pos > n_neg:
        modal = 1
    elif n_neg > n_pos:
        modal = -1
    else:
        modal = 1 if sum(z_scores) >= 0 else -1

    significant_same = sum(
        1 for r in testable if r.p_value < alpha and r.direction == modal
    )
    significant_opposite = sum(
        1 for r in testable if r.p_value < alpha and r.direction == -modal
    )
    combined_z = sum(z_scores) / math.sqrt(len(z_scores)) if z_scores else None
    return AggregateReport(
        n_sessions=len(results),
        n_significant_same_direction=significant_same,
        n_significant_opposite=significant_opposite,
        modal_direction=modal,
        combined_z=combined_z,
        alpha=alpha,
        per_session=tuple(results),
    )
