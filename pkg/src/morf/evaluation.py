"""Platform-side evaluation: the metric battery and cross-course comparison.

Classification jobs are scored with a fixed battery of 8 measures (accuracy,
precision, recall, specificity, F1, AUC, Cohen's kappa, log loss); regression
jobs with rmse/mae/r2. Degenerate inputs (single-class holdouts, zero label
variance) produce NA rather than poisoning aggregation; NA serializes as the
literal string ``NA``.

All functions here are pure and safe to call concurrently.
"""

from __future__ import annotations

import csv
import io
import math
import statistics
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

from morf.errors import MorfError

CLASSIFICATION_METRICS = (
    "accuracy",
    "precision",
    "recall",
    "specificity",
    "f1",
    "auc",
    "cohens_kappa",
    "log_loss",
)
REGRESSION_METRICS = ("rmse", "mae", "r2")

_SCORE_CLAMP = 1e-15


class EvaluationError(MorfError):
    pass


class EmptyJoinError(EvaluationError):
    """No overlap between prediction user_ids and labeled user_ids."""


class ComparisonError(EvaluationError):
    pass


def fmt_metric(value: Optional[float]) -> str:
    """Serialize a metric value; NA is a first-class value."""
    return "NA" if value is None else repr(float(value))


@dataclass(frozen=True)
class Prediction:
    user_id: str
    score: float
    predicted_label: int


@dataclass(frozen=True)
class MetricSet:
    """One course's battery of metric values keyed by metric name."""

    task: str  # "classification" | "regression"
    values: dict  # metric name -> float | None
    n: int
    n_missing_predictions: int = 0

    def metric_names(self) -> tuple:
        return CLASSIFICATION_METRICS if self.task == "classification" else REGRESSION_METRICS

    def as_dict(self) -> dict:
        return {
            "task": self.task,
            "n": self.n,
            "n_missing_predictions": self.n_missing_predictions,
            "values": {k: ("NA" if v is None else v) for k, v in self.values.items()},
        }

    @staticmethod
    def from_dict(d: dict) -> "MetricSet":
        values = {k: (None if v == "NA" else float(v)) for k, v in d["values"].items()}
        return MetricSet(
            task=d["task"],
            values=values,
            n=int(d["n"]),
            n_missing_predictions=int(d.get("n_missing_predictions", 0)),
        )


@dataclass(frozen=True)
class MetricReport:
    """Per-course metric rows for one job."""

    job_id: str
    label_type: str
    rows: tuple = field(default_factory=tuple)  # ((course_id, MetricSet), ...)

    def course_ids(self) -> list:
        return [c for c, _ in self.rows]

    def metric_by_course(self, metric: str) -> dict:
        return {c: ms.values.get(metric) for c, ms in self.rows}

    def as_dict(self) -> dict:
        return {
            "job_id": self.job_id,
            "label_type": self.label_type,
            "rows": [{"course_id": c, "metrics": ms.as_dict()} for c, ms in self.rows],
        }

    @staticmethod
    def from_dict(d: dict) -> "MetricReport":
        rows = tuple(
            (r["course_id"], MetricSet.from_dict(r["metrics"])) for r in d["rows"]
        )
        return MetricReport(job_id=d["job_id"], label_type=d["label_type"], rows=rows)

    def to_csv(self) -> str:
        """Delimited form: one row per (course, metric)."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["course_id", "metric", "value"])
        for course_id, ms in self.rows:
            for name in ms.metric_names():
                writer.writerow([course_id, name, fmt_metric(ms.values.get(name))])
            writer.writerow([course_id, "n", str(ms.n)])
            writer.writerow([course_id, "n_missing_predictions", str(ms.n_missing_predictions)])
        return buf.getvalue()


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    direction: int  # sign of the paired advantage of A over B
    n_courses: int
    n_pairs: int


def parse_predictions_csv(text: str) -> list:
    """Parse the test-mode output contract: ``user_id,score,predicted_label``."""
    reader = csv.DictReader(io.StringIO(text))
    required = {"user_id", "score", "predicted_label"}
    if reader.fieldnames is None or not required.issubset(reader.fieldnames):
        raise EvaluationError(
            f"predictions file must have header user_id,score,predicted_label, got {reader.fieldnames}"
        )
    rows = []
    for rec in reader:
        score = float(rec["score"])
        if not 0.0 <= score <= 1.0:
            raise EvaluationError(f"score {score} outside [0,1] for user row")
        rows.append(Prediction(rec["user_id"], score, int(rec["predicted_label"])))
    return rows


def auc(scores: Sequence[float], labels: Sequence[int]) -> Optional[float]:
    """Area under the ROC curve, Mann-Whitney formulation.

    Equal to the fraction of (positive, negative) pairs where the positive
    outscores the negative, ties counted 1/2. Returns None (NA) when either
    class is absent.
    """
    if len(scores) != len(labels):
        raise EvaluationError(f"length mismatch: {len(scores)} scores vs {len(labels)} labels")
    if not scores:
        raise EvaluationError("auc of empty input")
    n_pos = sum(1 for y in labels if y == 1)
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    # rank-sum with midranks for ties; equals the pairwise count exactly
    order = sorted(range(len(scores)), key=lambda i: scores[i])
    ranks = [0.0] * len(scores)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        midrank = (i + j) / 2.0 + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = midrank
        i = j + 1
    rank_sum_pos = sum(r for r, y in zip(ranks, labels) if y == 1)
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def cohens_kappa(confusion: Sequence[Sequence[float]]) -> Optional[float]:
    """Cohen's kappa from 2x2 counts ((tp, fn), (fp, tn)).

    kappa = (p_o - p_e) / (1 - p_e); NA when chance agreement p_e is 1.
    """
    (tp, fn), (fp, tn) = confusion
    for v in (tp, fn, fp, tn):
        if v < 0:
            raise EvaluationError("negative count in confusion matrix")
    n = tp + fn + fp + tn
    if n <= 0:
        raise EvaluationError("empty confusion matrix")
    p_o = (tp + tn) / n
    p_e = ((tp + fp) * (tp + fn) + (fn + tn) * (fp + tn)) / (n * n)
    if p_e == 1.0:
        return None
    return (p_o - p_e) / (1.0 - p_e)


def log_loss(scores: Sequence[float], labels: Sequence[int]) -> float:
    total = 0.0
    for s, y in zip(scores, labels):
        s = min(max(s, _SCORE_CLAMP), 1.0 - _SCORE_CLAMP)
        total += -(math.log(s) if y == 1 else math.log(1.0 - s))
    return total / len(scores)


def classification_report(
    predictions: Iterable[Prediction], labels: Mapping[str, int]
) -> MetricSet:
    """Join predictions to labels on user_id and compute the 8-metric battery.

    Users with labels but no prediction are counted as coverage loss, never
    imputed; predictions for unlabeled users are ignored.
    """
    by_user = {}
    for p in predictions:
        if not 0.0 <= p.score <= 1.0:
            raise EvaluationError(f"score {p.score} outside [0,1]")
        by_user[p.user_id] = p
    joined = [(by_user[u], y) for u, y in labels.items() if u in by_user]
    n_missing = sum(1 for u in labels if u not in by_user)
    if not joined:
        raise EmptyJoinError("no labeled user has a prediction")

    scores = [p.score for p, _ in joined]
    y_true = [y for _, y in joined]
    y_pred = [p.predicted_label for p, _ in joined]
    n = len(joined)

    tp = sum(1 for yp, yt in zip(y_pred, y_true) if yp == 1 and yt == 1)
    fn = sum(1 for yp, yt in zip(y_pred, y_true) if yp == 0 and yt == 1)
    fp = sum(1 for yp, yt in zip(y_pred, y_true) if yp == 1 and yt == 0)
    tn = sum(1 for yp, yt in zip(y_pred, y_true) if yp == 0 and yt == 0)

    precision = tp / (tp + fp) if (tp + fp) > 0 else None
    recall = tp / (tp + fn) if (tp + fn) > 0 else None
    specificity = tn / (tn + fp) if (tn + fp) > 0 else None
    if precision is None or recall is None or (precision + recall) == 0:
        f1 = None
    else:
        f1 = 2.0 * precision * recall / (precision + recall)

    values = {
        "accuracy": (tp + tn) / n,
        "precision": precision,
        "recall": recall,
        "specificity": specificity,
        "f1": f1,
        "auc": auc(scores, y_true),
        "cohens_kappa": cohens_kappa(((tp, fn), (fp, tn))),
        "log_loss": log_loss(scores, y_true),
    }
    return MetricSet(
        task="classification", values=values, n=n, n_missing_predictions=n_missing
    )


def regression_report(
    predictions: Mapping[str, float], labels: Mapping[str, int]
) -> MetricSet:
    """rmse/mae/r2 over predicted dropout weeks; r2 is NA at zero label variance."""
    joined = [(predictions[u], y) for u, y in labels.items() if u in predictions]
    n_missing = sum(1 for u in labels if u not in predictions)
    if not joined:
        raise EmptyJoinError("no labeled user has a prediction")
    n = len(joined)
    errors = [p - y for p, y in joined]
    rmse = math.sqrt(sum(e * e for e in errors) / n)
    mae = sum(abs(e) for e in errors) / n
    mean_y = sum(y for _, y in joined) / n
    ss_tot = sum((y - mean_y) ** 2 for _, y in joined)
    if ss_tot == 0:
        r2 = None
    else:
        ss_res = sum(e * e for e in errors)
        r2 = 1.0 - ss_res / ss_tot
    return MetricSet(
        task="regression",
        values={"rmse": rmse, "mae": mae, "r2": r2},
        n=n,
        n_missing_predictions=n_missing,
    )


def _signed_ranks(diffs: Sequence[float]) -> tuple:
    """Midranks of |diffs| (doubled, so they stay integral under ties)."""
    order = sorted(range(len(diffs)), key=lambda i: abs(diffs[i]))
    doubled = [0] * len(diffs)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and abs(diffs[order[j + 1]]) == abs(diffs[order[i]]):
            j += 1
        # midrank of positions i..j (1-based), doubled to keep it an integer
        doubled_midrank = (i + j) + 2
        for k in range(i, j + 1):
            doubled[order[k]] = doubled_midrank
        i = j + 1
    return tuple(doubled)


def _exact_signed_rank_p(w_plus_doubled: int, doubled_ranks: Sequence[int]) -> float:
    """Two-sided exact p over all 2^n sign assignments, via subset-sum counts."""
    total = sum(doubled_ranks)
    counts = [0] * (total + 1)
    counts[0] = 1
    for r in doubled_ranks:
        for s in range(total - r, -1, -1):
            if counts[s]:
                counts[s + r] += counts[s]
    n_assignments = 1 << len(doubled_ranks)
    cdf_le = sum(counts[: w_plus_doubled + 1])
    cdf_ge = sum(counts[w_plus_doubled:])
    return min(1.0, 2.0 * min(cdf_le, cdf_ge) / n_assignments)


def wilcoxon_signed_rank(diffs: Sequence[float], exact_max_n: int = 25) -> tuple:
    """Two-sided Wilcoxon signed-rank test on paired differences.

    Zero differences are dropped. Exact null distribution up to
    ``exact_max_n`` non-zero pairs, normal approximation (tie-corrected)
    above. Returns (w_plus, p_value, direction, n_pairs).
    """
    nonzero = [d for d in diffs if d != 0]
    if not nonzero:
        raise ComparisonError("too few pairs: all paired differences are zero")
    doubled = _signed_ranks(nonzero)
    w_plus_doubled = sum(r for r, d in zip(doubled, nonzero) if d > 0)
    w_minus_doubled = sum(doubled) - w_plus_doubled
    w_plus = w_plus_doubled / 2.0
    n = len(nonzero)
    direction = (w_plus_doubled > w_minus_doubled) - (w_plus_doubled < w_minus_doubled)
    if n <= exact_max_n:
        p = _exact_signed_rank_p(w_plus_doubled, doubled)
    else:
        mean = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0
        # tie correction over groups of equal |diff|
        group_sizes = {}
        for r in doubled:
            group_sizes[r] = group_sizes.get(r, 0) + 1
        var -= sum(t**3 - t for t in group_sizes.values()) / 48.0
        if var <= 0:
            p = 1.0
        else:
            z = (w_plus - mean) / math.sqrt(var)
            p = math.erfc(abs(z) / math.sqrt(2.0))
    return w_plus, p, direction, n


def compare_jobs(report_a: MetricReport, report_b: MetricReport, metric: str) -> TestResult:
    """Paired cross-course comparison of two jobs on one metric.

    Wilcoxon signed-rank over per-course metric values; both jobs must have
    been tested on the identical course set, with at least 5 courses.
    """
    courses_a = set(report_a.course_ids())
    courses_b = set(report_b.course_ids())
    if courses_a != courses_b:
        raise ComparisonError(
            f"course sets differ: only in A {sorted(courses_a - courses_b)}, "
            f"only in B {sorted(courses_b - courses_a)}"
        )
    n_courses = len(courses_a)
    if n_courses < 5:
        raise ComparisonError(f"need at least 5 common courses, got {n_courses}")
    vals_a = report_a.metric_by_course(metric)
    vals_b = report_b.metric_by_course(metric)
    diffs = []
    for c in sorted(courses_a):
        a, b = vals_a.get(c), vals_b.get(c)
        if a is None or b is None:
            continue  # NA courses are not comparable
        diffs.append(a - b)
    if not diffs:
        raise ComparisonError("too few pairs: no course has the metric defined in both jobs")
    statistic, p, direction, n_pairs = wilcoxon_signed_rank(diffs)
    return TestResult(
        statistic=statistic,
        p_value=p,
        direction=direction,
        n_courses=n_courses,
        n_pairs=n_pairs,
    )


def normal_inv_cdf(p: float) -> float:
    return statistics.NormalDist().inv_cdf(p)


def chi2_sf_1df(stat: float) -> float:
    """Upper tail of chi-square with one degree of freedom."""
    return math.erfc(math.sqrt(stat / 2.0))
