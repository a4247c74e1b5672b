"""Metric battery tests: worked oracle values, brute-force equivalence, invariants."""

import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from morf.evaluation import (
    ComparisonError,
    EmptyJoinError,
    EvaluationError,
    MetricReport,
    MetricSet,
    Prediction,
    auc,
    classification_report,
    cohens_kappa,
    compare_jobs,
    fmt_metric,
    log_loss,
    parse_predictions_csv,
    regression_report,
    wilcoxon_signed_rank,
)


# --- independent oracles -----------------------------------------------------


def auc_bruteforce(scores, labels):
    """Pairwise fraction of (positive, negative) pairs won; ties count half."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    if not pos or not neg:
        return None
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def kappa_direct(tp, fn, fp, tn):
    n = tp + fn + fp + tn
    p_o = (tp + tn) / n
    p_e = ((tp + fp) * (tp + fn) + (fn + tn) * (fp + tn)) / n**2
    if p_e == 1:
        return None
    return (p_o - p_e) / (1 - p_e)


def report_bruteforce(preds, labels):
    """Recompute the full battery from raw joined rows with naive loops."""
    joined = [(p, labels[p.user_id]) for p in preds if p.user_id in labels]
    scores = [p.score for p, _ in joined]
    y = [t for _, t in joined]
    yhat = [p.predicted_label for p, _ in joined]
    n = len(joined)
    tp = sum(1 for a, b in zip(yhat, y) if a == 1 and b == 1)
    fn = sum(1 for a, b in zip(yhat, y) if a == 0 and b == 1)
    fp = sum(1 for a, b in zip(yhat, y) if a == 1 and b == 0)
    tn = sum(1 for a, b in zip(yhat, y) if a == 0 and b == 0)
    prec = tp / (tp + fp) if tp + fp else None
    rec = tp / (tp + fn) if tp + fn else None
    spec = tn / (tn + fp) if tn + fp else None
    f1 = (
        2 * prec * rec / (prec + rec)
        if prec is not None and rec is not None and prec + rec > 0
        else None
    )
    eps = 1e-15
    ll = -sum(
        math.log(min(max(s, eps), 1 - eps)) if t == 1 else math.log(1 - min(max(s, eps), 1 - eps))
        for s, t in zip(scores, y)
    ) / n
    return {
        "accuracy": (tp + tn) / n,
        "precision": prec,
        "recall": rec,
        "specificity": spec,
        "f1": f1,
        "auc": auc_bruteforce(scores, y),
        "cohens_kappa": kappa_direct(tp, fn, fp, tn),
        "log_loss": ll,
    }


def assert_close(a, b, tol=1e-12):
    if a is None or b is None:
        assert a is None and b is None
    else:
        assert abs(a - b) <= tol, f"{a} != {b}"


# --- auc ---------------------------------------------------------------------


def test_auc_perfect_separation():
    assert auc([0.9, 0.8, 0.3], [1, 1, 0]) == 1.0


def test_auc_single_class_is_na():
    assert auc([0.2, 0.7], [1, 1]) is None
    assert auc([0.2, 0.7], [0, 0]) is None


def test_auc_worked_pairwise_case():
    # frozen from the brute-force pairwise count: 3 of 4 pairs won
    assert auc([0.8, 0.6, 0.55, 0.3], [1, 0, 1, 0]) == 0.75


def test_auc_length_mismatch():
    with pytest.raises(EvaluationError):
        auc([0.5], [1, 0])


def test_auc_matches_bruteforce_randomized():
    rng = random.Random(1234)
    for trial in range(1000):
        n = rng.randint(2, 40)
        # coarse score grid so ties actually occur
        scores = [rng.choice([0.0, 0.1, 0.25, 0.5, 0.5, 0.75, 0.9, 1.0]) for _ in range(n)]
        labels = [rng.randint(0, 1) for _ in range(n)]
        assert_close(auc(scores, labels), auc_bruteforce(scores, labels))


@settings(max_examples=200, deadline=None)
@given(
    st.lists(
        # grid spacing keeps the transforms strictly monotone in float arithmetic
        st.tuples(st.integers(0, 256).map(lambda i: i / 256.0), st.integers(0, 1)),
        min_size=2,
        max_size=30,
    ),
    st.sampled_from(["exp", "affine", "cube"]),
)
def test_auc_invariant_under_monotone_transform(rows, transform):
    scores = [s for s, _ in rows]
    labels = [y for _, y in rows]
    mapped = {
        "exp": lambda x: math.exp(3 * x),
        "affine": lambda x: 0.2 * x + 5.0,
        "cube": lambda x: x**3 + x,
    }[transform]
    base = auc(scores, labels)
    moved = auc([mapped(s) for s in scores], labels)
    if base is None:
        assert moved is None
    else:
        assert abs(base - moved) < 1e-9


def test_random_scores_balanced_labels_auc_near_half():
    rng = random.Random(99)
    aucs = []
    for _ in range(100):
        scores = [rng.random() for _ in range(1000)]
        labels = [1] * 500 + [0] * 500
        rng.shuffle(labels)
        aucs.append(auc(scores, labels))
    mean_auc = sum(aucs) / len(aucs)
    assert 0.45 <= mean_auc <= 0.55


# --- kappa -------------------------------------------------------------------


def test_kappa_perfect_agreement():
    assert cohens_kappa(((50, 0), (0, 50))) == 1.0


def test_kappa_chance_agreement():
    assert cohens_kappa(((25, 25), (25, 25))) == 0.0


def test_kappa_worked_case():
    # TP=40 FN=10 FP=20 TN=30: p_o=0.7, p_e=0.5 -> kappa 0.4 by the direct formula
    assert abs(cohens_kappa(((40, 10), (20, 30))) - 0.4) < 1e-15


def test_kappa_degenerate_pe_one():
    assert cohens_kappa(((10, 0), (0, 0))) is None


def test_kappa_negative_counts_rejected():
    with pytest.raises(EvaluationError):
        cohens_kappa(((-1, 2), (3, 4)))


def test_kappa_matches_direct_randomized():
    rng = random.Random(7)
    for _ in range(1000):
        tp, fn, fp, tn = (rng.randint(0, 50) for _ in range(4))
        if tp + fn + fp + tn == 0:
            continue
        assert_close(cohens_kappa(((tp, fn), (fp, tn))), kappa_direct(tp, fn, fp, tn))


# --- classification report ---------------------------------------------------


def _preds(rows):
    return [Prediction(u, s, yhat) for u, s, yhat in rows]


def test_report_perfect_predictions():
    preds = _preds([("a", 1.0, 1), ("b", 0.0, 0), ("c", 1.0, 1), ("d", 0.0, 0)])
    labels = {"a": 1, "b": 0, "c": 1, "d": 0}
    ms = classification_report(preds, labels)
    for name in ("accuracy", "precision", "recall", "f1", "auc"):
        assert ms.values[name] == 1.0
    assert ms.values["log_loss"] < 1e-12
    assert ms.n == 4


def test_report_all_positive_predictor_on_balanced_labels():
    preds = _preds([("a", 0.9, 1), ("b", 0.9, 1), ("c", 0.9, 1), ("d", 0.9, 1)])
    labels = {"a": 1, "b": 1, "c": 0, "d": 0}
    ms = classification_report(preds, labels)
    assert ms.values["accuracy"] == 0.5
    assert ms.values["recall"] == 1.0
    assert ms.values["specificity"] == 0.0


def test_report_counts_missing_predictions_without_imputing():
    preds = _preds([("a", 0.8, 1)])
    labels = {"a": 1, "b": 0, "c": 1}
    ms = classification_report(preds, labels)
    assert ms.n == 1
    assert ms.n_missing_predictions == 2


def test_report_ignores_unlabeled_predictions():
    preds = _preds([("a", 0.8, 1), ("ghost", 0.1, 0)])
    ms = classification_report(preds, {"a": 1})
    assert ms.n == 1


def test_report_empty_join_errors():
    with pytest.raises(EmptyJoinError):
        classification_report(_preds([("x", 0.5, 1)]), {"y": 0})


def test_report_score_out_of_range_errors():
    with pytest.raises(EvaluationError):
        classification_report(_preds([("a", 1.5, 1)]), {"a": 1})


def test_report_matches_bruteforce_randomized():
    rng = random.Random(4242)
    for _ in range(1000):
        n = rng.randint(2, 60)
        labels = {f"u{i}": rng.randint(0, 1) for i in range(n)}
        preds = [
            Prediction(f"u{i}", rng.choice([0.0, 0.2, 0.5, 0.5, 0.8, 1.0]), rng.randint(0, 1))
            for i in range(n)
            if rng.random() < 0.9
        ]
        covered = [p for p in preds if p.user_id in labels]
        if not covered:
            continue
        ours = classification_report(preds, labels)
        expected = report_bruteforce(preds, labels)
        for name, want in expected.items():
            assert_close(ours.values[name], want)


def test_f1_consistency_with_precision_recall():
    rng = random.Random(11)
    for _ in range(300):
        n = rng.randint(4, 50)
        labels = {f"u{i}": rng.randint(0, 1) for i in range(n)}
        preds = _preds([(f"u{i}", rng.random(), rng.randint(0, 1)) for i in range(n)])
        ms = classification_report(preds, labels)
        p, r, f1 = ms.values["precision"], ms.values["recall"], ms.values["f1"]
        if p not in (None, 0.0) and r not in (None, 0.0):
            assert abs(f1 - 2 * p * r / (p + r)) < 1e-12


# --- regression report --------------------------------------------------------


def test_regression_exact_predictions():
    ms = regression_report({"a": 3.0, "b": 5.0}, {"a": 3, "b": 5})
    assert ms.values["rmse"] == 0.0
    assert ms.values["mae"] == 0.0
    assert ms.values["r2"] == 1.0


def test_regression_constant_labels_r2_na():
    ms = regression_report({"a": 4.0, "b": 4.0}, {"a": 4, "b": 4})
    assert ms.values["rmse"] == 0.0
    assert ms.values["r2"] is None


def test_regression_constant_offset():
    ms = regression_report({"a": 2.0, "b": 4.0, "c": 6.0}, {"a": 1, "b": 3, "c": 5})
    assert abs(ms.values["rmse"] - 1.0) < 1e-12
    assert abs(ms.values["mae"] - 1.0) < 1e-12


def test_regression_empty_join():
    with pytest.raises(EmptyJoinError):
        regression_report({"x": 1.0}, {"y": 2})


# --- log loss ----------------------------------------------------------------


def test_log_loss_clamps_extreme_scores():
    val = log_loss([1.0, 0.0], [1, 0])
    assert 0 < val < 1e-12


# --- wilcoxon / compare_jobs ---------------------------------------------------


def wilcoxon_exact_oracle(diffs):
    """Enumerate all sign assignments over |diff| midranks (two-sided)."""
    nonzero = [d for d in diffs if d != 0]
    n = len(nonzero)
    sorted_abs = sorted(range(n), key=lambda i: abs(nonzero[i]))
    ranks = [0.0] * n
    i = 0
    while i < n:
        j = i
        while j + 1 < n and abs(nonzero[sorted_abs[j + 1]]) == abs(nonzero[sorted_abs[i]]):
            j += 1
        for k in range(i, j + 1):
            ranks[sorted_abs[k]] = (i + j) / 2 + 1
        i = j + 1
    w_obs = sum(r for r, d in zip(ranks, nonzero) if d > 0)
    le = ge = 0
    for mask in range(1 << n):
        w = sum(ranks[i] for i in range(n) if mask >> i & 1)
        le += w <= w_obs + 1e-9
        ge += w >= w_obs - 1e-9
    return min(1.0, 2 * min(le, ge) / (1 << n))


def test_wilcoxon_all_same_sign_eight_pairs():
    w, p, direction, n = wilcoxon_signed_rank([0.1] * 8)
    assert n == 8
    assert direction == 1
    assert abs(p - 2 / 2**8) < 1e-15


def test_wilcoxon_all_zero_diffs_error():
    with pytest.raises(ComparisonError):
        wilcoxon_signed_rank([0.0, 0.0])


def test_wilcoxon_matches_enumeration_oracle():
    rng = random.Random(5)
    for _ in range(200):
        n = rng.randint(1, 10)
        diffs = [rng.choice([-3, -2, -1, 1, 2, 3]) * rng.choice([0.5, 1.0]) for _ in range(n)]
        _, p, _, _ = wilcoxon_signed_rank(diffs)
        assert abs(p - wilcoxon_exact_oracle(diffs)) < 1e-9


def test_wilcoxon_normal_approximation_large_n():
    rng = random.Random(6)
    diffs = [rng.gauss(0.3, 1.0) for _ in range(60)]
    w, p, direction, n = wilcoxon_signed_rank(diffs)
    assert n == 60
    assert 0.0 <= p <= 1.0


def _report(job_id, metric_values):
    rows = tuple(
        (
            course,
            MetricSet(task="classification", values={"auc": v}, n=10),
        )
        for course, v in sorted(metric_values.items())
    )
    return MetricReport(job_id=job_id, label_type="dropout", rows=rows)


def test_compare_jobs_a_beats_b_everywhere():
    courses = [f"c{i}" for i in range(8)]
    a = _report("j-a", {c: 0.8 + i / 100 for i, c in enumerate(courses)})
    b = _report("j-b", {c: 0.7 + i / 100 for i, c in enumerate(courses)})
    result = compare_jobs(a, b, "auc")
    assert result.direction == 1
    assert abs(result.p_value - 0.0078125) < 1e-12
    assert result.n_courses == 8


def test_compare_jobs_identical_reports_error():
    values = {f"c{i}": 0.5 for i in range(6)}
    with pytest.raises(ComparisonError):
        compare_jobs(_report("a", values), _report("b", values), "auc")


def test_compare_jobs_mismatched_course_sets_error():
    a = _report("a", {f"c{i}": 0.5 for i in range(6)})
    b = _report("b", {f"c{i}": 0.5 for i in range(1, 7)})
    with pytest.raises(ComparisonError):
        compare_jobs(a, b, "auc")


def test_compare_jobs_too_few_courses():
    a = _report("a", {f"c{i}": 0.6 for i in range(3)})
    b = _report("b", {f"c{i}": 0.4 for i in range(3)})
    with pytest.raises(ComparisonError):
        compare_jobs(a, b, "auc")


# --- serialization -------------------------------------------------------------


def test_na_serializes_as_literal():
    assert fmt_metric(None) == "NA"
    ms = MetricSet(task="classification", values={"auc": None}, n=3)
    assert ms.as_dict()["values"]["auc"] == "NA"
    assert MetricSet.from_dict(ms.as_dict()).values["auc"] is None


def test_metric_report_csv_round_trip():
    ms = MetricSet(
        task="classification",
        values={k: 0.5 for k in ("accuracy", "precision", "recall", "specificity", "f1", "auc", "cohens_kappa", "log_loss")},
        n=7,
    )
    report = MetricReport(job_id="j-0001", label_type="dropout", rows=(("c1", ms),))
    text = report.to_csv()
    assert text.splitlines()[0] == "course_id,metric,value"
    assert "c1,auc,0.5" in text
    parsed = MetricReport.from_dict(report.as_dict())
    assert parsed == report


def test_parse_predictions_csv():
    rows = parse_predictions_csv("user_id,score,predicted_label\nu1,0.75,1\nu2,0.2,0\n")
    assert rows[0] == Prediction("u1", 0.75, 1)
    with pytest.raises(EvaluationError):
        parse_predictions_csv("user_id,score,predicted_label\nu1,1.4,1\n")
    with pytest.raises(EvaluationError):
        parse_predictions_csv("user,value\nu1,1\n")
