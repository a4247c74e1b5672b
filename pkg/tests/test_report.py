"""Report rendering tests: delimited outputs with figures alongside."""

from morf.evaluation import MetricReport, MetricSet
from morf.report import write_metric_outputs, write_rules_outputs


def _classification_report():
    base = {
        "accuracy": 0.8, "precision": 0.7, "recall": 0.9, "specificity": 0.6,
        "f1": 0.79, "auc": 0.85, "cohens_kappa": 0.55, "log_loss": 0.4,
    }
    degenerate = dict(base, auc=None, cohens_kappa=None)
    return MetricReport(
        job_id="j-0007",
        label_type="dropout",
        rows=(
            ("course-a", MetricSet(task="classification", values=base, n=90)),
            ("course-b", MetricSet(task="classification", values=degenerate, n=80)),
        ),
    )


def test_metric_outputs_written_alongside_figure(tmp_path):
    paths = write_metric_outputs(_classification_report(), tmp_path)
    csv_lines = paths["csv"].read_text().splitlines()
    assert csv_lines[0] == "course_id,metric,value"
    assert "course-b,auc,NA" in csv_lines
    assert paths["json"].exists()
    assert paths["figure"].stat().st_size > 1000


def test_metric_outputs_without_figures(tmp_path):
    paths = write_metric_outputs(_classification_report(), tmp_path, figures=False)
    assert "figure" not in paths


def test_regression_report_figure(tmp_path):
    report = MetricReport(
        job_id="j-0008",
        label_type="dropout_week",
        rows=(
            ("course-a", MetricSet(task="regression", values={"rmse": 1.2, "mae": 0.9, "r2": 0.4}, n=50)),
        ),
    )
    paths = write_metric_outputs(report, tmp_path)
    assert paths["figure"].exists()


def test_rules_outputs(tmp_path):
    aggregate = {
        "n_sessions": 3,
        "n_significant_same_direction": 2,
        "n_significant_opposite": 0,
        "modal_direction": 1,
        "combined_z": 3.1,
        "alpha": 0.05,
        "per_session": [
            {"course_id": "c", "session_id": "001", "table": [30, 10, 10, 30],
             "statistic": 20.0, "p_value": 7.7e-06, "direction": 1, "test_used": "chi_square", "reason": ""},
            {"course_id": "c", "session_id": "002", "table": [25, 15, 15, 25],
             "statistic": 5.0, "p_value": 0.025, "direction": 1, "test_used": "chi_square", "reason": ""},
            {"course_id": "c", "session_id": "003", "table": [0, 0, 20, 20],
             "statistic": "NA", "p_value": "NA", "direction": 0, "test_used": "none",
             "reason": "zero margin"},
        ],
    }
    paths = write_rules_outputs(aggregate, tmp_path)
    lines = paths["csv"].read_text().splitlines()
    assert lines[0].startswith("course_id,session_id,a,b,c,d")
    assert len(lines) == 4
    assert paths["figure"].stat().st_size > 1000
    assert paths["json"].exists()
