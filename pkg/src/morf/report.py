"""Report rendering: delimited outputs plus figures, side by side.

The results path writes ``metrics.csv``/``metrics.json`` (or the rule
aggregate equivalents) together with matplotlib figures rendered to files.
Figures only ever show course/session identifiers and metric values.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402 - backend must be pinned first

from morf.evaluation import REGRESSION_METRICS, MetricReport

_BOUNDED_METRICS = ("accuracy", "precision", "recall", "specificity", "f1", "auc")


def write_metric_outputs(report: MetricReport, out_dir: Path, figures: bool = True) -> dict:
    """Write metrics.csv + metrics.json (+ metrics.png) for one predict job."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "csv": out_dir / "metrics.csv",
        "json": out_dir / "metrics.json",
    }
    paths["csv"].write_text(report.to_csv())
    paths["json"].write_text(json.dumps(report.as_dict(), indent=1, sort_keys=True) + "\n")
    if figures and report.rows:
        paths["figure"] = _metric_figure(report, out_dir / "metrics.png")
    return paths


def _metric_figure(report: MetricReport, path: Path) -> Path:
    courses = report.course_ids()
    task = report.rows[0][1].task
    if task == "classification":
        fig, (ax_rates, ax_loss) = plt.subplots(
            2, 1, figsize=(max(6, 1.8 * len(courses)), 7), height_ratios=[3, 1]
        )
        width = 0.8 / len(_BOUNDED_METRICS)
        for i, metric in enumerate(_BOUNDED_METRICS):
            xs, ys = [], []
            for j, course in enumerate(courses):
                value = report.rows[j][1].values.get(metric)
                if value is not None:
                    xs.append(j + i * width)
                    ys.append(value)
            ax_rates.bar(xs, ys, width=width, label=metric)
        ax_rates.set_xticks([j + 0.4 for j in range(len(courses))])
        ax_rates.set_xticklabels(courses)
        ax_rates.set_ylim(0, 1.05)
        ax_rates.set_ylabel("metric value")
        ax_rates.legend(ncol=3, fontsize=8)
        ax_rates.set_title(f"per-course prediction performance ({report.label_type})")

        losses = [ms.values.get("log_loss") for _, ms in report.rows]
        ax_loss.bar(
            range(len(courses)),
            [v if v is not None else 0.0 for v in losses],
            color="#777777",
        )
        ax_loss.set_xticks(range(len(courses)))
        ax_loss.set_xticklabels(courses)
        ax_loss.set_ylabel("log loss")
    else:
        fig, ax = plt.subplots(figsize=(max(6, 1.8 * len(courses)), 4))
        width = 0.8 / len(REGRESSION_METRICS)
        for i, metric in enumerate(REGRESSION_METRICS):
            xs, ys = [], []
            for j, course in enumerate(courses):
                value = report.rows[j][1].values.get(metric)
                if value is not None:
                    xs.append(j + i * width)
                    ys.append(value)
            ax.bar(xs, ys, width=width, label=metric)
        ax.set_xticks([j + 0.4 for j in range(len(courses))])
        ax.set_xticklabels(courses)
        ax.set_ylabel("metric value")
        ax.legend()
        ax.set_title(f"per-course week prediction error ({report.label_type})")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def write_rules_outputs(aggregate: dict, out_dir: Path, figures: bool = True) -> dict:
    """Write rules.csv + rules.json (+ rules.png) for one rules job."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out_dir / "rules.csv", "json": out_dir / "rules.json"}
    lines = ["course_id,session_id,a,b,c,d,test_used,p_value,direction"]
    for row in aggregate["per_session"]:
        a, b, c, d = row["table"]
        lines.append(
            f"{row['course_id']},{row['session_id']},{a},{b},{c},{d},"
            f"{row['test_used']},{row['p_value']},{row['direction']}"
        )
    paths["csv"].write_text("\n".join(lines) + "\n")
    paths["json"].write_text(json.dumps(aggregate, indent=1, sort_keys=True) + "\n")
    if figures and aggregate["per_session"]:
        paths["figure"] = _rules_figure(aggregate, out_dir / "rules.png")
    return paths


def _rules_figure(aggregate: dict, path: Path) -> Path:
    rows = aggregate["per_session"]
    labels = [f"{r['course_id']}/{r['session_id']}" for r in rows]
    heights = []
    colors = []
    for row in rows:
        p = row["p_value"]
        if p == "NA" or p is None:
            heights.append(0.0)
            colors.append("#bbbbbb")
        else:
            heights.append(-math.log10(max(float(p), 1e-12)))
            colors.append("#2166ac" if row["direction"] >= 0 else "#b2182b")
    fig, ax = plt.subplots(figsize=(max(6, 0.6 * len(rows)), 4))
    ax.bar(range(len(rows)), heights, color=colors)
    ax.axhline(-math.log10(aggregate.get("alpha", 0.05)), linestyle="--", color="black", lw=1)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=60, ha="right", fontsize=7)
    ax.set_ylabel("-log10 p")
    z = aggregate.get("combined_z")
    z_text = "NA" if z in (None, "NA") else f"{float(z):.2f}"
    ax.set_title(
        f"per-session rule tests "
        f"(significant same-direction: {aggregate['n_significant_same_direction']}"
        f"/{aggregate['n_sessions']}, combined z = {z_text})"
    )
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
