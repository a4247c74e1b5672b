#!/usr/bin/env python3
"""Reference experiment: threshold classifier on week-1 activity.

Runs inside the execute-against sandbox. Data root comes from
MORF_DATA_ROOT (the container path /morf-data by default); only the
standard library is used so the bundle runs on any host interpreter.

Modes:
  extract  read raw session exports, emit week-1 behavior features
  train    fit a decision threshold (or line, for week prediction)
  test     score holdout features with the trained model
  probe    exit 0 immediately (platform health check)
"""

import argparse
import csv
import json
import math
import os
import sys
from pathlib import Path

WEEK_SECONDS = 7 * 86400
FEATURE_COLUMNS = ["week1_events", "week1_forum_posts", "week1_submissions"]


def data_root():
    return Path(os.environ.get("MORF_DATA_ROOT", "/morf-data"))


def read_metadata(session_dir):
    meta = {}
    for line in (session_dir / "course_metadata.txt").read_text().splitlines():
        key, _, value = line.partition(":")
        if key.strip():
            meta[key.strip()] = value.strip()
    return meta


def extract_session_features(session_dir):
    meta = read_metadata(session_dir)
    start = int(meta["start_epoch"])
    rows = {}

    def week_of(ts):
        return (ts - start) // WEEK_SECONDS + 1

    with (session_dir / "clickstream.jsonl").open() as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            user = rec["user_id"]
            row = rows.setdefault(user, {c: 0 for c in FEATURE_COLUMNS})
            if week_of(int(rec["timestamp"])) == 1:
                row["week1_events"] += 1

    def count_week1(table, column):
        with (session_dir / table).open(newline="") as fh:
            for rec in csv.DictReader(fh):
                if rec["user_id"] in rows and week_of(int(rec["timestamp"])) == 1:
                    rows[rec["user_id"]][column] += 1

    count_week1("forum_posts.csv", "week1_forum_posts")
    count_week1("assignment_submissions.csv", "week1_submissions")
    return rows


def run_extract():
    raw = data_root() / "raw"
    session_dirs = sorted(p for p in raw.glob("*/*") if p.is_dir())
    if not session_dirs:
        print("no raw sessions mounted", file=sys.stderr)
        return 2
    merged = {}
    for session_dir in session_dirs:
        merged.update(extract_session_features(session_dir))
    out = data_root() / "output" / "features.csv"
    with out.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["user_id"] + FEATURE_COLUMNS)
        for user in sorted(merged):
            writer.writerow([user] + [merged[user][c] for c in FEATURE_COLUMNS])
    return 0


def load_features(root):
    rows = {}
    for path in sorted(root.rglob("features.csv")):
        with path.open(newline="") as fh:
            for rec in csv.DictReader(fh):
                rows[rec["user_id"]] = float(rec["week1_events"])
    return rows


def load_labels(root):
    labels = {}
    for path in sorted(root.rglob("labels.csv")):
        with path.open(newline="") as fh:
            for rec in csv.DictReader(fh):
                labels[rec["user_id"]] = float(rec["label"])
    return labels


def run_train(label_type):
    features = load_features(data_root() / "features")
    labels = load_labels(data_root() / "labels")
    joined = [(features[u], labels[u]) for u in sorted(features) if u in labels]
    if not joined:
        print("no overlap between features and labels", file=sys.stderr)
        return 2
    xs = [x for x, _ in joined]
    ys = [y for _, y in joined]

    if label_type == "dropout_week":
        # least-squares line: predicted week = slope * week1_events + intercept
        n = len(xs)
        mean_x = sum(xs) / n
        mean_y = sum(ys) / n
        var_x = sum((x - mean_x) ** 2 for x in xs)
        slope = sum((x - mean_x) * (y - mean_y) for x, y in joined) / var_x if var_x else 0.0
        model = {
            "kind": "week_line",
            "slope": slope,
            "intercept": mean_y - slope * mean_x,
        }
    else:
        # threshold on week-1 events: fewer events than the cut predicts dropout
        best_t, best_correct = 0, -1
        for t in range(int(max(xs)) + 2):
            correct = sum(1 for x, y in joined if (1 if x < t else 0) == y)
            if correct > best_correct:
                best_t, best_correct = t, correct
        spread = max(1.0, _stdev(xs))
        model = {"kind": "threshold", "feature": "week1_events", "threshold": best_t, "scale": spread}

    model_dir = data_root() / "output" / "model"
    model_dir.mkdir(parents=True, exist_ok=True)
    (model_dir / "model.json").write_text(json.dumps(model, sort_keys=True))
    return 0


def _stdev(xs):
    n = len(xs)
    if n < 2:
        return 1.0
    mean = sum(xs) / n
    return math.sqrt(sum((x - mean) ** 2 for x in xs) / (n - 1))


def run_test():
    features = load_features(data_root() / "features")
    model = json.loads((data_root() / "model" / "model.json").read_text())
    out = data_root() / "output" / "predictions.csv"
    with out.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if model["kind"] == "week_line":
            writer.writerow(["user_id", "predicted_week"])
            for user in sorted(features):
                week = model["slope"] * features[user] + model["intercept"]
                writer.writerow([user, repr(week)])
        else:
            writer.writerow(["user_id", "score", "predicted_label"])
            t, scale = model["threshold"], model["scale"]
            for user in sorted(features):
                x = features[user]
                score = 1.0 / (1.0 + math.exp((x - t) / scale))  # P(dropout)
                writer.writerow([user, repr(score), int(x < t)])
    return 0


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--mode", required=True)
    parser.add_argument("--course", default="-")
    parser.add_argument("--session", default="-")
    parser.add_argument("--label-type", default="-")
    args = parser.parse_args()

    if args.mode == "probe":
        print("probe ok")
        return 0
    if args.mode == "extract":
        return run_extract()
    if args.mode == "train":
        return run_train(args.label_type)
    if args.mode == "test":
        return run_test()
    print(f"unknown mode {args.mode}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
