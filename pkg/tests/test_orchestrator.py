"""Job lifecycle tests: config, state machine, end-to-end runs, cache, fork."""


import random

import pytest

from morf import images
from morf.errors import MorfError
from morf.orchestrator import (
    ALLOWED_EDGES,
    ARCHIVING,
    COMPLETED,
    FAILED,
    FETCHING,
    RUNNING,
    SUBMITTED,
    VALIDATED,
    ConfigError,
    ExperimentConfig,
    IllegalTransitionError,
    JobRecord,
    JobStore,
    UnknownJobError,
    canonical_config_text,
    parse_config,
    states_from_events,
)
from morf.platform import (
    JobNotTerminalError,
    MorfPlatform,
    PlatformSettings,
    ResultsUnavailableError,
)

from .test_dsl import CANONICAL_SCRIPT

import time


# --- config parsing -----------------------------------------------------------


def test_parse_predict_config():
    config = parse_config(
        "[morf]\nmode = predict\nimage = ./img.tar\ncontroller = ./run.morf\n"
        "label_type = dropout\nwebhook = http://localhost:9/hook\n",
        user_id="u-1",
    )
    assert config.mode == "predict"
    assert config.image == "./img.tar"
    assert config.user_id == "u-1"
    assert config.webhook.endswith("/hook")


def test_parse_rules_config_image_optional():
    config = parse_config("[morf]\nmode = rules\nrules = ./finding.rule\n")
    assert config.mode == "rules"
    assert config.image == ""


@pytest.mark.parametrize(
    "text",
    [
        "not ini at all [",
        "[other]\nmode = predict\n",
        "[morf]\nimage = x\n",  # missing mode
        "[morf]\nmode = teleport\nimage = x\ncontroller = y\n",
        "[morf]\nmode = predict\ncontroller = y\n",  # predict needs image
        "[morf]\nmode = predict\nimage = x\n",  # predict needs controller
        "[morf]\nmode = predict\nimage = x\ncontroller = y\nrules = z\n",  # both
        "[morf]\nmode = rules\n",  # rules needs rule file
        "[morf]\nmode = predict\nimage = x\ncontroller = y\ncolour = blue\n",
    ],
)
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_canonical_config_round_trips():
    config = parse_config("[morf]\nmode = predict\nimage = a.tar\ncontroller = c.morf\n")
    text = canonical_config_text(config)
    assert parse_config(text).mode == "predict"


# --- job store state machine -----------------------------------------------------


def _record(job_id, state=SUBMITTED):
    now = time.time()
    return JobRecord(
        job_id=job_id, user_id="u", mode="predict", state=state, created_at=now, updated_at=now
    )


def test_legal_lifecycle_and_event_feed(tmp_path):
    store = JobStore(tmp_path)
    job_id = store.next_job_id()
    assert job_id == "j-0001"
    store.create(_record(job_id))
    for state in (VALIDATED, FETCHING, RUNNING, ARCHIVING, COMPLETED):
        store.transition(job_id, state)
    assert store.load(job_id).state == COMPLETED
    assert states_from_events(store.events(job_id)) == [
        SUBMITTED, VALIDATED, FETCHING, RUNNING, ARCHIVING, COMPLETED,
    ]


def test_illegal_transitions_rejected(tmp_path):
    store = JobStore(tmp_path)
    job_id = store.next_job_id()
    store.create(_record(job_id))
    with pytest.raises(IllegalTransitionError):
        store.transition(job_id, RUNNING)  # cannot skip validation
    store.transition(job_id, VALIDATED)
    with pytest.raises(IllegalTransitionError):
        store.transition(job_id, COMPLETED)


def test_terminal_states_immutable(tmp_path):
    store = JobStore(tmp_path)
    job_id = store.next_job_id()
    store.create(_record(job_id))
    store.transition(job_id, FAILED, reason="boom")
    for state in (VALIDATED, FETCHING, RUNNING, ARCHIVING, COMPLETED, FAILED):
        with pytest.raises(IllegalTransitionError):
            store.transition(job_id, state)
    record = store.load(job_id)
    assert record.failure_reason == "boom"


def test_failed_reachable_from_every_nonterminal(tmp_path):
    store = JobStore(tmp_path)
    path_to = {
        SUBMITTED: [],
        VALIDATED: [VALIDATED],
        FETCHING: [VALIDATED, FETCHING],
        RUNNING: [VALIDATED, FETCHING, RUNNING],
        ARCHIVING: [VALIDATED, FETCHING, RUNNING, ARCHIVING],
    }
    for start_state, prefix in path_to.items():
        job_id = store.next_job_id()
        store.create(_record(job_id))
        for state in prefix:
            store.transition(job_id, state)
        store.transition(job_id, FAILED, reason=f"injected at {start_state}")
        assert store.load(job_id).state == FAILED


def test_audit_log_under_randomized_transition_attempts(tmp_path):
    """Whatever a chaotic driver attempts, recorded histories stay legal."""
    store = JobStore(tmp_path)
    rng = random.Random(88)
    all_states = [VALIDATED, FETCHING, RUNNING, ARCHIVING, COMPLETED, FAILED]
    for _ in range(60):
        job_id = store.next_job_id()
        store.create(_record(job_id))
        for _ in range(rng.randint(1, 8)):
            target = rng.choice(all_states)
            try:
                store.transition(job_id, target)
            except IllegalTransitionError:
                pass
        states = [SUBMITTED] + states_from_events(store.events(job_id))[1:]
        for current, following in zip(states, states[1:]):
            assert following in ALLOWED_EDGES[current], (current, following)


def test_update_cannot_change_state(tmp_path):
    store = JobStore(tmp_path)
    job_id = store.next_job_id()
    store.create(_record(job_id))
    record = store.load(job_id)
    record.state = COMPLETED
    with pytest.raises(IllegalTransitionError):
        store.update(record)


def test_unknown_job(tmp_path):
    store = JobStore(tmp_path)
    with pytest.raises(UnknownJobError):
        store.load("j-9999")


# --- platform end-to-end -----------------------------------------------------------


@pytest.fixture(scope="module")
def reference_archive(tmp_path_factory):
    return images.reference_experiment_image(
        tmp_path_factory.mktemp("archive") / "reference.tar"
    )


@pytest.fixture(scope="module")
def platform(tmp_path_factory, golden_root):
    _, manifest = golden_root
    root = tmp_path_factory.mktemp("platform")
    return MorfPlatform(
        root,
        PlatformSettings(workers=4, backend="bundle", manifest=manifest),
    )


def predict_config(reference_archive, script=CANONICAL_SCRIPT):
    return ExperimentConfig(
        mode="predict",
        image=str(reference_archive),
        controller_text=script,
        label_type="dropout",
        user_id="researcher-1",
    )


@pytest.fixture(scope="module")
def golden_job(platform, reference_archive):
    record = platform.submit_and_run(predict_config(reference_archive))
    assert record.state == COMPLETED, record.failure_reason
    return record


def test_golden_run_completes_with_metric_rows(platform, golden_job):
    results = platform.results(golden_job.job_id)
    rows = results["report"]["rows"]
    assert [r["course_id"] for r in rows] == ["course-a", "course-b"]
    for row in rows:
        values = row["metrics"]["values"]
        assert len(values) == 8
        assert values["auc"] > 0.5


def test_golden_run_task_fanout(platform, golden_job):
    statuses = golden_job.task_statuses
    assert len(statuses) == 12
    assert all(s["status"] in ("succeeded", "cached") for s in statuses.values())


def test_golden_run_trace_respects_workers_and_dependencies(platform, golden_job):
    """The recorded 12-task trace: never more than 4 running, tests after trains."""
    statuses = golden_job.task_statuses
    events = []
    for info in statuses.values():
        if info["start"] is not None and info["end"] is not None:
            events.append((info["start"], 1))
            events.append((info["end"], -1))
    events.sort()
    peak = current = 0
    for _, delta in events:
        current += delta
        peak = max(peak, current)
    assert peak <= 4

    for course in ("course-a", "course-b"):
        train_end = next(
            info["end"] for tid, info in statuses.items() if tid.endswith(f"train-{course}")
        )
        test_start = next(
            info["start"] for tid, info in statuses.items() if f"-test-{course}" in tid
        )
        assert test_start >= train_end


def test_event_feed_replays_state_machine(platform, golden_job):
    states = states_from_events(platform.events(golden_job.job_id))
    assert states == [SUBMITTED, VALIDATED, FETCHING, RUNNING, ARCHIVING, COMPLETED]


def test_completed_job_archives_every_artifact_class(platform, golden_job):
    kinds = {r.kind for r in platform.registry.list_artifacts(job_id=golden_job.job_id)}
    assert {"config", "script", "image", "metrics", "features", "model", "predictions", "labels"} <= kinds
    assert platform.registry.fsck() == []


def test_rerun_served_from_cache_with_identical_metrics(platform, reference_archive, golden_job):
    before = list(platform.sandbox_invocations)
    rerun = platform.submit_and_run(predict_config(reference_archive))
    assert rerun.state == COMPLETED, rerun.failure_reason
    new_invocations = platform.sandbox_invocations[len(before):]
    stages = [stage for _, _, stage in new_invocations]
    assert "extract" not in stages
    assert "extract_holdout" not in stages
    assert "train" not in stages

    first = platform.metric_report(golden_job.job_id)
    second = platform.metric_report(rerun.job_id)
    assert first.course_ids() == second.course_ids()
    for (c1, m1), (c2, m2) in zip(first.rows, second.rows):
        for name, value in m1.values.items():
            other = m2.values[name]
            if value is None:
                assert other is None
            else:
                assert abs(value - other) <= 1e-12


def test_fork_consumes_source_features(platform, reference_archive, golden_job):
    fork_script = (
        f"fork_features(job = '{golden_job.job_id}')\n"
        "train_course(label_type = 'dropout')\n"
        "test_course(label_type = 'dropout')\n"
        "evaluate_course(label_type = 'dropout')\n"
    )
    before = list(platform.sandbox_invocations)
    record = platform.submit_and_run(predict_config(reference_archive, script=fork_script))
    assert record.state == COMPLETED, record.failure_reason
    assert record.fork_of == golden_job.job_id
    stages = [stage for _, _, stage in platform.sandbox_invocations[len(before):]]
    assert "extract" not in stages and "extract_holdout" not in stages

    source = platform.job(golden_job.job_id)
    assert record.job_id in source.forked_by

    forked_report = platform.metric_report(record.job_id)
    source_report = platform.metric_report(golden_job.job_id)
    for (_, m1), (_, m2) in zip(source_report.rows, forked_report.rows):
        for name, value in m1.values.items():
            other = m2.values[name]
            assert (value is None and other is None) or abs(value - other) <= 1e-12


def test_fork_source_must_exist_and_match_dataset(platform, reference_archive):
    script = (
        "fork_features(job = 'j-9999')\n"
        "train_course(label_type = 'dropout')\n"
        "test_course(label_type = 'dropout')\n"
        "evaluate_course(label_type = 'dropout')\n"
    )
    record = platform.submit_and_run(predict_config(reference_archive, script=script))
    assert record.state == FAILED
    assert "fork source" in record.failure_reason


def test_invalid_script_fails_at_submission(platform, reference_archive):
    record = platform.submit_job(
        predict_config(reference_archive, script="train_course(label_type = 'dropout')\n")
    )
    assert record.state == FAILED
    assert "extract" in record.failure_reason


def test_config_script_label_conflict_fails(platform, reference_archive):
    config = ExperimentConfig(
        mode="predict",
        image=str(reference_archive),
        controller_text=CANONICAL_SCRIPT,
        label_type="dropout_week",
    )
    record = platform.submit_job(config)
    assert record.state == FAILED
    assert "label_type" in record.failure_reason


def test_unreachable_image_fails_at_fetching(platform):
    config = ExperimentConfig(
        mode="predict",
        image="/nonexistent/image.tar",
        controller_text=CANONICAL_SCRIPT,
        label_type="dropout",
    )
    record = platform.submit_and_run(config)
    assert record.state == FAILED
    assert "image check failed" in record.failure_reason
    states = states_from_events(platform.events(record.job_id))
    assert states[-2:] == [FETCHING, FAILED]


def test_probe_timeout_fails_at_fetching(platform, tmp_path_factory, monkeypatch):
    monkeypatch.setattr("morf.sandbox.PROBE_TIMEOUT_SECONDS", 1.0)
    archive = images.build_image_archive(
        {"run.py": "import time\ntime.sleep(20)\n"}, "run.py",
        tmp_path_factory.mktemp("img") / "stall.tar",
    )
    config = ExperimentConfig(
        mode="predict", image=str(archive), controller_text=CANONICAL_SCRIPT, label_type="dropout"
    )
    record = platform.submit_and_run(config)
    assert record.state == FAILED
    assert "probe" in record.failure_reason


def test_violation_image_fails_job_with_violation_recorded(platform, tmp_path_factory):
    archive = images.network_violation_image(tmp_path_factory.mktemp("img") / "net.tar")
    config = ExperimentConfig(
        mode="predict", image=str(archive), controller_text=CANONICAL_SCRIPT, label_type="dropout"
    )
    record = platform.submit_and_run(config)
    assert record.state == FAILED
    assert "network" in record.failure_reason
    skipped = [s for s in record.task_statuses.values() if s["status"] == "skipped"]
    assert skipped  # downstream tasks never ran


def test_extract_only_job_completes_without_report(platform, reference_archive):
    record = platform.submit_and_run(
        predict_config(reference_archive, script="extract_session()\n")
    )
    assert record.state == COMPLETED
    results = platform.results(record.job_id)
    assert results["report"] is None
    kinds = {r.kind for r in platform.registry.list_artifacts(job_id=record.job_id)}
    assert "features" in kinds


def test_results_require_terminal_state(platform):
    job_id = platform.jobs.next_job_id()
    platform.jobs.create(_record(job_id))
    platform.jobs.transition(job_id, VALIDATED)
    with pytest.raises(JobNotTerminalError):
        platform.results(job_id)


def test_failed_job_without_metrics_raises_unavailable(platform):
    job_id = platform.jobs.next_job_id()
    platform.jobs.create(_record(job_id))
    platform.jobs.transition(job_id, FAILED, reason="nope")
    with pytest.raises(ResultsUnavailableError):
        platform.results(job_id)


def test_rules_job_end_to_end(platform):
    config = ExperimentConfig(
        mode="rules",
        rules_text="if a student does posts_in_forum(week=1) then completion\n",
        user_id="replicator",
    )
    record = platform.submit_and_run(config)
    assert record.state == COMPLETED, record.failure_reason
    results = platform.results(record.job_id)
    report = results["report"]
    assert report["n_sessions"] == 6  # every session of the 2x3 catalog
    assert report["modal_direction"] == 1
    kinds = {r.kind for r in platform.registry.list_artifacts(job_id=record.job_id)}
    assert {"config", "rulefile", "metrics"} <= kinds


def test_rules_reject_nondropout_label(platform):
    config = ExperimentConfig(
        mode="rules",
        rules_text="if a student does active(week=1) then dropout\n",
        label_type="dropout_week",
    )
    record = platform.submit_job(config)
    assert record.state == FAILED


def test_compare_requires_five_courses(platform, golden_job):
    with pytest.raises(MorfError):
        platform.compare(golden_job.job_id, golden_job.job_id, "auc")


def test_crash_recovery_marks_interrupted_jobs_failed(tmp_path, golden_root):
    _, manifest = golden_root
    settings = PlatformSettings(workers=2, backend="bundle", manifest=manifest)
    platform = MorfPlatform(tmp_path / "p", settings)
    job_id = platform.jobs.next_job_id()
    platform.jobs.create(_record(job_id))
    platform.jobs.transition(job_id, VALIDATED)
    platform.jobs.transition(job_id, FETCHING)
    platform.jobs.transition(job_id, RUNNING)
    # simulate a hard process kill: a fresh platform instance opens the same root
    reopened = MorfPlatform(tmp_path / "p", settings)
    record = reopened.jobs.load(job_id)
    assert record.state == FAILED
    assert "interrupted" in record.failure_reason
    assert reopened.registry.fsck() == []


def test_courses_listing_contains_no_user_ids(platform):
    listing = platform.courses_listing()
    assert {c["course_id"] for c in listing} == {"course-a", "course-b"}
    assert all(set(c) == {"course_id", "n_sessions", "eligible"} for c in listing)


# golden file: produced by the first verified run of the reference image over
# the seed-42 catalog, cross-checked below by brute-force recomputation from
# the archived predictions
GOLDEN_METRICS = {
    "course-a": {
        "accuracy": 0.75,
        "precision": 0.8166666666666667,
        "recall": 0.7777777777777778,
        "specificity": 0.7027027027027027,
        "f1": 0.7967479674796747,
        "auc": 0.7767052767052767,
        "cohens_kappa": 0.47257383966244726,
        "log_loss": 0.5467758778248532,
    },
    "course-b": {
        "accuracy": 0.76,
        "precision": 0.7903225806451613,
        "recall": 0.8166666666666667,
        "specificity": 0.675,
        "f1": 0.8032786885245902,
        "auc": 0.845625,
        "cohens_kappa": 0.4957983193277311,
        "log_loss": 0.49099447201004076,
    },
}


def test_golden_metric_values_match_golden_file(platform, golden_job):
    report = platform.metric_report(golden_job.job_id)
    for course_id, metric_set in report.rows:
        for name, expected in GOLDEN_METRICS[course_id].items():
            assert abs(metric_set.values[name] - expected) <= 1e-12, (course_id, name)


def test_golden_report_matches_bruteforce_recomputation(platform, golden_job):
    """Dual route: recompute every metric from the archived predictions and
    the holdout labels with the naive oracle."""
    from morf.catalog import extract_labels
    from morf.evaluation import parse_predictions_csv

    from .test_evaluation import report_bruteforce

    report = platform.metric_report(golden_job.job_id)
    predictions_by_course = {}
    for record in platform.registry.list_artifacts(job_id=golden_job.job_id, kind="predictions"):
        course_id = record.task_id.split("-test-")[1].rsplit("-", 1)[0]
        _, data = platform.registry.get_artifact(record.persistent_id, trusted=True)
        predictions_by_course[course_id] = parse_predictions_csv(data.decode())
    assert set(predictions_by_course) == {"course-a", "course-b"}

    for course_id, metric_set in report.rows:
        holdout = platform.catalog.course(course_id).holdout_session()
        labels = extract_labels(holdout, "dropout").as_mapping("dropout")
        oracle = report_bruteforce(predictions_by_course[course_id], labels)
        for name, expected in oracle.items():
            got = metric_set.values[name]
            if expected is None:
                assert got is None
            else:
                assert abs(got - expected) <= 1e-12, (course_id, name)


def test_cache_soundness_forced_reexecution(platform, reference_archive, golden_job):
    """A cache hit's artifact digests equal those of a forced re-execution."""

    def digests(job_id, kind):
        return sorted(
            r.digest for r in platform.registry.list_artifacts(job_id=job_id, kind=kind)
        )

    cache_file = platform.root / "cache.jsonl"
    assert cache_file.exists()
    cache_file.rename(platform.root / "cache.jsonl.bak")
    before = len(platform.sandbox_invocations)
    forced = platform.submit_and_run(predict_config(reference_archive))
    assert forced.state == COMPLETED, forced.failure_reason
    stages = [stage for _, _, stage in platform.sandbox_invocations[before:]]
    assert "extract" in stages and "train" in stages  # genuinely re-executed
    for kind in ("features", "model", "predictions"):
        assert digests(forced.job_id, kind) == digests(golden_job.job_id, kind)
