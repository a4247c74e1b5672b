"""CLI tests: the subcommand surface over a shared platform root."""

import json

import pytest
from click.testing import CliRunner

from morf import images
from morf.cli import main

from .test_dsl import CANONICAL_SCRIPT


@pytest.fixture(scope="module")
def runner():
    return CliRunner()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A platform root with synthesized data, a reference image, and a config."""
    ws = tmp_path_factory.mktemp("cli-ws")
    root = ws / "platform"
    root.mkdir()

    spec_a = ws / "course-a.spec"
    spec_a.write_text(
        "course_id = course-a\nn_sessions = 3\nusers_per_session = 100\n"
        "weeks = 6\nseed = 42\nsignal_strength = 0.8\n"
    )
    spec_b = ws / "course-b.spec"
    spec_b.write_text(
        "course_id = course-b\nn_sessions = 3\nusers_per_session = 100\n"
        "weeks = 6\nseed = 42\nsignal_strength = 0.8\n"
    )

    archive = images.reference_experiment_image(ws / "reference.tar")
    script = ws / "workflow.morf"
    script.write_text(CANONICAL_SCRIPT)
    config = ws / "job.ini"
    config.write_text(
        f"[morf]\nmode = predict\nimage = {archive}\ncontroller = {script}\n"
        "label_type = dropout\n"
    )
    rule_file = ws / "finding.rule"
    rule_file.write_text("if a student does posts_in_forum(week=1) then completion\n")
    rules_config = ws / "rules.ini"
    rules_config.write_text(f"[morf]\nmode = rules\nrules = {rule_file}\n")

    (root / "platform.json").write_text(json.dumps({"backend": "bundle", "workers": 4}))
    return {
        "root": root,
        "specs": [spec_a, spec_b],
        "config": config,
        "rules_config": rules_config,
        "ws": ws,
    }


def invoke(runner, workspace, *args):
    return runner.invoke(main, ["--root", str(workspace["root"]), *args])


def test_data_synth_writes_bundles_and_manifest(runner, workspace):
    result = invoke(
        runner,
        workspace,
        "data", "synth",
        "--spec", str(workspace["specs"][0]),
        "--spec", str(workspace["specs"][1]),
        "--out", str(workspace["root"] / "data"),
    )
    assert result.exit_code == 0, result.output
    assert "6 session bundles" in result.output
    assert (workspace["root"] / "data" / "manifest.csv").exists()


def test_data_ls_lists_courses(runner, workspace):
    result = invoke(runner, workspace, "data", "ls")
    assert result.exit_code == 0, result.output
    assert "course-a: 3 sessions" in result.output
    assert "course-b: 3 sessions" in result.output


def test_submit_runs_job_to_completion(runner, workspace):
    result = invoke(runner, workspace, "submit", str(workspace["config"]), "--user", "cli-user")
    assert result.exit_code == 0, result.output
    assert "j-0001: validated" in result.output
    assert "j-0001: completed" in result.output


def test_status_shows_task_summary(runner, workspace):
    result = invoke(runner, workspace, "status", "j-0001", "--events")
    assert result.exit_code == 0, result.output
    assert "j-0001: completed" in result.output
    assert "succeeded=12" in result.output.replace("cached", "succeeded") or "tasks:" in result.output
    assert "stage_started" in result.output


def test_results_stdout_csv(runner, workspace):
    result = invoke(runner, workspace, "results", "j-0001")
    assert result.exit_code == 0, result.output
    assert result.output.splitlines()[0] == "course_id,metric,value"
    assert "course-a,auc," in result.output


def test_results_writes_delimited_output_and_figures(runner, workspace):
    out_dir = workspace["ws"] / "report"
    result = invoke(runner, workspace, "results", "j-0001", "--out", str(out_dir))
    assert result.exit_code == 0, result.output
    assert (out_dir / "metrics.csv").exists()
    assert (out_dir / "metrics.json").exists()
    figure = out_dir / "metrics.png"
    assert figure.exists() and figure.stat().st_size > 1000


def test_fork_reuses_features(runner, workspace):
    result = invoke(runner, workspace, "fork", "j-0001")
    assert result.exit_code == 0, result.output
    assert "completed" in result.output


def test_rules_submit_and_report(runner, workspace):
    result = invoke(runner, workspace, "submit", str(workspace["rules_config"]))
    assert result.exit_code == 0, result.output
    out_dir = workspace["ws"] / "rules-report"
    job_id = [line for line in result.output.splitlines() if line.startswith("job ")][0].split()[1].rstrip(":")
    result = invoke(runner, workspace, "results", job_id, "--out", str(out_dir))
    assert result.exit_code == 0, result.output
    assert (out_dir / "rules.csv").exists()
    assert (out_dir / "rules.png").exists()


def test_artifacts_ls_and_fsck(runner, workspace):
    result = invoke(runner, workspace, "artifacts", "ls", "--job", "j-0001")
    assert result.exit_code == 0, result.output
    assert "kind=metrics" in result.output
    assert "morf:j-0001:" in result.output

    result = invoke(runner, workspace, "artifacts", "fsck")
    assert result.exit_code == 0, result.output
    assert result.output.startswith("ok:")


def test_artifacts_get_respects_trust(runner, workspace):
    listing = invoke(runner, workspace, "artifacts", "ls", "--job", "j-0001", "--kind", "features")
    pid = listing.output.split()[0]
    denied = invoke(
        runner, workspace, "artifacts", "get", pid, "--out", str(workspace["ws"] / "f.csv")
    )
    assert denied.exit_code != 0
    assert "trusted" in denied.output

    allowed = invoke(
        runner,
        workspace,
        "artifacts", "get", pid, "--trusted", "--out", str(workspace["ws"] / "f.csv"),
    )
    assert allowed.exit_code == 0, allowed.output
    assert (workspace["ws"] / "f.csv").exists()


def test_invalid_config_fails_cleanly(runner, workspace, tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[morf]\nmode = predict\n")
    result = invoke(runner, workspace, "submit", str(bad))
    assert result.exit_code != 0
    assert "controller" in result.output


def test_compare_too_few_courses(runner, workspace):
    result = invoke(runner, workspace, "compare", "j-0001", "j-0002", "--metric", "auc")
    assert result.exit_code != 0
    assert "at least 5" in result.output
