"""Command-line surface; subcommands map onto the HTTP operations.

The CLI operates directly on a platform root directory (env MORF_ROOT or
``--root``). ``morf serve`` exposes the same platform over HTTP.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from morf import synth
from morf.errors import MorfError
from morf.evaluation import MetricReport
from morf.orchestrator import COMPLETED, VALIDATED, parse_config
from morf.platform import MorfPlatform, load_settings


def open_platform(root: str, workers=None, backend=None) -> MorfPlatform:
    settings = load_settings(root)
    if workers is not None:
        settings.workers = workers
    if backend is not None:
        settings.backend = backend
    return MorfPlatform(Path(root), settings)


@click.group()
@click.option(
    "--root",
    envvar="MORF_ROOT",
    default=".morf",
    show_default=True,
    help="Platform root directory.",
)
@click.option("--workers", type=int, default=None, help="Worker pool size override.")
@click.option("--backend", default=None, help="Sandbox backend: auto, namespace, bundle.")
@click.pass_context
def main(ctx, root, workers, backend):
    """Self-hosted experiment orchestration for privacy-restricted learner data."""
    ctx.ensure_object(dict)
    ctx.obj.update(root=root, workers=workers, backend=backend)


def _platform(ctx) -> MorfPlatform:
    return open_platform(ctx.obj["root"], ctx.obj["workers"], ctx.obj["backend"])


def _echo_job(record):
    click.echo(f"job {record.job_id}: {record.state}")
    if record.failure_reason:
        click.echo(f"  reason: {record.failure_reason}")


@main.command()
@click.argument("config_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--user", default="anonymous", help="Submitting user id.")
@click.option("--no-run", is_flag=True, help="Validate and queue without executing.")
@click.pass_context
def submit(ctx, config_file, user, no_run):
    """Submit a job config (INI with a [morf] section) and run it."""
    from morf.gateway import attach_webhook_notifier

    platform = _platform(ctx)
    notifier = attach_webhook_notifier(platform)
    try:
        config = parse_config(Path(config_file).read_text(), user_id=user)
    except MorfError as exc:
        raise click.ClickException(str(exc)) from exc
    record = platform.submit_job(config)
    _echo_job(record)
    if record.state != VALIDATED:
        notifier.flush()
        sys.exit(1)
    if not no_run:
        record = platform.run_job(record.job_id)
        _echo_job(record)
        notifier.flush()
        if record.state != COMPLETED:
            sys.exit(1)


@main.command()
@click.argument("job_id")
@click.option("--events", "show_events", is_flag=True, help="Print the event feed.")
@click.pass_context
def status(ctx, job_id, show_events):
    """Show a job's state and task summary."""
    platform = _platform(ctx)
    try:
        record = platform.job(job_id)
    except MorfError as exc:
        raise click.ClickException(str(exc)) from exc
    _echo_job(record)
    counts = {}
    for status_info in record.task_statuses.values():
        counts[status_info["status"]] = counts.get(status_info["status"], 0) + 1
    if counts:
        click.echo("  tasks: " + ", ".join(f"{k}={v}" for k, v in sorted(counts.items())))
    if show_events:
        for entry in platform.events(job_id):
            click.echo(f"  {entry['ts']:.3f} {entry['event']} {json.dumps(entry['detail'])}")


@main.command()
@click.argument("job_id")
@click.option("--out", type=click.Path(file_okay=False), default=None,
              help="Write metrics.csv/json and figures into this directory.")
@click.option("--figures/--no-figures", default=True, show_default=True)
@click.pass_context
def results(ctx, job_id, out, figures):
    """Fetch a terminal job's summary results (metrics or rule statistics)."""
    from morf import report as report_mod

    platform = _platform(ctx)
    try:
        payload = platform.results(job_id)
    except MorfError as exc:
        raise click.ClickException(str(exc)) from exc
    if payload["report"] is None:
        click.echo(f"job {job_id}: no summary report ({payload['state']})")
        return
    if out is None:
        if payload["mode"] == "predict":
            click.echo(MetricReport.from_dict(payload["report"]).to_csv(), nl=False)
        else:
            click.echo(json.dumps(payload["report"], indent=1, sort_keys=True))
        return
    if payload["mode"] == "predict":
        paths = report_mod.write_metric_outputs(
            MetricReport.from_dict(payload["report"]), Path(out), figures=figures
        )
    else:
        paths = report_mod.write_rules_outputs(payload["report"], Path(out), figures=figures)
    for kind, path in sorted(paths.items()):
        click.echo(f"{kind}: {path}")


@main.command()
@click.argument("source_job_id")
@click.option("--no-run", is_flag=True)
@click.option("--user", default="anonymous")
@click.pass_context
def fork(ctx, source_job_id, no_run, user):
    """Start a new job that reuses a completed job's extracted features."""
    from morf import dsl
    from morf.orchestrator import ExperimentConfig

    platform = _platform(ctx)
    try:
        source = platform.job(source_job_id)
    except MorfError as exc:
        raise click.ClickException(str(exc)) from exc
    if source.mode != "predict":
        raise click.ClickException("only predict jobs can be forked")
    plan = dsl.parse_script(source.plan_text)
    kept = [
        step
        for step in plan.steps
        if step.stage not in (dsl.Stage.EXTRACT, dsl.Stage.EXTRACT_HOLDOUT, dsl.Stage.FORK_FEATURES)
    ]
    fork_step = dsl.WorkflowStep(
        stage=dsl.Stage.FORK_FEATURES, granularity=None, params=(("job", source_job_id),)
    )
    script = dsl.render_script(dsl.WorkflowPlan(steps=tuple([fork_step] + kept)))
    config = ExperimentConfig(
        mode="predict",
        image=source.image_reference,
        image_digest=source.image_digest,
        controller_text=script,
        label_type=source.label_type,
        user_id=user,
    )
    record = platform.submit_job(config)
    _echo_job(record)
    if record.state != VALIDATED:
        sys.exit(1)
    if not no_run:
        record = platform.run_job(record.job_id)
        _echo_job(record)
        if record.state != COMPLETED:
            sys.exit(1)


@main.command()
@click.argument("job_a")
@click.argument("job_b")
@click.option("--metric", default="auc", show_default=True)
@click.pass_context
def compare(ctx, job_a, job_b, metric):
    """Wilcoxon signed-rank comparison of two jobs across courses."""
    platform = _platform(ctx)
    try:
        result = platform.compare(job_a, job_b, metric)
    except MorfError as exc:
        raise click.ClickException(str(exc)) from exc
    direction = {1: f"{job_a} > {job_b}", -1: f"{job_a} < {job_b}", 0: "tied"}[result.direction]
    click.echo(
        f"W+ = {result.statistic}, p = {result.p_value:.6g}, "
        f"direction: {direction} ({result.n_pairs} of {result.n_courses} courses informative)"
    )


@main.group()
def data():
    """Dataset registration and synthesis."""


@data.command("ls")
@click.pass_context
def data_ls(ctx):
    """List registered courses (ids and session counts only)."""
    platform = _platform(ctx)
    for course in platform.courses_listing():
        tag = "" if course["eligible"] else "  (ineligible: single session)"
        click.echo(f"{course['course_id']}: {course['n_sessions']} sessions{tag}")


@data.command("synth")
@click.option("--spec", "spec_files", multiple=True, required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Course spec file (key = value); repeatable.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
def data_synth(spec_files, out):
    """Generate synthetic export bundles and a catalog manifest."""
    try:
        specs = [synth.parse_spec_file(Path(f)) for f in spec_files]
        manifest = synth.write_manifest(specs, Path(out))
    except MorfError as exc:
        raise click.ClickException(str(exc)) from exc
    n_sessions = sum(s.n_sessions for s in specs)
    click.echo(f"wrote {n_sessions} session bundles for {len(specs)} courses")
    click.echo(f"manifest: {manifest}")


@main.group()
def artifacts():
    """Content-addressed artifact registry."""


@artifacts.command("ls")
@click.option("--job", default=None)
@click.option("--kind", default=None)
@click.pass_context
def artifacts_ls(ctx, job, kind):
    """List artifact records."""
    platform = _platform(ctx)
    for record in platform.registry.list_artifacts(job_id=job, kind=kind):
        click.echo(
            f"{record.persistent_id}  kind={record.kind} size={record.size} digest={record.digest[:12]}"
        )


@artifacts.command("get")
@click.argument("persistent_id")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--trusted", is_flag=True,
              help="Assert trusted access for restricted artifact kinds.")
@click.pass_context
def artifacts_get(ctx, persistent_id, out, trusted):
    """Fetch one artifact's bytes (digest-verified)."""
    platform = _platform(ctx)
    try:
        record, payload = platform.registry.get_artifact(persistent_id, trusted=trusted)
    except MorfError as exc:
        raise click.ClickException(str(exc)) from exc
    Path(out).write_bytes(payload)
    click.echo(f"{record.persistent_id} -> {out} ({record.size} bytes)")


@artifacts.command("fsck")
@click.pass_context
def artifacts_fsck(ctx):
    """Verify every stored artifact rehashes to its recorded digest."""
    platform = _platform(ctx)
    problems = platform.registry.fsck()
    if problems:
        for problem in problems:
            click.echo(problem)
        raise click.ClickException(f"{len(problems)} integrity problems")
    count = len(platform.registry.list_artifacts())
    click.echo(f"ok: {count} records verified")


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8303, show_default=True)
@click.pass_context
def serve(ctx, host, port):
    """Serve the HTTP API."""
    import uvicorn

    from morf.gateway import create_app

    app = create_app(_platform(ctx))
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
