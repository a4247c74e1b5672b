"""Execute-against sandbox: fetch, verify, and run experiment images.

Images are tars of a rootfs plus an ``image.json`` naming the entrypoint.
Two interchangeable backends run them:

``namespace``
    A minimal container runtime on Linux namespaces: each run gets a private
    mount namespace with the inputs bind-mounted read-only under /morf-data
    and a private network namespace with no interfaces, so egress and input
    mutation are blocked by the kernel. Needs root (available in the
    platform's service container).

``bundle``
    A daemonless runner for CI and development: inputs are copied into a
    scratch tree (the originals are never exposed to the run), write
    permission is stripped from the copies, and a deny-all shim injected
    into Python entrypoints blocks and records network or read-only-write
    attempts. Input trees are digest-compared before and after every run,
    so any mutation that slips past the shim is still detected and the
    task fails with the violation recorded.

Both backends inject the recording shim, cap captured output at 1 MiB per
stream, and enforce wall-clock and memory limits.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import resource
import shlex
import shutil
import signal
import stat
import subprocess
import tarfile
import tempfile
import time
import uuid
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import httpx

from morf.catalog import DATA_ROOT, MountSpec
from morf.errors import MorfError
from morf.registry import ArtifactRecord, ArtifactRegistry, sha256_hex

IMAGE_META_FILE = "image.json"
OUTPUT_CAP_BYTES = 1024 * 1024
TRUNCATION_MARKER = "\n[truncated by platform]"
DEFAULT_IMAGE_CAP = 256 * 1024 * 1024
PROBE_TIMEOUT_SECONDS = 10.0

REQUIRED_OUTPUTS = {"extract": ("features.csv",), "train": ("model",), "test": ("predictions.csv",)}

VIOLATION_NETWORK = "network"
VIOLATION_READONLY_WRITE = "readonly-write"


class SandboxError(MorfError):
    pass


class SandboxInfraError(SandboxError):
    """Platform-side failure (not user code); eligible for one retry."""


class UnreachableImageError(SandboxError):
    pass


class DigestMismatchError(SandboxError):
    pass


class ImageTooLargeError(SandboxError):
    pass


class ImageFormatError(SandboxError):
    pass


class ProbeError(SandboxError):
    pass


@dataclass(frozen=True)
class ResourceLimits:
    wall_seconds: float = 3600.0
    memory_bytes: int = 2 * 1024**3
    cpu_seconds: Optional[int] = None


@dataclass(frozen=True)
class ImageArtifact:
    reference: str
    digest: str
    fetched_at: float
    size: int
    record: ArtifactRecord


@dataclass
class RunResult:
    task_id: str
    ok: bool
    exit_status: Optional[int]
    timed_out: bool
    duration: float
    stdout: str
    stderr: str
    violations: tuple
    output_dir: Path
    outputs: dict
    scratch_dir: Path = None
    failure_reason: str = ""


# ---------------------------------------------------------------------------
# image fetch / unpack
# ---------------------------------------------------------------------------


def fetch_image(
    reference: str,
    registry: ArtifactRegistry,
    job_id: str,
    pinned_digest: Optional[str] = None,
    size_cap: int = DEFAULT_IMAGE_CAP,
) -> ImageArtifact:
    """Fetch an image archive (local path or HTTP URL) into the registry.

    Content-addressed: re-fetching identical bytes is a no-op. A pinned
    digest in the submission must match the fetched bytes exactly.
    """
    if reference.startswith(("http://", "https://")):
        try:
            response = httpx.get(reference, timeout=30.0, follow_redirects=True)
        except httpx.HTTPError as exc:
            raise UnreachableImageError(f"cannot fetch image {reference}: {exc}") from exc
        if response.status_code != 200:
            raise UnreachableImageError(
                f"cannot fetch image {reference}: HTTP {response.status_code}"
            )
        data = response.content
    else:
        path = Path(reference)
        if not path.is_file():
            raise UnreachableImageError(f"image archive not found: {reference}")
        data = path.read_bytes()
    if len(data) > size_cap:
        raise ImageTooLargeError(f"image is {len(data)} bytes, cap is {size_cap}")
    digest = sha256_hex(data)
    if pinned_digest is not None and digest != pinned_digest:
        raise DigestMismatchError(
            f"image digest {digest} does not match pinned digest {pinned_digest}"
        )
    record = registry.put_artifact("image", data, job_id=job_id)
    return ImageArtifact(
        reference=reference, digest=digest, fetched_at=time.time(), size=len(data), record=record
    )


def load_image_meta(image_dir: Path) -> dict:
    meta_path = Path(image_dir) / IMAGE_META_FILE
    if not meta_path.is_file():
        raise ImageFormatError(f"image metadata {IMAGE_META_FILE} missing")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise ImageFormatError(f"malformed {IMAGE_META_FILE}: {exc}") from exc
    entrypoint = meta.get("entrypoint")
    if not entrypoint or not (Path(image_dir) / entrypoint).is_file():
        raise ImageFormatError(f"entrypoint {entrypoint!r} not present in image")
    meta.setdefault("interpreter", ["python3"])
    return meta


def unpack_image(registry: ArtifactRegistry, digest: str, cache_root: Path) -> Path:
    """Unpack an image blob into the shared cache; verified and idempotent."""
    cache_root = Path(cache_root)
    target = cache_root / digest
    if (target / IMAGE_META_FILE).is_file():
        return target
    blob = registry.blob_path(digest)
    if not blob.is_file():
        raise UnreachableImageError(f"image blob {digest} not in registry")
    data = blob.read_bytes()
    if sha256_hex(data) != digest:
        raise DigestMismatchError(f"image blob {digest} corrupted on disk")
    cache_root.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(dir=cache_root, prefix=".unpack-"))
    try:
        with tarfile.open(fileobj=io.BytesIO(data)) as tar:
            for member in tar.getmembers():
                name = Path(member.name)
                if name.is_absolute() or ".." in name.parts:
                    raise ImageFormatError(f"unsafe path in image archive: {member.name}")
                if not (member.isfile() or member.isdir()):
                    raise ImageFormatError(
                        f"unsupported member type in image archive: {member.name}"
                    )
            tar.extractall(staging)
        load_image_meta(staging)  # structural check before publication
        try:
            staging.rename(target)
        except OSError:
            if (target / IMAGE_META_FILE).is_file():  # concurrent unpack won
                shutil.rmtree(staging, ignore_errors=True)
            else:
                raise
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    return target


# ---------------------------------------------------------------------------
# deny-all shim injected into the sandbox
# ---------------------------------------------------------------------------

_SITECUSTOMIZE = r'''
"""Sandbox guard: blocks and records network egress and read-only writes."""
import builtins
import os
import socket

_VIOLATION_FILE = os.environ.get("MORF_VIOLATION_FILE")
_RO_ROOTS = [p for p in os.environ.get("MORF_READONLY_ROOTS", "").split(":") if p]


def _record(kind):
    if not _VIOLATION_FILE:
        return
    try:
        with _real_open(_VIOLATION_FILE, "a") as fh:
            fh.write(kind + "\n")
    except OSError:
        pass


def _deny_network(*_args, **_kwargs):
    _record("network")
    raise OSError("network egress is disabled inside the sandbox")


socket.socket.connect = _deny_network
socket.socket.connect_ex = _deny_network
socket.socket.sendto = _deny_network
socket.create_connection = _deny_network

_real_open = builtins.open


def _under_readonly(path):
    try:
        resolved = os.path.abspath(os.fspath(path))
    except TypeError:
        return False
    return any(resolved == root or resolved.startswith(root + os.sep) for root in _RO_ROOTS)


def _guarded_open(file, mode="r", *args, **kwargs):
    if any(flag in mode for flag in ("w", "a", "x", "+")) and _under_readonly(file):
        _record("readonly-write")
        raise PermissionError(f"read-only input mount: {file}")
    return _real_open(file, mode, *args, **kwargs)


builtins.open = _guarded_open
'''


# ---------------------------------------------------------------------------
# backends
# ---------------------------------------------------------------------------


@dataclass
class BackendOutcome:
    exit_status: Optional[int]
    timed_out: bool
    stdout: str
    stderr: str
    duration: float
    output_dir: Path
    violations: tuple


def _cap_stream(path: Path) -> str:
    data = path.read_bytes() if path.exists() else b""
    if len(data) > OUTPUT_CAP_BYTES:
        return data[:OUTPUT_CAP_BYTES].decode(errors="replace") + TRUNCATION_MARKER
    return data.decode(errors="replace")


def _path_digest(path: Path) -> str:
    """Order-independent content digest of a file or directory tree."""
    path = Path(path)
    h = hashlib.sha256()
    if path.is_file():
        h.update(path.read_bytes())
        return h.hexdigest()
    for sub in sorted(path.rglob("*")):
        h.update(str(sub.relative_to(path)).encode())
        if sub.is_file():
            h.update(sub.read_bytes())
    return h.hexdigest()


def _read_violations(violation_file: Path, pre: dict, post: dict) -> tuple:
    kinds = []
    if violation_file.exists():
        for line in violation_file.read_text().splitlines():
            line = line.strip()
            if line and line not in kinds:
                kinds.append(line)
    if pre != post and VIOLATION_READONLY_WRITE not in kinds:
        kinds.append(VIOLATION_READONLY_WRITE)
    return tuple(kinds)


def _base_env(scratch: Path, data_root: str, shim_dir: Path, violation_file: Path, ro_roots: list) -> dict:
    return {
        "PATH": "/usr/local/bin:/usr/bin:/bin",
        "HOME": str(scratch / "home"),
        "TMPDIR": str(scratch / "tmp"),
        "LANG": "C.UTF-8",
        "PYTHONDONTWRITEBYTECODE": "1",
        "PYTHONHASHSEED": "0",
        "PYTHONPATH": str(shim_dir),
        "MORF_DATA_ROOT": data_root,
        "MORF_VIOLATION_FILE": str(violation_file),
        "MORF_READONLY_ROOTS": ":".join(ro_roots),
        "MORF_SEED": "0",
    }


def _prepare_common(scratch: Path) -> tuple:
    for sub in ("home", "tmp", "shim"):
        (scratch / sub).mkdir(parents=True, exist_ok=True)
    shim_dir = scratch / "shim"
    (shim_dir / "sitecustomize.py").write_text(_SITECUSTOMIZE)
    violation_file = scratch / "violations.log"
    violation_file.touch()
    violation_file.chmod(0o666)
    for sub in ("home", "tmp"):
        (scratch / sub).chmod(0o777)
    return shim_dir, violation_file


def _limit_preexec(limits: ResourceLimits):
    def preexec():
        os.setsid()
        if limits.memory_bytes:
            resource.setrlimit(resource.RLIMIT_AS, (limits.memory_bytes, limits.memory_bytes))
        if limits.cpu_seconds:
            resource.setrlimit(resource.RLIMIT_CPU, (limits.cpu_seconds, limits.cpu_seconds))

    return preexec


def _run_child(cmd, cwd, env, limits, scratch) -> tuple:
    stdout_path = scratch / "stdout.log"
    stderr_path = scratch / "stderr.log"
    start = time.monotonic()
    timed_out = False
    exit_status: Optional[int] = None
    with stdout_path.open("wb") as out_fh, stderr_path.open("wb") as err_fh:
        try:
            proc = subprocess.Popen(
                cmd,
                cwd=cwd,
                env=env,
                stdout=out_fh,
                stderr=err_fh,
                preexec_fn=_limit_preexec(limits),
            )
        except OSError as exc:
            raise SandboxInfraError(f"failed to launch sandbox process: {exc}") from exc
        try:
            exit_status = proc.wait(timeout=limits.wall_seconds)
        except subprocess.TimeoutExpired:
            timed_out = True
            try:
                os.killpg(proc.pid, signal.SIGKILL)
            except ProcessLookupError:
                pass
            proc.wait()
    duration = time.monotonic() - start
    return exit_status, timed_out, _cap_stream(stdout_path), _cap_stream(stderr_path), duration


def _make_tree_writable(path: Path) -> None:
    path = Path(path)
    if not path.exists():
        return
    for sub in [path, *path.rglob("*")]:
        try:
            mode = sub.stat().st_mode
            sub.chmod(mode | stat.S_IWUSR | (stat.S_IXUSR if stat.S_ISDIR(mode) else 0))
        except OSError:
            pass


def cleanup_scratch(path: Path) -> None:
    _make_tree_writable(path)
    shutil.rmtree(path, ignore_errors=True)


class BundleRunnerBackend:
    """Daemonless execution in a scratch tree with copied, locked-down inputs."""

    name = "bundle"

    @staticmethod
    def available() -> bool:
        return True

    def execute(self, image_dir, meta, argv, mounts, scratch, limits, env_extra=None) -> BackendOutcome:
        shim_dir, violation_file = _prepare_common(scratch)
        data_dir = scratch / "data"
        output_dir = data_dir / "output"
        output_dir.mkdir(parents=True)

        materialized = []
        for host, container in mounts:
            rel = Path(container).relative_to(DATA_ROOT)
            dest = data_dir / rel
            host = Path(host)
            if host.is_dir():
                shutil.copytree(host, dest)
            else:
                dest.parent.mkdir(parents=True, exist_ok=True)
                shutil.copy2(host, dest)
            materialized.append(dest)

        ro_roots = []
        for top in sorted({m.parts[len(data_dir.parts)] for m in materialized}):
            root = data_dir / top
            ro_roots.append(str(root))
            for sub in [root, *root.rglob("*")]:
                sub.chmod(0o555 if sub.is_dir() else 0o444)

        pre = {str(r): _path_digest(r) for r in ro_roots}
        image_copy = scratch / "image"
        shutil.copytree(image_dir, image_copy)

        env = _base_env(scratch, str(data_dir), shim_dir, violation_file, ro_roots)
        env.update(env_extra or {})
        cmd = list(meta["interpreter"]) + [str(image_copy / meta["entrypoint"])] + list(argv)
        exit_status, timed_out, stdout, stderr, duration = _run_child(
            cmd, image_copy, env, limits, scratch
        )
        post = {r: _path_digest(r) for r in pre}
        violations = _read_violations(violation_file, pre, post)
        return BackendOutcome(
            exit_status=exit_status,
            timed_out=timed_out,
            stdout=stdout,
            stderr=stderr,
            duration=duration,
            output_dir=output_dir,
            violations=violations,
        )


class NamespaceBackend:
    """Container-grade isolation on Linux namespaces (root required).

    Each run gets private mount and network namespaces: /morf-data is a
    per-run bind tree with read-only input mounts, and the network namespace
    has no interfaces, so egress fails in the kernel no matter what the
    entrypoint does.
    """

    name = "namespace"
    _availability: Optional[bool] = None

    @classmethod
    def available(cls) -> bool:
        if cls._availability is None:
            cls._availability = cls._probe()
        return cls._availability

    @staticmethod
    def _probe() -> bool:
        if os.geteuid() != 0 or shutil.which("unshare") is None:
            return False
        with tempfile.TemporaryDirectory() as td:
            src = Path(td) / "src"
            dst = Path(td) / "dst"
            src.mkdir()
            dst.mkdir()
            probe = subprocess.run(
                [
                    "unshare", "--net", "--mount", "/bin/sh", "-c",
                    f"mount --bind {shlex.quote(str(src))} {shlex.quote(str(dst))} && "
                    f"mount -o remount,ro,bind {shlex.quote(str(dst))}",
                ],
                capture_output=True,
                timeout=20,
            )
        return probe.returncode == 0

    def execute(self, image_dir, meta, argv, mounts, scratch, limits, env_extra=None) -> BackendOutcome:
        if not self.available():
            raise SandboxInfraError("namespace backend unavailable on this host")
        shim_dir, violation_file = _prepare_common(scratch)
        morf_data_src = scratch / "morf-data"
        output_dir = scratch / "output"
        morf_data_src.mkdir()
        output_dir.mkdir()
        Path(DATA_ROOT).mkdir(exist_ok=True)

        image_copy = scratch / "image"
        shutil.copytree(image_dir, image_copy)

        lines = ["set -e", f"mount --bind {shlex.quote(str(morf_data_src))} {DATA_ROOT}"]
        for host, container in mounts:
            host = Path(host)
            quoted_container = shlex.quote(container)
            if host.is_dir():
                lines.append(f"mkdir -p {quoted_container}")
            else:
                lines.append(f"mkdir -p {shlex.quote(str(Path(container).parent))}")
                lines.append(f"touch {quoted_container}")
            lines.append(f"mount --bind {shlex.quote(str(host))} {quoted_container}")
            lines.append(f"mount -o remount,ro,bind {quoted_container}")
        lines.append(f"mkdir -p {DATA_ROOT}/output")
        lines.append(f"mount --bind {shlex.quote(str(output_dir))} {DATA_ROOT}/output")
        lines.append(f"cd {shlex.quote(str(image_copy))}")
        entry_cmd = " ".join(
            shlex.quote(part)
            for part in list(meta["interpreter"]) + [str(image_copy / meta["entrypoint"])] + list(argv)
        )
        lines.append(f"exec {entry_cmd}")
        script = scratch / "run.sh"
        script.write_text("\n".join(lines) + "\n")

        ro_roots = [f"{DATA_ROOT}/raw", f"{DATA_ROOT}/features", f"{DATA_ROOT}/labels", f"{DATA_ROOT}/model"]
        env = _base_env(scratch, DATA_ROOT, shim_dir, violation_file, ro_roots)
        env.update(env_extra or {})

        pre = {container: _path_digest(host) for host, container in mounts}
        cmd = ["unshare", "--net", "--mount", "/bin/sh", str(script)]
        exit_status, timed_out, stdout, stderr, duration = _run_child(
            cmd, scratch, env, limits, scratch
        )
        post = {container: _path_digest(host) for host, container in mounts}
        violations = _read_violations(violation_file, pre, post)
        return BackendOutcome(
            exit_status=exit_status,
            timed_out=timed_out,
            stdout=stdout,
            stderr=stderr,
            duration=duration,
            output_dir=output_dir,
            violations=violations,
        )


_BACKENDS = {"bundle": BundleRunnerBackend, "namespace": NamespaceBackend}


def get_backend(name: str = "auto"):
    """Resolve a backend by name; ``auto`` prefers kernel-level isolation."""
    if name == "auto":
        return NamespaceBackend() if NamespaceBackend.available() else BundleRunnerBackend()
    try:
        backend = _BACKENDS[name]()
    except KeyError:
        raise SandboxError(f"unknown sandbox backend {name!r}") from None
    if not backend.available():
        raise SandboxError(f"sandbox backend {name!r} unavailable on this host")
    return backend


def available_backends() -> list:
    return [name for name, cls in _BACKENDS.items() if cls().available()]


# ---------------------------------------------------------------------------
# the run contract
# ---------------------------------------------------------------------------


def run_sandboxed(
    image_dir: Path,
    mounts: MountSpec,
    limits: ResourceLimits,
    backend,
    task_id: str,
    scratch_root: Path,
    env: Optional[dict] = None,
) -> RunResult:
    """Run one task's sandbox and report the outcome.

    Success requires exit status 0, zero sandbox violations, and the mode's
    required outputs present in the output directory. The scratch tree under
    ``scratch_root`` survives the call so the caller can archive outputs;
    release it with :func:`cleanup_scratch`.
    """
    meta = load_image_meta(image_dir)
    for host, container in mounts.read_only_mounts:
        if not Path(host).exists():
            raise SandboxInfraError(f"read-only mount source missing: {host} -> {container}")
    scratch = Path(scratch_root) / f"{task_id}-{uuid.uuid4().hex[:8]}"
    scratch.mkdir(parents=True)

    outcome = backend.execute(
        image_dir=image_dir,
        meta=meta,
        argv=mounts.invocation.argv(),
        mounts=list(mounts.read_only_mounts),
        scratch=scratch,
        limits=limits,
        env_extra=env,
    )

    outputs = {}
    missing = []
    for name in REQUIRED_OUTPUTS.get(mounts.mode, ()):
        path = outcome.output_dir / name
        if name == "model":
            if path.is_dir() and any(p.is_file() for p in path.rglob("*")):
                outputs[name] = path
            else:
                missing.append(name)
        elif path.is_file():
            outputs[name] = path
        else:
            missing.append(name)

    ok = (
        outcome.exit_status == 0
        and not outcome.timed_out
        and not outcome.violations
        and not missing
    )
    if outcome.timed_out:
        reason = f"wall-clock limit of {limits.wall_seconds}s exceeded"
    elif outcome.violations:
        reason = f"sandbox violations: {', '.join(outcome.violations)}"
    elif outcome.exit_status != 0:
        reason = f"entrypoint exited with status {outcome.exit_status}"
    elif missing:
        reason = f"required outputs missing: {', '.join(missing)}"
    else:
        reason = ""

    return RunResult(
        task_id=task_id,
        ok=ok,
        exit_status=outcome.exit_status,
        timed_out=outcome.timed_out,
        duration=outcome.duration,
        stdout=outcome.stdout,
        stderr=outcome.stderr,
        violations=outcome.violations,
        output_dir=outcome.output_dir,
        outputs=outputs,
        scratch_dir=scratch,
        failure_reason=reason,
    )


def probe_image(image_dir: Path, backend, scratch_root: Path) -> None:
    """Dry-run ``--mode probe``; must exit 0 within the probe deadline."""
    from morf.catalog import InvocationArgs

    spec = MountSpec(
        mode="probe",
        read_only_mounts=(),
        invocation=InvocationArgs(mode="probe", course_id="-", session_id="-", label_type="-"),
    )
    result = run_sandboxed(
        image_dir,
        spec,
        ResourceLimits(wall_seconds=PROBE_TIMEOUT_SECONDS, memory_bytes=512 * 1024**2),
        backend,
        task_id="probe",
        scratch_root=scratch_root,
    )
    cleanup_scratch(result.scratch_dir)
    if result.timed_out:
        raise ProbeError(f"image probe timed out after {PROBE_TIMEOUT_SECONDS}s")
    if result.exit_status != 0:
        raise ProbeError(
            f"image probe exited with status {result.exit_status}: {result.stderr.strip()[:500]}"
        )
