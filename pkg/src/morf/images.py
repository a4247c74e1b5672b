"""Builders for the bundled experiment images.

An image archive is a plain tar of a rootfs plus ``image.json`` naming the
entrypoint (and optionally the interpreter argv used to launch it). The
builders write deterministic tars: fixed ownership, zeroed mtimes, sorted
member order, so an image's content digest is stable across builds.
"""

from __future__ import annotations

import io
import json
import tarfile
from importlib import resources
from pathlib import Path

from morf.sandbox import IMAGE_META_FILE


def build_image_archive(
    files: dict, entrypoint: str, out_path: Path, interpreter: tuple = ("python3",)
) -> Path:
    """Write a deterministic image tar; ``files`` maps name -> bytes or str."""
    if entrypoint not in files:
        raise ValueError(f"entrypoint {entrypoint!r} not among image files")
    members = dict(files)
    members[IMAGE_META_FILE] = json.dumps(
        {"entrypoint": entrypoint, "interpreter": list(interpreter)}, sort_keys=True
    )
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with tarfile.open(out_path, "w", format=tarfile.USTAR_FORMAT) as tar:
        for name in sorted(members):
            data = members[name]
            if isinstance(data, str):
                data = data.encode()
            info = tarfile.TarInfo(name=name)
            info.size = len(data)
            info.mtime = 0
            info.uid = info.gid = 0
            info.uname = info.gname = "root"
            info.mode = 0o755 if name == entrypoint else 0o644
            tar.addfile(info, io.BytesIO(data))
    return out_path


def _refimage_source(name: str) -> str:
    return resources.files("morf.refimages").joinpath(name).read_text()


def reference_experiment_image(out_path: Path) -> Path:
    """The bundled baseline: threshold classifier on week-1 activity."""
    return build_image_archive(
        {"run.py": _refimage_source("reference_entrypoint.py")}, "run.py", out_path
    )


def network_violation_image(out_path: Path) -> Path:
    return build_image_archive(
        {"run.py": _refimage_source("violation_network.py")}, "run.py", out_path
    )


def readonly_violation_image(out_path: Path) -> Path:
    return build_image_archive(
        {"run.py": _refimage_source("violation_write.py")}, "run.py", out_path
    )


def sleeper_image(out_path: Path) -> Path:
    return build_image_archive({"run.py": _refimage_source("sleeper.py")}, "run.py", out_path)
