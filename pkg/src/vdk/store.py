"""Artifact persistence: atomic writes, checkpoint container, run lock.

Checkpoints are a single file: a magic line, one line of plain-text JSON
header (kind, arch, sizes, accuracy, seed, config hash), then a torch
payload. The header can be read without deserializing the payload. All
writes go through a temp file in the target directory followed by an
atomic rename, so an interrupted stage never leaves a partial artifact.
"""

from __future__ import annotations

import io
import json
import os
import tempfile
from pathlib import Path

import torch

from vdk.errors import DependencyError

MAGIC = b"VDKCKPT1\n"
FORMAT_VERSION = 1


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def save_checkpoint(path: str | Path, header: dict, payload: dict) -> None:
    header = dict(header)
    header["format_version"] = FORMAT_VERSION
    buf = io.BytesIO()
    torch.save(payload, buf)
    atomic_write_bytes(path, MAGIC + json.dumps(header).encode() + b"\n" + buf.getvalue())


def read_header(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise DependencyError(f"missing checkpoint {path}")
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise DependencyError(f"{path} is not a checkpoint file")
        return json.loads(fh.readline())


def load_checkpoint(path: str | Path) -> tuple[dict, dict]:
    path = Path(path)
    if not path.exists():
        raise DependencyError(f"missing checkpoint {path}")
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise DependencyError(f"{path} is not a checkpoint file")
        header = json.loads(fh.readline())
        payload = torch.load(io.BytesIO(fh.read()), map_location="cpu",
                             weights_only=True)
    return header, payload


class RunLock:
    """One pipeline run per output directory, via an O_EXCL lock file."""

    def __init__(self, out_dir: str | Path):
        self.path = Path(out_dir) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise DependencyError(
                f"output directory is locked by another run ({self.path}); "
                "remove the lock file if that run is dead"
            ) from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass
        return False
