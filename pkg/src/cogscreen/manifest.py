"""Run manifests and atomic artifact writes.

Every pipeline output gets a sibling <name>.manifest.json recording the
command, seeds, and sha256 hashes of inputs and outputs, so a run can be
verified and reproduced. Artifacts land via temp-file-plus-rename, so an
interrupted run never leaves a partial file at the final path.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import time
from pathlib import Path
from typing import Callable


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_with(path: str | Path, writer: Callable[[Path], None]) -> None:
    """Run a writer against a temp path, then rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        writer(Path(tmp))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class RunManifest:
    """Collects inputs/outputs during a command run and serializes next to
    the primary output artifact."""

    def __init__(self, command: str, argv: list[str], seeds: dict[str, int] | None = None):
        self.command = command
        self.argv = list(argv)
        self.seeds = dict(seeds or {})
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.configs: dict[str, str] = {}
        self.started_at = time.time()

    def add_input(self, path: str | Path) -> None:
        p = Path(path)
        if p.exists():
            self.inputs[str(p)] = sha256_file(p)

    def add_config(self, name: str, path: str | Path | None) -> None:
        if path is not None and Path(path).exists():
            self.configs[name] = sha256_file(path)

    def add_output(self, path: str | Path) -> None:
        self.outputs[str(Path(path))] = sha256_file(path)

    def write(self, primary_output: str | Path) -> Path:
        target = Path(str(primary_output) + ".manifest.json")
        obj = {
            "command": self.command,
            "argv": self.argv,
            "seeds": self.seeds,
            "configs": self.configs,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "started_at": self.started_at,
            "finished_at": time.time(),
        }
        atomic_write_text(target, json.dumps(obj, sort_keys=True, indent=2) + "\n")
        return target
