"""Per-command run manifest."""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

from .. import __version__
from ..tensorfile import atomic_write_bytes


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_tree(path: str | os.PathLike) -> str:
    """Content hash of a file, or of a directory's files (relative names included)."""
    p = Path(path)
    if p.is_file():
        return sha256_file(p)
    h = hashlib.sha256()
    for f in sorted(x for x in p.rglob("*") if x.is_file()):
        h.update(f.relative_to(p).as_posix().encode())
        h.update(bytes.fromhex(sha256_file(f)))
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    fingerprints: dict[str, str] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    _t0: float = field(default_factory=time.perf_counter, repr=False)

    def add_input(self, name: str, path: str | os.PathLike) -> None:
        self.inputs[name] = sha256_tree(path)

    def add_output(self, path: str | os.PathLike) -> None:
        self.outputs[str(path)] = sha256_tree(path)

    def time(self, phase: str, t0: float) -> None:
        self.timings[phase] = round(time.perf_counter() - t0, 6)

    def write(self, out_dir: str | os.PathLike) -> Path:
        self.timings["total"] = round(time.perf_counter() - self._t0, 6)
        doc = {
            "command": self.command, "version": __version__, "config": self.config,
            "inputs": self.inputs, "outputs": self.outputs, "fingerprints": self.fingerprints,
            "timings_s": self.timings, **self.extra,
        }
        path = Path(out_dir) / f"manifest_{self.command.replace('-', '_')}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        atomic_write_bytes(path, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode("utf-8"))
        return path
