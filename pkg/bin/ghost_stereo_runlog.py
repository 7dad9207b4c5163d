"""Run directory bookkeeping: text log, JSON-lines metrics, manifest."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional

MANIFEST_NAME = "manifest.json"
TRAIN_LOG_NAME = "train.log"
METRICS_LOG_NAME = "metrics.jsonl"


def now_ts() -> str:
    return time.strftime("%Y-%m-%d %H:%M:%S", time.localtime())


def append_log(log_file: Path, msg: str) -> None:
    try:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        with log_file.open("a", encoding="utf-8") as f:
            f.write(f"[{now_ts()}] {msg}\n")
    except OSError:
        pass  # disk full / read-only: keep training


def append_jsonl(path: Path, record: dict[str, Any]) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")
    except OSError:
        pass


def read_jsonl(path: Path) -> list[dict[str, Any]]:
    records = []
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError:
        return records
    for line in lines:
        line = line.strip()
        if not line:
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError:
            continue  # partial line from an interrupted run
    return records


def write_json(path: Path, payload: dict[str, Any]) -> None:
    """Atomic JSON write (temp file + rename)."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=str(path.parent), suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
        os.replace(tmp, path)
    except OSError:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def config_hash(config: dict[str, Any]) -> str:
    """Git blob hash of the canonical JSON form of ``config``."""
    body = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    header = f"blob {len(body)}\0".encode("ascii")
    return hashlib.sha1(header + body).hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict[str, Any]
    config_hash: str = ""
    started_at: str = field(default_factory=now_ts)
    finished_at: Optional[str] = None
    metrics: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.config_hash:
            self.config_hash = config_hash(self.config)

    def finish(self, metrics: Optional[dict[str, Any]] = None) -> None:
        self.finished_at = now_ts()
        if metrics:
            self.metrics.update(metrics)

    def write(self, run_dir: Path) -> Path:
        path = Path(run_dir) / MANIFEST_NAME
        write_json(path, asdict(self))
        return path

    @classmethod
    def read(cls, run_dir: Path) -> "RunManifest":
        data = json.loads((Path(run_dir) / MANIFEST_NAME).read_text(encoding="utf-8"))
        return cls(**data)
