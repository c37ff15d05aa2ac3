from __future__ import annotations

import hashlib
import os
import tempfile
from pathlib import Path
from typing import Protocol

from pydantic import TypeAdapter, ValidationError

from layercast.log import logger
from layercast.models import CellRecord, DivergenceReport, GenerationTrace, Manifest

MANIFEST_PATH = "manifest.json"
GOLDEN_PATH = "golden.jsonl"
REPORT_PATH = "report.json"

_REPORTS = TypeAdapter(dict[str, DivergenceReport])


class TraceStoreError(OSError):
    """A manifest, trace or report file is missing, unreadable or malformed."""


def trace_path(policy: str, run_config_id: str, *, sampled: bool = False) -> str:
    return f"{'samples' if sampled else 'traces'}/{policy}/{run_config_id}.jsonl"


class TraceStore(Protocol):
    def read_manifest(self) -> Manifest | None: ...
    def write_manifest(self, manifest: Manifest) -> None: ...
    def write_traces(self, path: str, traces: list[GenerationTrace]) -> CellRecord: ...
    def read_traces(self, path: str) -> list[GenerationTrace]: ...
    def is_recorded(self, record: CellRecord | None) -> bool: ...
    def write_reports(self, reports: dict[str, DivergenceReport]) -> None: ...
    def read_reports(self) -> dict[str, DivergenceReport]: ...


class _Blobs(Protocol):
    def get(self, path: str) -> bytes | None: ...
    def put(self, path: str, data: bytes) -> None: ...


def encode_traces(traces: list[GenerationTrace]) -> bytes:
    return "".join(f"{trace.model_dump_json()}\n" for trace in traces).encode()


def encode_reports(reports: dict[str, DivergenceReport]) -> bytes:
    return _REPORTS.dump_json(reports, indent=2)


def decode_traces(path: str, data: bytes) -> list[GenerationTrace]:
    try:
        text = data.decode()
    except UnicodeDecodeError as error:
        raise TraceStoreError(f"{path}: not UTF-8 text") from error
    traces = []
    for number, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            traces.append(GenerationTrace.model_validate_json(line))
        except ValidationError as error:
            raise TraceStoreError(f"{path}:{number}: malformed trace") from error
    return traces


class _TraceEngine:
    def __init__(self, blobs: _Blobs) -> None:
        self._blobs = blobs

    def _require(self, path: str) -> bytes:
        if (data := self._blobs.get(path)) is None:
            raise TraceStoreError(f"Missing {path}")
        return data

    def read_manifest(self) -> Manifest | None:
        if (data := self._blobs.get(MANIFEST_PATH)) is None:
            return None
        try:
            return Manifest.model_validate_json(data)
        except ValidationError as error:
            raise TraceStoreError(f"{MANIFEST_PATH}: malformed manifest") from error

    def write_manifest(self, manifest: Manifest) -> None:
        self._blobs.put(MANIFEST_PATH, manifest.model_dump_json(indent=2).encode())

    def write_traces(self, path: str, traces: list[GenerationTrace]) -> CellRecord:
        data = encode_traces(traces)
        self._blobs.put(path, data)
        logger.debug(f"Wrote {len(traces)} traces to {path}")
        return CellRecord(
            path=path, sha256=hashlib.sha256(data).hexdigest(), traces=len(traces)
        )

    def read_traces(self, path: str) -> list[GenerationTrace]:
        return decode_traces(path, self._require(path))

    def is_recorded(self, record: CellRecord | None) -> bool:
        if record is None or (data := self._blobs.get(record.path)) is None:
            return False
        return hashlib.sha256(data).hexdigest() == record.sha256

    def write_reports(self, reports: dict[str, DivergenceReport]) -> None:
        self._blobs.put(REPORT_PATH, encode_reports(reports))

    def read_reports(self) -> dict[str, DivergenceReport]:
        try:
            return _REPORTS.validate_json(self._require(REPORT_PATH))
        except ValidationError as error:
            raise TraceStoreError(f"{REPORT_PATH}: malformed report") from error


class _MemoryBlobs:
    def __init__(self) -> None:
        self.files: dict[str, bytes] = {}

    def get(self, path: str) -> bytes | None:
        return self.files.get(path)

    def put(self, path: str, data: bytes) -> None:
        self.files[path] = data


class _FileBlobs:
    def __init__(self, root: Path) -> None:
        self.root = root

    def get(self, path: str) -> bytes | None:
        try:
            return (self.root / path).read_bytes()
        except FileNotFoundError:
            return None
        except OSError as error:
            raise TraceStoreError(f"Cannot read {self.root / path}: {error}") from error

    def put(self, path: str, data: bytes) -> None:
        target = self.root / path
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            handle = tempfile.NamedTemporaryFile(
                dir=target.parent, prefix=f".{target.name}.", delete=False
            )
        except OSError as error:
            raise TraceStoreError(f"Cannot write {target}: {error}") from error
        try:
            with handle:
                handle.write(data)
            os.replace(handle.name, target)
        except OSError as error:
            Path(handle.name).unlink(missing_ok=True)
            raise TraceStoreError(f"Cannot write {target}: {error}") from error


class InMemoryTraceStore(_TraceEngine):
    def __init__(self) -> None:
        self._memory = _MemoryBlobs()
        super().__init__(self._memory)

    def delete(self, path: str) -> None:
        self._memory.files.pop(path, None)

    def paths(self) -> list[str]:
        return sorted(self._memory.files)


class DirectoryTraceStore(_TraceEngine):
    """Traces and manifest under ``root``; every file is replaced atomically."""

    def __init__(self, root: Path) -> None:
        self.root = root
        super().__init__(_FileBlobs(root))
