import asyncio
import json
from pathlib import Path
import time
from typing import Any

import aiofiles

from .bo import TrialRecord
from .log import logger
from .utils.core import ErrorCode, JournalError, TunerException

JOURNAL_FILE = "journal.jsonl"
MANIFEST_FILE = "manifest.json"
REPORT_FILE = "report.json"
BEST_THETA_FILE = "best_theta.json"
SAMPLES_FILE = "posterior_samples.json"


def read_journal(path: str | Path) -> tuple[dict[str, Any], list[TrialRecord]]:
    """Parse a campaign journal into (header, trials).

    A truncated last line (crash mid-append) is dropped with a warning; any other
    malformed line is an error.
    """
    path = Path(path)
    if not path.exists():
        raise JournalError("journal not found", str(path))
    text = path.read_text(encoding="utf-8")
    lines = text.splitlines()
    header: dict[str, Any] = {}
    records: list[TrialRecord] = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
            if not isinstance(entry, dict):
                raise ValueError("entry is not an object")
            kind = entry.pop("type", "trial")
            if kind == "header":
                header = entry
            elif kind == "trial":
                records.append(TrialRecord.model_validate(entry))
            else:
                raise ValueError(f"unknown entry type {kind!r}")
        except ValueError as e:
            # pydantic's ValidationError and JSONDecodeError are both ValueErrors
            if lineno == len(lines) and not text.endswith("\n"):
                logger.warning(f"dropping truncated last journal line {path}:{lineno}", command="journal")
                break
            raise JournalError(f"malformed entry: {e}", str(path), lineno) from e
    return header, records


class Store:
    """Artifacts of one run directory: journal, manifest, report, best theta."""

    def __init__(self, out_dir: str | Path):
        self.out_dir = Path(out_dir)
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise TunerException(
                f"cannot create output directory {self.out_dir}: {e}", code=ErrorCode.STORAGE_WRITE_ERROR, cause=e
            ) from e
        self.journal_path = self.out_dir / JOURNAL_FILE
        self.manifest_path = self.out_dir / MANIFEST_FILE
        self.report_path = self.out_dir / REPORT_FILE
        self.best_theta_path = self.out_dir / BEST_THETA_FILE
        self.samples_path = self.out_dir / SAMPLES_FILE
        self._lock = asyncio.Lock()
        logger.debug(f"store initialized at {self.out_dir}", command="store")

    def _load_json_data(self, path: Path) -> dict:
        """Load a JSON object; a corrupted file is moved aside and {} returned."""
        try:
            if path.exists():
                content = path.read_text(encoding="utf-8")
                if not content:
                    logger.warning(f"empty store file: {path}", command="store")
                    return {}
                data = json.loads(content)
                if isinstance(data, dict):
                    return data
                logger.error(f"top level of {path} is not an object", command="store")
                self._backup_corrupted_file(path)
            return {}
        except json.JSONDecodeError as e:
            logger.error(f"JSON decode error in {path}: {e}", command="store")
            self._backup_corrupted_file(path)
            return {}

    def _backup_corrupted_file(self, path: Path):
        try:
            corrupted_path = path.with_suffix(f".json.corrupted_{int(time.time())}")
            path.rename(corrupted_path)
            logger.warning(f"corrupted file moved to {corrupted_path}", command="store")
        except OSError as backup_e:
            logger.error(f"failed to back up corrupted file {path}: {backup_e}", command="store", e=backup_e)

    def _save_json_data(self, data: dict, path: Path) -> bool:
        """Atomic write through a temp file."""
        temp_path = path.with_suffix(".json.tmp")
        try:
            with temp_path.open("w", encoding="utf-8") as f:
                json.dump(data, f, ensure_ascii=False, indent=2)
            temp_path.replace(path)
            return True
        except (TypeError, ValueError) as e:
            logger.error(f"data for {path} is not JSON serializable: {e}", command="store", e=e)
        except OSError as e:
            logger.error(f"failed to write {path}: {e}", command="store", e=e)
        temp_path.unlink(missing_ok=True)
        return False

    def _save_or_raise(self, data: dict, path: Path) -> Path:
        if not self._save_json_data(data, path):
            raise TunerException(f"could not write {path}", code=ErrorCode.STORAGE_WRITE_ERROR)
        return path

    def write_manifest(self, manifest: dict) -> Path:
        return self._save_or_raise(manifest, self.manifest_path)

    def load_manifest(self) -> dict:
        return self._load_json_data(self.manifest_path)

    def write_report(self, report: dict) -> Path:
        return self._save_or_raise(report, self.report_path)

    def write_json(self, name: str, data: dict) -> Path:
        return self._save_or_raise(data, self.out_dir / name)

    def write_best_theta(self, theta, labels) -> Path:
        data = {"labels": list(labels), "theta": [float(v) for v in theta]}
        return self._save_or_raise(data, self.best_theta_path)

    async def _append_line(self, entry: dict) -> None:
        async with self._lock:
            try:
                async with aiofiles.open(self.journal_path, "a", encoding="utf-8") as f:
                    await f.write(json.dumps(entry, ensure_ascii=False) + "\n")
                    await f.flush()
            except OSError as e:
                raise TunerException(
                    f"journal append failed: {e}", code=ErrorCode.STORAGE_WRITE_ERROR, cause=e
                ) from e

    async def start_journal(self, header: dict) -> None:
        """Begin a fresh journal with its header line."""
        async with self._lock:
            self.journal_path.unlink(missing_ok=True)
        await self._append_line({"type": "header", **header})

    async def append_trial(self, record: TrialRecord) -> None:
        await self._append_line({"type": "trial", **record.model_dump(mode="json")})

    def load_journal(self) -> tuple[dict[str, Any], list[TrialRecord]]:
        return read_journal(self.journal_path)

    async def rewrite_journal(self, header: dict, records: list[TrialRecord]) -> None:
        """Rewrite without the dropped tail so appends continue on a clean line."""
        lines = [json.dumps({"type": "header", **header})]
        lines += [json.dumps({"type": "trial", **r.model_dump(mode="json")}) for r in records]
        temp_path = self.journal_path.with_suffix(".jsonl.tmp")
        async with self._lock:
            async with aiofiles.open(temp_path, "w", encoding="utf-8") as f:
                await f.write("\n".join(lines) + "\n")
            temp_path.replace(self.journal_path)
