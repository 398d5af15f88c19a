"""Append-only JSON-lines result store."""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Iterable

SCHEMA_VERSION = 1
VOLATILE_FIELDS = ("timestamp",)


class ResultStore:
    """One evaluation record per line. Only the owning process appends.

    A trailing partial line left by an interrupted write is dropped when the
    store is opened.
    """

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._repair()
        self._records = self._read()
        self._done = {r["cell"] for r in self._records}

    def _repair(self):
        if not self.path.exists():
            return
        raw = self.path.read_bytes()
        if raw and not raw.endswith(b"\n"):
            cut = raw.rfind(b"\n") + 1
            with open(self.path, "r+b") as fh:
                fh.truncate(cut)

    def _read(self) -> list[dict]:
        if not self.path.exists():
            return []
        with open(self.path) as fh:
            return [json.loads(line) for line in fh if line.strip()]

    def __len__(self):
        return len(self._records)

    def __contains__(self, cell_id: str) -> bool:
        return cell_id in self._done

    def records(self) -> list[dict]:
        return list(self._records)

    def append(self, records: Iterable[dict]) -> int:
        records = [r for r in records if r["cell"] not in self._done]
        if not records:
            return 0
        with open(self.path, "a") as fh:
            for r in records:
                fh.write(json.dumps({"schema": SCHEMA_VERSION, **r}, sort_keys=True) + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        for r in records:
            self._records.append({"schema": SCHEMA_VERSION, **r})
            self._done.add(r["cell"])
        return len(records)


def stable_view(records: Iterable[dict]) -> list[dict]:
    """Records without volatile fields, sorted by cell id, for comparisons."""
    return sorted(({k: v for k, v in r.items() if k not in VOLATILE_FIELDS} for r in records),
                  key=lambda r: r["cell"])
