"""Append-only run ledger.

Each run directory keeps a JSON-lines file recording what was done to it:
configs resolved, artifacts written, metrics produced. Entries are hashed
and chained so any later edit to the history is detectable, and they carry
no timestamps, keeping reruns of a fixed pipeline byte-identical.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path


class LedgerError(RuntimeError):
    pass


def file_digest(path: str | Path) -> str:
    """Full sha256 hex digest of a file's bytes."""
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _entry_hash(kind: str, payload: dict, prev: str) -> str:
    body = json.dumps({"kind": kind, "payload": payload, "prev": prev},
                      sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(body.encode()).hexdigest()[:16]


class RunLedger:
    """Hash-chained event log for one run directory."""

    GENESIS = "0" * 16

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def entries(self) -> list[dict]:
        if not self.path.exists():
            return []
        out = []
        for i, line in enumerate(self.path.read_text().splitlines(), start=1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise LedgerError(f"{self.path}:{i} is not valid JSON") from exc
        return out

    def append(self, kind: str, payload: dict) -> dict:
        """Record one event; payload must be JSON-serializable."""
        existing = self.entries()
        prev = existing[-1]["hash"] if existing else self.GENESIS
        entry = {
            "kind": kind,
            "payload": payload,
            "prev": prev,
            "hash": _entry_hash(kind, payload, prev),
        }
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
        return entry

    def verify(self) -> bool:
        """True when every hash and chain link checks out."""
        prev = self.GENESIS
        for entry in self.entries():
            if entry.get("prev") != prev:
                return False
            want = _entry_hash(entry["kind"], entry["payload"], prev)
            if entry.get("hash") != want:
                return False
            prev = entry["hash"]
        return True

    def record_artifact(self, kind: str, path: str | Path, **extra) -> dict:
        """Record a file with its content hash, path relative to the run dir."""
        path = Path(path)
        try:
            rel = path.relative_to(self.path.parent)
        except ValueError:
            rel = path
        payload = {"path": str(rel), "sha256": file_digest(path), **extra}
        return self.append(kind, payload)

    def artifact_mismatches(self) -> list[str]:
        """Recorded files that are now missing or whose bytes changed.

        Later re-recordings of the same path supersede earlier ones, so a
        legitimately rewritten artifact only needs its newest entry to match.
        """
        newest: dict[str, str] = {}
        for entry in self.entries():
            payload = entry.get("payload", {})
            if "sha256" in payload and "path" in payload:
                newest[payload["path"]] = payload["sha256"]
        bad = []
        for rel, want in sorted(newest.items()):
            candidate = self.path.parent / rel
            if not candidate.exists():
                bad.append(f"{rel}: missing")
            elif file_digest(candidate) != want:
                bad.append(f"{rel}: content changed")
        return bad


__all__ = ["LedgerError", "RunLedger", "file_digest"]
