"""Append-only run trace with checkpoint snapshots.

Events are JSONL-friendly dicts: an envelope (seq, ts, run id, phase, kind,
payload digest, budget remaining) around a JSON payload. The digest covers
only the payload, never the envelope, so wall-clock timestamps do not break
replay comparison. Checkpoints are full snapshots recorded as events and
kept addressable by id; when the trace is backed by a file they are also
written as separate snapshot files next to it.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

from .core import digest

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class TraceEvent:
    seq: int
    ts: float
    run_id: str
    phase: int
    kind: str
    digest: str
    payload: dict
    budget_remaining: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "seq": self.seq,
            "ts": self.ts,
            "run_id": self.run_id,
            "phase": self.phase,
            "kind": self.kind,
            "digest": self.digest,
            "budget_remaining": self.budget_remaining,
            "payload": self.payload,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TraceEvent":
        return cls(
            seq=d["seq"],
            ts=d["ts"],
            run_id=d["run_id"],
            phase=d["phase"],
            kind=d["kind"],
            digest=d["digest"],
            payload=d["payload"],
            budget_remaining=d.get("budget_remaining"),
        )


class RunTrace:
    """Ordered event log for one pipeline invocation (possibly multi-run)."""

    def __init__(self, path: Optional[str | Path] = None, clock: Callable[[], float] = time.time):
        self.path = Path(path) if path else None
        self._clock = clock
        self.events: list[TraceEvent] = []
        self.checkpoints: dict[str, dict] = {}
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    @property
    def header(self) -> Optional[dict]:
        for ev in self.events:
            if ev.kind == "run_start":
                return ev.payload
        return None

    def append(
        self,
        run_id: str,
        phase: int,
        kind: str,
        payload: dict,
        budget_remaining: Optional[int] = None,
    ) -> TraceEvent:
        event = TraceEvent(
            seq=len(self.events),
            ts=self._clock(),
            run_id=run_id,
            phase=phase,
            kind=kind,
            digest=digest(payload),
            payload=payload,
            budget_remaining=budget_remaining,
        )
        self.events.append(event)
        if self.path:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(event.to_dict(), ensure_ascii=False) + "\n")
        return event

    def checkpoint(self, checkpoint_id: str, snapshot: dict, run_id: str, phase: int) -> None:
        self.checkpoints[checkpoint_id] = snapshot
        self.append(run_id, phase, "checkpoint", {"checkpoint_id": checkpoint_id, "snapshot": snapshot})
        if self.path:
            ckpt_dir = self.path.parent / "checkpoints"
            ckpt_dir.mkdir(parents=True, exist_ok=True)
            tmp = ckpt_dir / f".{checkpoint_id}.tmp"
            tmp.write_text(json.dumps(snapshot, ensure_ascii=False, indent=1), encoding="utf-8")
            tmp.replace(ckpt_dir / f"{checkpoint_id}.json")

    def count(self, kind: str, run_id: Optional[str] = None) -> int:
        return sum(
            1
            for e in self.events
            if e.kind == kind and (run_id is None or e.run_id == run_id)
        )

    def of_kind(self, *kinds: str, run_id: Optional[str] = None) -> list[TraceEvent]:
        return [
            e
            for e in self.events
            if e.kind in kinds and (run_id is None or e.run_id == run_id)
        ]

    @classmethod
    def load(cls, path: str | Path) -> "RunTrace":
        trace = cls()
        with Path(path).open("r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                event = TraceEvent.from_dict(json.loads(line))
                trace.events.append(event)
                if event.kind == "checkpoint":
                    trace.checkpoints[event.payload["checkpoint_id"]] = event.payload["snapshot"]
        trace.path = None  # loaded traces are read-only views
        return trace


# Attachments carry run inputs (the backend script); they are not pipeline
# behavior, so replay comparison skips them.
ATTACHMENT_KINDS = frozenset({"script_attachment"})


def signature(trace: RunTrace) -> list[tuple[str, int, str, str]]:
    """The replay-comparable projection: (run, phase, kind, payload digest)."""
    return [
        (e.run_id, e.phase, e.kind, e.digest)
        for e in trace.events
        if e.kind not in ATTACHMENT_KINDS
    ]


def first_divergence(a: RunTrace, b: RunTrace) -> Optional[dict]:
    """None when traces replay identically, else a description of the first
    differing event."""
    sig_a, sig_b = signature(a), signature(b)
    for idx, (ea, eb) in enumerate(zip(sig_a, sig_b)):
        if ea != eb:
            return {
                "index": idx,
                "expected": {"run_id": ea[0], "phase": ea[1], "kind": ea[2], "digest": ea[3]},
                "actual": {"run_id": eb[0], "phase": eb[1], "kind": eb[2], "digest": eb[3]},
            }
    if len(sig_a) != len(sig_b):
        idx = min(len(sig_a), len(sig_b))
        return {
            "index": idx,
            "expected": None if idx >= len(sig_a) else {"kind": sig_a[idx][2]},
            "actual": None if idx >= len(sig_b) else {"kind": sig_b[idx][2]},
            "length": {"expected": len(sig_a), "actual": len(sig_b)},
        }
    return None
