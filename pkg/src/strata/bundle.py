"""Trace bundle container and its on-disk layout.

A bundle directory holds::

    meta.json            scenario parameters and run metadata
    stacks.jsonl         interned stacks: frames and user/kernel space
    samples.jsonl        one sample per line (time, rank, thread, stack id)
    gpu_events.jsonl     compute kernel executions
    collectives.jsonl    host-side collective entry/exit events
    os_counters.jsonl    cumulative OS counters per rank per drain interval
    binaries/*.json      virtual binaries (code layout and CFI)
    symbols/*.symr       symbol files keyed by build id
    labels.json          ground truth for the injected fault
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .buildid import BuildId
from .collector import CollectiveEvent, StackSample
from .symbols import SymbolFile
from .vproc import VirtualBinary

REQUIRED_FILES = ("meta.json", "stacks.jsonl", "samples.jsonl", "gpu_events.jsonl", "collectives.jsonl",
                  "os_counters.jsonl", "labels.json")


class BundleError(ValueError):
    """Missing or malformed bundle content."""


@dataclass(frozen=True)
class GpuEvent:
    rank: int
    name: str
    start: int
    end: int

    @property
    def duration(self) -> int:
        return self.end - self.start

    def to_dict(self) -> dict:
        return {"rank": self.rank, "name": self.name, "start": self.start, "end": self.end}

    @classmethod
    def from_dict(cls, d: dict) -> "GpuEvent":
        return cls(d["rank"], d["name"], d["start"], d["end"])


@dataclass(frozen=True)
class OsCounterRecord:
    """Cumulative counters at ``timestamp``; scheduler delay covers the preceding interval."""

    rank: int
    timestamp: int
    interrupts: dict[str, int]
    softirqs: dict[str, int]
    sched_delay_p50: int
    sched_delay_p99: int
    numa_migrations: int

    def to_dict(self) -> dict:
        return {"rank": self.rank, "timestamp": self.timestamp,
                "interrupts": self.interrupts, "softirqs": self.softirqs,
                "sched_delay_p50": self.sched_delay_p50,
                "sched_delay_p99": self.sched_delay_p99,
                "numa_migrations": self.numa_migrations}

    @classmethod
    def from_dict(cls, d: dict) -> "OsCounterRecord":
        return cls(d["rank"], d["timestamp"], dict(d["interrupts"]), dict(d["softirqs"]),
                   d["sched_delay_p50"], d["sched_delay_p99"], d["numa_migrations"])


@dataclass
class TraceBundle:
    meta: dict
    samples: list[StackSample]
    gpu_events: list[GpuEvent]
    collectives: list[CollectiveEvent]
    os_counters: list[OsCounterRecord]
    binaries: list[VirtualBinary]
    symbols: dict[BuildId, bytes]
    labels: dict
    _symbol_files: dict[BuildId, SymbolFile] = field(default_factory=dict, repr=False)

    @property
    def ranks(self) -> list[int]:
        return list(range(self.meta["ranks"]))

    def symbol_source(self) -> dict[BuildId, SymbolFile]:
        if not self._symbol_files:
            self._symbol_files = {b: SymbolFile(d) for b, d in self.symbols.items()}
        return self._symbol_files

    def files(self) -> dict[str, bytes]:
        """Every bundle file as ``relative path -> bytes``."""
        out = {
            "meta.json": _json(self.meta),
            **self._sample_files(),
            "gpu_events.jsonl": _jsonl(e.to_dict() for e in self.gpu_events),
            "collectives.jsonl": _jsonl(e.to_dict() for e in self.collectives),
            "os_counters.jsonl": _jsonl(r.to_dict() for r in self.os_counters),
            "labels.json": _json(self.labels),
        }
        for b in self.binaries:
            out[f"binaries/{b.name}.json"] = _json(b.to_dict())
        for bid, data in self.symbols.items():
            out[f"symbols/{bid.hex}.symr"] = data
        return out

    def _sample_files(self) -> dict[str, bytes]:
        ids: dict[int, tuple[tuple, int]] = {}
        stacks, rows = [], []
        for s in self.samples:
            hit = ids.get(id(s.frames))
            if hit is None or hit[0] is not s.frames:
                d = s.to_dict()
                key = (tuple(map(tuple, d["frames"])), tuple(d["space"]))
                # Interned by object identity; the simulator shares one tuple per stack.
                stacks.append(key)
                hit = ids[id(s.frames)] = (s.frames, len(stacks) - 1)
            rows.append({"timestamp": s.timestamp, "rank": s.rank, "thread": s.thread, "stack": hit[1]})
        return {
            "stacks.jsonl": _jsonl({"id": i, "frames": [list(f) for f in fr], "space": list(sp)}
                                   for i, (fr, sp) in enumerate(stacks)),
            "samples.jsonl": _jsonl(rows),
        }

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, data in sorted(self.files().items()):
            h.update(name.encode())
            h.update(len(data).to_bytes(8, "little"))
            h.update(data)
        return h.hexdigest()

    def save(self, directory: str | os.PathLike) -> str:
        root = Path(directory)
        for name, data in self.files().items():
            path = root / name
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(data)
        return self.digest()


def _json(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=1) + "\n").encode()


def _jsonl(rows) -> bytes:
    return "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n" for r in rows).encode()


def _read_jsonl(path: Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise BundleError(f"{path}:{lineno}: {exc.msg}") from exc
    return rows


def load_bundle(directory: str | os.PathLike) -> TraceBundle:
    root = Path(directory)
    if not root.is_dir():
        raise BundleError(f"{root}: bundle directory not found")
    for name in REQUIRED_FILES:
        if not (root / name).is_file():
            raise BundleError(f"{root / name}: missing bundle file")
    try:
        meta = json.loads((root / "meta.json").read_text())
        labels = json.loads((root / "labels.json").read_text())
        stacks = {}
        for d in _read_jsonl(root / "stacks.jsonl"):
            proto = StackSample.from_dict({"timestamp": 0, "rank": 0, "thread": 0, **d})
            stacks[d["id"]] = (proto.frames, proto.kernel)
        samples = []
        for d in _read_jsonl(root / "samples.jsonl"):
            frames, kernel = stacks[d["stack"]]
            samples.append(StackSample(d["timestamp"], d["rank"], d["thread"], frames, kernel))
        gpu = [GpuEvent.from_dict(d) for d in _read_jsonl(root / "gpu_events.jsonl")]
        coll = [CollectiveEvent.from_dict(d) for d in _read_jsonl(root / "collectives.jsonl")]
        osc = [OsCounterRecord.from_dict(d) for d in _read_jsonl(root / "os_counters.jsonl")]
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, BundleError):
            raise
        raise BundleError(f"{root}: malformed bundle ({exc})") from exc
    binaries = [VirtualBinary.from_dict(json.loads(p.read_text()))
                for p in sorted((root / "binaries").glob("*.json"))]
    symbols = {}
    for p in sorted((root / "symbols").glob("*.symr")):
        data = p.read_bytes()
        symbols[SymbolFile(data).build_id] = data
    for key in ("ranks", "iterations", "sample_rate"):
        if key not in meta:
            raise BundleError(f"{root / 'meta.json'}: missing key {key!r}")
    return TraceBundle(meta, samples, gpu, coll, osc, binaries, symbols, labels)
