"""Sample aggregation, folded profiles and collective-event tracking."""

from __future__ import annotations

import hashlib
import statistics
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .buildid import BuildId
from .symbols import Resolver

NS_PER_S = 1_000_000_000
NS_PER_MS = 1_000_000
DEFAULT_DRAIN_S = 5.0
DEFAULT_MAX_SKEW_NS = 50 * NS_PER_MS
KERNEL_SUFFIX = "_[k]"
COLLECTIVE_KINDS = ("AllReduce", "ReduceScatter", "AllGather", "Broadcast", "P2P")

Frame = tuple[BuildId, int]


@dataclass(frozen=True)
class StackSample:
    timestamp: int
    rank: int
    thread: int
    frames: tuple[Frame, ...]
    kernel: tuple[bool, ...]

    def __post_init__(self) -> None:
        if not self.frames:
            raise ValueError("sample has no frames")
        if len(self.kernel) != len(self.frames):
            raise ValueError("kernel flags must match frames")

    def to_dict(self) -> dict:
        return {
            "timestamp": self.timestamp,
            "rank": self.rank,
            "thread": self.thread,
            "frames": [[b.hex, o] for b, o in self.frames],
            "space": ["kernel" if k else "user" for k in self.kernel],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StackSample":
        return cls(
            d["timestamp"], d["rank"], d["thread"],
            tuple((BuildId.from_hex(b), o) for b, o in d["frames"]),
            tuple(s == "kernel" for s in d["space"]),
        )


def stack_digest(frames: Sequence[Frame], kernel: Sequence[bool]) -> bytes:
    h = hashlib.blake2b(digest_size=8)
    for (b, o), k in zip(frames, kernel):
        h.update(b.raw)
        h.update(o.to_bytes(8, "little"))
        h.update(b"k" if k else b"u")
    return h.digest()


@dataclass
class StackRecord:
    frames: tuple[Frame, ...]
    kernel: tuple[bool, ...]
    count: int = 0


@dataclass
class ProfileWindow:
    """Per-rank stack counts for one drain interval ``[start, end)`` (ns)."""

    rank: int
    start: int
    end: int
    drain_interval: float = DEFAULT_DRAIN_S
    slots: dict[bytes, list[StackRecord]] = field(default_factory=dict)

    def add(self, frames: tuple[Frame, ...], kernel: tuple[bool, ...], count: int = 1,
            digest: bytes | None = None) -> None:
        if digest is None:
            digest = stack_digest(frames, kernel)
        bucket = self.slots.setdefault(digest, [])
        for rec in bucket:
            if (rec.frames is frames or rec.frames == frames) and rec.kernel == kernel:
                rec.count += count
                return
        bucket.append(StackRecord(frames, kernel, count))

    def records(self) -> list[StackRecord]:
        return [r for bucket in self.slots.values() for r in bucket]

    @property
    def total(self) -> int:
        return sum(r.count for r in self.records())

    @property
    def record_count(self) -> int:
        return sum(len(b) for b in self.slots.values())

    def to_dict(self) -> dict:
        return {
            "rank": self.rank,
            "start": self.start,
            "end": self.end,
            "stacks": [
                {"frames": [[b.hex, o] for b, o in r.frames],
                 "space": ["kernel" if k else "user" for k in r.kernel],
                 "count": r.count}
                for r in self.records()
            ],
        }


def aggregate_samples(samples: Iterable[StackSample],
                      drain_interval: float = DEFAULT_DRAIN_S) -> list[ProfileWindow]:
    """Hash-and-count samples per rank and drain interval.

    Windows are aligned to multiples of ``drain_interval`` on each rank's
    own clock. The result is sorted by ``(rank, start)``.
    """
    width = int(drain_interval * NS_PER_S)
    if width <= 0:
        raise ValueError("drain interval must be positive")
    windows: dict[tuple[int, int], ProfileWindow] = {}
    digests: dict[int, tuple[tuple, tuple, bytes]] = {}
    for s in samples:
        slot = s.timestamp // width
        w = windows.get((s.rank, slot))
        if w is None:
            w = windows[(s.rank, slot)] = ProfileWindow(s.rank, slot * width, (slot + 1) * width,
                                                        drain_interval)
        # Samples of one stack usually share frame tuples; skip rehashing them.
        hit = digests.get(id(s.frames))
        if hit is None or hit[0] is not s.frames or hit[1] != s.kernel:
            hit = digests[id(s.frames)] = (s.frames, s.kernel, stack_digest(s.frames, s.kernel))
        w.add(s.frames, s.kernel, digest=hit[2])
    return [windows[k] for k in sorted(windows)]


def reduction_factor(windows: Sequence[ProfileWindow]) -> float:
    records = sum(w.record_count for w in windows)
    return sum(w.total for w in windows) / records if records else 1.0


class FoldedProfile:
    """Stack counts keyed by root-first frame-name tuples."""

    def __init__(self, counts: Mapping[tuple[str, ...], int] | None = None) -> None:
        self.counts: dict[tuple[str, ...], int] = dict(counts or {})

    def add(self, stack: Sequence[str], count: int = 1) -> None:
        key = tuple(stack)
        self.counts[key] = self.counts.get(key, 0) + count

    def merge(self, other: "FoldedProfile") -> "FoldedProfile":
        for k, v in other.counts.items():
            self.add(k, v)
        return self

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def __bool__(self) -> bool:
        return bool(self.counts)

    def lines(self) -> list[str]:
        return [f"{';'.join(k)} {v}" for k, v in sorted(self.counts.items())]

    def to_text(self) -> str:
        return "".join(line + "\n" for line in self.lines())

    @classmethod
    def from_text(cls, text: str) -> "FoldedProfile":
        prof = cls()
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            stack, _, count = line.rpartition(" ")
            prof.add(stack.split(";"), int(count))
        return prof

    def inclusive_fractions(self) -> dict[str, float]:
        """Share of samples whose stack contains each function at least once."""
        total = self.total
        if not total:
            return {}
        acc: dict[str, int] = defaultdict(int)
        for stack, c in self.counts.items():
            for name in set(stack):
                acc[name] += c
        return {k: v / total for k, v in acc.items()}

    def self_fractions(self) -> dict[str, float]:
        total = self.total
        acc: dict[str, int] = defaultdict(int)
        for stack, c in self.counts.items():
            acc[stack[-1]] += c
        return {k: v / total for k, v in acc.items()} if total else {}

    def line_fractions(self) -> dict[tuple[str, ...], float]:
        total = self.total
        return {k: v / total for k, v in self.counts.items()} if total else {}


def frame_label(name: str, is_kernel: bool) -> str:
    return name + KERNEL_SUFFIX if is_kernel else name


def to_folded(windows: ProfileWindow | Iterable[ProfileWindow], resolver: Resolver) -> FoldedProfile:
    """Symbolize aggregated stacks into a folded profile (root-first frames).

    Kernel frames carry the ``_[k]`` suffix so user and kernel functions
    of the same name stay distinct.
    """
    if isinstance(windows, ProfileWindow):
        windows = [windows]
    prof = FoldedProfile()
    for w in windows:
        for rec in w.records():
            names = [frame_label(resolver.name(b, o), k) for (b, o), k in zip(rec.frames, rec.kernel)]
            prof.add(reversed(names), rec.count)
    return prof


@dataclass(frozen=True)
class CollectiveEvent:
    rank: int
    group: str
    kind: str
    host_entry: int
    host_exit: int
    gpu_duration: int

    def __post_init__(self) -> None:
        if self.host_entry >= self.host_exit:
            raise ValueError("collective entry must precede exit")

    def to_dict(self) -> dict:
        return {"rank": self.rank, "group": self.group, "kind": self.kind,
                "host_entry": self.host_entry, "host_exit": self.host_exit,
                "gpu_duration": self.gpu_duration}

    @classmethod
    def from_dict(cls, d: dict) -> "CollectiveEvent":
        return cls(d["rank"], d["group"], d["kind"], d["host_entry"], d["host_exit"],
                   d["gpu_duration"])


@dataclass
class CollectiveInstance:
    group: str
    kind: str
    events: dict[int, CollectiveEvent]
    complete: bool
    aligned_entry_lateness: dict[int, float] = field(default_factory=dict)

    @property
    def ranks(self) -> list[int]:
        return sorted(self.events)


def _coarse_offsets(streams: dict[int, list[CollectiveEvent]]) -> dict[int, int]:
    ref = min(streams)
    base = streams[ref][0].host_exit
    return {r: evs[0].host_exit - base for r, evs in streams.items()}


def match_collectives(events: Iterable[CollectiveEvent], ranks: Sequence[int] | None = None,
                      max_skew: int = DEFAULT_MAX_SKEW_NS) -> list[CollectiveInstance]:
    """Group per-rank events into collective instances by temporal overlap.

    Per ``(group, kind)``, each rank's stream is shifted by a coarse offset
    taken from its first event's exit. The sweep then repeatedly takes the
    head of every rank's queue, starts an instance at the earliest
    adjusted entry, and admits heads whose adjusted interval overlaps all
    members admitted so far (within ``max_skew``). Ranks whose head does
    not overlap keep it for the next instance, and the instance is marked
    incomplete.
    """
    by_key: dict[tuple[str, str], dict[int, list[CollectiveEvent]]] = defaultdict(lambda: defaultdict(list))
    for e in events:
        by_key[(e.group, e.kind)][e.rank].append(e)
    out: list[CollectiveInstance] = []
    for (group, kind), streams in sorted(by_key.items()):
        for evs in streams.values():
            evs.sort(key=lambda e: e.host_entry)
        members_expected = sorted(set(ranks) if ranks is not None else set(streams))
        offsets = _coarse_offsets(streams)
        heads = {r: 0 for r in streams}
        while True:
            live = [(streams[r][i].host_entry - offsets[r], r) for r, i in heads.items()
                    if i < len(streams[r])]
            if not live:
                break
            live.sort()
            chosen: dict[int, CollectiveEvent] = {}
            max_entry = None
            min_exit = None
            for adj_entry, r in live:
                e = streams[r][heads[r]]
                adj_exit = e.host_exit - offsets[r]
                if chosen and (adj_entry > min_exit + max_skew or max_entry > adj_exit + max_skew):
                    continue
                chosen[r] = e
                max_entry = adj_entry if max_entry is None else max(max_entry, adj_entry)
                min_exit = adj_exit if min_exit is None else min(min_exit, adj_exit)
            for r in chosen:
                heads[r] += 1
            complete = set(chosen) == set(members_expected)
            out.append(CollectiveInstance(group, kind, chosen, complete))
    out.sort(key=lambda inst: min(e.host_exit for e in inst.events.values()))
    return out


def align_clocks(instances: Sequence[CollectiveInstance]) -> tuple[dict[int, int], bool]:
    """Per-rank clock offsets from barrier exits; returns ``(offsets, confident)``.

    ``offset_r`` is the median over complete instances of
    ``exit_r - max(exit)``. With no complete instance every offset is 0
    and ``confident`` is False.
    """
    deltas: dict[int, list[int]] = defaultdict(list)
    for inst in instances:
        if not inst.complete:
            continue
        latest = max(e.host_exit for e in inst.events.values())
        for r, e in inst.events.items():
            deltas[r].append(e.host_exit - latest)
    if not deltas:
        ranks = {r for inst in instances for r in inst.events}
        return {r: 0 for r in ranks}, False
    return {r: int(statistics.median(v)) for r, v in deltas.items()}, True


def entry_lateness(instance: CollectiveInstance, offsets: Mapping[int, int]) -> dict[int, float]:
    """Aligned entry lateness per rank in milliseconds; the earliest rank is 0."""
    if not instance.complete:
        raise ValueError("lateness needs a complete instance")
    adjusted = {r: e.host_entry - offsets.get(r, 0) for r, e in instance.events.items()}
    first = min(adjusted.values())
    return {r: (a - first) / NS_PER_MS for r, a in adjusted.items()}
