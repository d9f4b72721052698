"""Build-ID keyed symbol files and repository.

On-disk layout of a ``.symr`` file (all integers little-endian)::

    header   magic "SYMR" | version u32 | build id (20 bytes)
             | entry count u32 | string table offset u64        (40 bytes)
    entries  n x (start u64 | size u32 | name offset u32)       (16 bytes each)
    strings  n x (length u16 | utf-8 bytes)

Entries are sorted by start. Lookups binary-search the entry array in
place, so a file opened through :func:`open_symbol_file` is never fully
loaded.
"""

from __future__ import annotations

import hashlib
import io
import math
import mmap
import os
import struct
import tempfile
from collections import Counter
from pathlib import Path
from typing import BinaryIO, Callable, Iterable, Iterator, Mapping, NamedTuple, Sequence

from .buildid import BuildId

MAGIC = b"SYMR"
VERSION = 1
HEADER = struct.Struct("<4sI20sIQ")
ENTRY = struct.Struct("<QII")
NAME_LEN = struct.Struct("<H")
SEGMENT_SIZE = 64 * 1024 * 1024

EXACT = "exact-range"
NEAREST = "nearest-lower"
LOOKUP_MODES = (EXACT, NEAREST)


class SymbolFormatError(ValueError):
    """The buffer is not a valid symbol file."""


class IngestError(RuntimeError):
    pass


class SymbolEntry(NamedTuple):
    start: int
    size: int
    name: str


def pack_symbols(build_id: BuildId, entries: Iterable[tuple[int, int, str]]) -> bytes:
    """Serialize ``entries`` into the ``.symr`` format."""
    ordered = sorted((SymbolEntry(*e) for e in entries), key=lambda e: e.start)
    for a, b in zip(ordered, ordered[1:]):
        if a.start == b.start:
            raise ValueError(f"duplicate symbol start {a.start:#x}")
    strings = bytearray()
    table = bytearray()
    for e in ordered:
        if not e.name:
            raise ValueError(f"empty symbol name at {e.start:#x}")
        if not 0 <= e.start < 1 << 64 or not 0 <= e.size < 1 << 32:
            raise ValueError(f"symbol {e.name!r} out of range")
        raw = e.name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"symbol name too long: {e.name[:40]!r}...")
        if len(strings) > 0xFFFF_FFFF:
            raise ValueError("string table exceeds u32 offsets")
        table += ENTRY.pack(e.start, e.size, len(strings))
        strings += NAME_LEN.pack(len(raw)) + raw
    n = len(ordered)
    header = HEADER.pack(MAGIC, VERSION, build_id.raw, n, HEADER.size + ENTRY.size * n)
    return bytes(header + table + strings)


class SymbolFile:
    """Read-only view over a packed symbol file.

    ``probes`` accumulates the number of entry comparisons made by
    lookups, for checking the logarithmic bound.
    """

    def __init__(self, buf) -> None:
        self._buf = memoryview(buf)
        if len(self._buf) < HEADER.size:
            raise SymbolFormatError("truncated header")
        magic, version, raw_id, n, strtab = HEADER.unpack_from(self._buf, 0)
        if magic != MAGIC:
            raise SymbolFormatError(f"bad magic {magic!r}")
        if version != VERSION:
            raise SymbolFormatError(f"unsupported version {version}")
        if strtab != HEADER.size + ENTRY.size * n or strtab > len(self._buf):
            raise SymbolFormatError("entry array does not match string table offset")
        self.build_id = BuildId(raw_id)
        self.count = n
        self._strtab = strtab
        self._strlen = len(self._buf) - strtab
        self.probes = 0

    @property
    def probe_bound(self) -> int:
        return math.ceil(math.log2(self.count)) + 1 if self.count else 0

    def _entry(self, i: int) -> tuple[int, int, int]:
        return ENTRY.unpack_from(self._buf, HEADER.size + ENTRY.size * i)

    def _start(self, i: int) -> int:
        return struct.unpack_from("<Q", self._buf, HEADER.size + ENTRY.size * i)[0]

    def _name(self, name_offset: int) -> str:
        if name_offset + NAME_LEN.size > self._strlen:
            raise SymbolFormatError(f"name offset {name_offset} outside string table")
        pos = self._strtab + name_offset
        (length,) = NAME_LEN.unpack_from(self._buf, pos)
        if name_offset + NAME_LEN.size + length > self._strlen:
            raise SymbolFormatError(f"name at {name_offset} overruns string table")
        try:
            return bytes(self._buf[pos + NAME_LEN.size : pos + NAME_LEN.size + length]).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise SymbolFormatError(f"name at {name_offset} is not utf-8") from exc

    def entry(self, i: int) -> SymbolEntry:
        start, size, name_offset = self._entry(i)
        return SymbolEntry(start, size, self._name(name_offset))

    def entries(self) -> Iterator[SymbolEntry]:
        prev = None
        for i in range(self.count):
            e = self.entry(i)
            if prev is not None and e.start <= prev:
                raise SymbolFormatError("entries not sorted by start")
            prev = e.start
            yield e

    def validate(self) -> None:
        for _ in self.entries():
            pass

    def _floor(self, offset: int) -> int:
        lo, hi = 0, self.count
        probes = 0
        while lo < hi:
            mid = (lo + hi) >> 1
            probes += 1
            if self._start(mid) <= offset:
                lo = mid + 1
            else:
                hi = mid
        self.probes += probes
        return lo - 1

    def lookup(self, offset: int, mode: str = EXACT) -> str | None:
        """Name covering ``offset``, or ``None`` when unknown.

        ``nearest-lower`` returns the greatest entry at or below ``offset``
        regardless of its size. ``exact-range`` additionally requires the
        offset to fall inside the entry; size-0 entries match only their
        own start.
        """
        if mode not in LOOKUP_MODES:
            raise ValueError(f"unknown lookup mode {mode!r}")
        i = self._floor(offset)
        if i < 0:
            return None
        start, size, name_offset = self._entry(i)
        if mode == EXACT:
            if size == 0 and offset != start:
                return None
            if size and offset >= start + size:
                return None
        return self._name(name_offset)

    def close(self) -> None:
        self._buf.release()


def parse_symbols(data: bytes) -> tuple[BuildId, list[SymbolEntry]]:
    f = SymbolFile(data)
    return f.build_id, list(f.entries())


def open_symbol_file(path: str | os.PathLike) -> SymbolFile:
    with open(path, "rb") as fh:
        size = os.fstat(fh.fileno()).st_size
        if size == 0:
            raise SymbolFormatError(f"{path}: empty file")
        mm = mmap.mmap(fh.fileno(), 0, access=mmap.ACCESS_READ)
    return SymbolFile(mm)


def segment_digests(data: bytes, segment_size: int = SEGMENT_SIZE) -> list[str]:
    return [hashlib.sha256(data[i : i + segment_size]).hexdigest()
            for i in range(0, max(len(data), 1), segment_size)]


class Repository:
    """Symbol files on local disk at ``<root>/symbols/<2 hex>/<build id>.symr``."""

    def __init__(self, root: str | os.PathLike) -> None:
        self.root = Path(root)
        self._open: dict[BuildId, SymbolFile] = {}

    def path_for(self, build_id: BuildId) -> Path:
        return self.root / "symbols" / build_id.hex[:2] / f"{build_id.hex}.symr"

    def __contains__(self, build_id: BuildId) -> bool:
        return self.path_for(build_id).is_file()

    def get(self, build_id: BuildId) -> SymbolFile | None:
        f = self._open.get(build_id)
        if f is not None:
            return f
        path = self.path_for(build_id)
        if not path.is_file():
            return None
        f = self._open[build_id] = open_symbol_file(path)
        return f

    def build_ids(self) -> list[BuildId]:
        base = self.root / "symbols"
        if not base.is_dir():
            return []
        return sorted(BuildId.from_hex(p.stem) for p in base.glob("*/*.symr"))


def ingest_symbols(
    repo: Repository,
    build_id: BuildId,
    payload: bytes | BinaryIO,
    segment_size: int = SEGMENT_SIZE,
    digests: Sequence[str] | None = None,
    on_segment: Callable[[int], None] | None = None,
) -> str:
    """Store a symbol file under ``build_id``; returns ``"stored"`` or ``"already-present"``.

    The payload is consumed ``segment_size`` bytes at a time. When
    ``digests`` is given every segment's SHA-256 must match. Data lands in
    a temporary file next to the target and becomes visible through a
    single rename, so readers see either nothing or the whole file.
    ``on_segment`` is called after each segment is written.
    """
    target = repo.path_for(build_id)
    if target.is_file():
        return "already-present"
    stream = io.BytesIO(payload) if isinstance(payload, (bytes, bytearray)) else payload
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{build_id.hex}.", suffix=".partial", dir=target.parent)
    try:
        with os.fdopen(fd, "wb") as out:
            index = 0
            while True:
                chunk = stream.read(segment_size)
                if not chunk:
                    break
                if digests is not None:
                    if index >= len(digests) or hashlib.sha256(chunk).hexdigest() != digests[index]:
                        raise IngestError(f"digest mismatch in segment {index}")
                out.write(chunk)
                if on_segment is not None:
                    on_segment(index)
                index += 1
            if digests is not None and index != len(digests) and not (index == 0 and len(digests) == 1):
                raise IngestError(f"expected {len(digests)} segments, got {index}")
            out.flush()
            os.fsync(out.fileno())
        check = open_symbol_file(tmp)
        try:
            if check.build_id != build_id:
                raise IngestError(
                    f"header build id {check.build_id.hex} does not match key {build_id.hex}"
                )
            check.validate()
        finally:
            check.close()
        if target.exists():
            os.unlink(tmp)
            return "already-present"
        os.replace(tmp, target)
        return "stored"
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_symbol_dir(path: str | os.PathLike) -> dict[BuildId, SymbolFile]:
    """Open every ``*.symr`` file in a flat directory, keyed by header build id."""
    out = {}
    for p in sorted(Path(path).glob("*.symr")):
        f = open_symbol_file(p)
        out[f.build_id] = f
    return out


def unknown_frame(build_id: BuildId, offset: int) -> str:
    return f"[{build_id.hex}+{offset:#x}]"


class Resolver:
    """Memoizing frame symbolizer over any ``build_id -> SymbolFile`` source."""

    def __init__(self, source: Mapping[BuildId, SymbolFile] | Repository, mode: str = EXACT):
        if mode not in LOOKUP_MODES:
            raise ValueError(f"unknown lookup mode {mode!r}")
        self.source = source
        self.mode = mode
        self._cache: dict[tuple[BuildId, int], str] = {}

    def name(self, build_id: BuildId, offset: int) -> str:
        key = (build_id, offset)
        hit = self._cache.get(key)
        if hit is None:
            f = self.source.get(build_id)
            found = None if f is None else f.lookup(offset, self.mode)
            hit = self._cache[key] = found if found is not None else unknown_frame(build_id, offset)
        return hit

    def stack(self, frames: Iterable[tuple[BuildId, int]]) -> list[str]:
        return [self.name(b, o) for b, o in frames]


def resolve_stacks(stacks: Iterable[Sequence[tuple[BuildId, int]]],
                   source: Mapping[BuildId, SymbolFile] | Repository,
                   mode: str = EXACT) -> list[list[str]]:
    """Symbolize each stack frame-by-frame; unknown frames render as ``[id+0xOFF]``."""
    r = Resolver(source, mode)
    return [r.stack(s) for s in stacks]


def name_concentration(symbolized: Sequence[Sequence[str]]) -> tuple[str | None, float, int]:
    """Leaf attribution summary for leaf-first stacks.

    Returns the name most samples are attributed to, the fraction of
    samples it absorbs, and the number of distinct leaf names.
    """
    leaves = Counter(stack[0] for stack in symbolized if stack)
    if not leaves:
        return None, 0.0, 0
    name, hits = max(leaves.items(), key=lambda kv: (kv[1], kv[0]))
    return name, hits / sum(leaves.values()), len(leaves)
