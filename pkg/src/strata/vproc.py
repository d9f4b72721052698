"""Virtual binaries and materialized thread stacks.

A :class:`VirtualBinary` stands in for an ELF image: a list of functions,
each with a frame-pointer convention and CFI rules. A
:class:`VirtualProcess` maps binaries at page-aligned bases, and
:func:`synthesize_stack_image` writes the byte-level stack memory that a
given call chain would leave behind, so that FP unwinding genuinely fails
where a function omits the frame pointer.

Frame layout (x86-64 style, stack grows down)::

    CFA  = caller's SP at the call
    [CFA - 8]   return address
    [CFA - 16]  saved incoming FP (push rbp for FP-preserving functions,
                callee-saved spill for FP-omitting ones)
    SP   = CFA - frame_size
"""

from __future__ import annotations

import bisect
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .buildid import BuildId

PAGE_SIZE = 4096
WORD = 8
DEFAULT_STACK_SIZE = 1 << 20
STACK_TOP = 0x7FFC_0000_0000
DEFAULT_LOAD_BASE = 0x5555_0000_0000
# Below SP, left materialized so reads just under the leaf frame do not fault.
RED_ZONE = 128
# Clobbered FP values are drawn from this window, which holds no mapping.
GARBAGE_BASE = 0x1000_0000_0000
GARBAGE_SPAN = 1 << 32

PRESERVES = "preserves"
OMITS = "omits"
CLOBBER_MODES = ("garbage-fp", "stale-fp")


class BinaryError(ValueError):
    """Raised for an invalid binary description."""


class StackImageError(ValueError):
    """Raised when a chain cannot be materialized as a stack image."""


@dataclass(frozen=True)
class CfiRule:
    """CFA rule for ``[pc_start, pc_end)``.

    Simple rules compute ``CFA = reg + cfa_offset``. Indirect rules load a
    word first: ``CFA = mem[reg + load_offset] + add_offset``.
    """

    pc_start: int
    pc_end: int
    base: str = "sp"
    cfa_offset: int = 16
    ra_slot_offset: int = -8
    fp_slot_offset: int | None = -16
    indirect: bool = False
    load_offset: int = 0
    add_offset: int = 0

    def __post_init__(self) -> None:
        if self.pc_start >= self.pc_end:
            raise BinaryError(f"empty CFI range [{self.pc_start:#x}, {self.pc_end:#x})")
        if self.base not in ("sp", "fp"):
            raise BinaryError(f"unknown CFA base register {self.base!r}")

    @property
    def kind(self) -> str:
        return "indirect" if self.indirect else "simple"

    def to_dict(self) -> dict:
        return {
            "pc_start": self.pc_start,
            "pc_end": self.pc_end,
            "kind": self.kind,
            "base": self.base,
            "cfa_offset": self.cfa_offset,
            "load_offset": self.load_offset,
            "add_offset": self.add_offset,
            "ra_slot_offset": self.ra_slot_offset,
            "fp_slot_offset": self.fp_slot_offset,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CfiRule":
        return cls(
            pc_start=d["pc_start"],
            pc_end=d["pc_end"],
            base=d.get("base", "sp"),
            cfa_offset=d.get("cfa_offset", 16),
            ra_slot_offset=d.get("ra_slot_offset", -8),
            fp_slot_offset=d.get("fp_slot_offset", -16),
            indirect=d.get("kind", "simple") == "indirect",
            load_offset=d.get("load_offset", 0),
            add_offset=d.get("add_offset", 0),
        )


@dataclass(frozen=True)
class FunctionDef:
    name: str
    offset: int
    length: int
    fp_convention: str
    frame_size: int
    cfi: tuple[CfiRule, ...]

    @property
    def end(self) -> int:
        return self.offset + self.length

    @property
    def omits_fp(self) -> bool:
        return self.fp_convention == OMITS

    def rule_for(self, offset: int) -> CfiRule | None:
        for rule in self.cfi:
            if rule.pc_start <= offset < rule.pc_end:
                return rule
        return None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "offset": self.offset,
            "length": self.length,
            "fp_convention": self.fp_convention,
            "frame_size": self.frame_size,
            "cfi": [r.to_dict() for r in self.cfi],
        }


@dataclass(frozen=True)
class VirtualBinary:
    name: str
    build_id: BuildId
    code_size: int
    functions: tuple[FunctionDef, ...]
    full_symbols: tuple[tuple[int, int, str], ...]
    sparse_symbols: tuple[tuple[int, int, str], ...] | None = None
    _starts: tuple[int, ...] = field(default=(), repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "_starts", tuple(f.offset for f in self.functions))

    def function_at(self, offset: int) -> FunctionDef | None:
        i = bisect.bisect_right(self._starts, offset) - 1
        if i < 0:
            return None
        fn = self.functions[i]
        return fn if offset < fn.end else None

    def function_named(self, name: str) -> FunctionDef:
        for fn in self.functions:
            if fn.name == name:
                return fn
        raise KeyError(name)

    @property
    def omits_fraction(self) -> float:
        if not self.functions:
            return 0.0
        return sum(f.omits_fp for f in self.functions) / len(self.functions)

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "build_id": self.build_id.hex,
            "code_size": self.code_size,
            "functions": [f.to_dict() for f in self.functions],
            "full_symbols": [list(s) for s in self.full_symbols],
        }
        if self.sparse_symbols is not None:
            d["sparse_symbols"] = [list(s) for s in self.sparse_symbols]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "VirtualBinary":
        functions = tuple(
            FunctionDef(
                name=f["name"],
                offset=f["offset"],
                length=f["length"],
                fp_convention=f["fp_convention"],
                frame_size=f["frame_size"],
                cfi=tuple(CfiRule.from_dict(r) for r in f["cfi"]),
            )
            for f in d["functions"]
        )
        sparse = d.get("sparse_symbols")
        return cls(
            name=d["name"],
            build_id=BuildId.from_hex(d["build_id"]),
            code_size=d["code_size"],
            functions=functions,
            full_symbols=tuple((s[0], s[1], s[2]) for s in d["full_symbols"]),
            sparse_symbols=None if sparse is None else tuple((s[0], s[1], s[2]) for s in sparse),
        )


def _default_rule(start: int, end: int, frame_size: int, indirect: bool) -> CfiRule:
    if indirect:
        # The prologue stores SP at [SP]; the CFA is recovered through it.
        return CfiRule(start, end, "sp", 0, indirect=True, load_offset=0, add_offset=frame_size)
    return CfiRule(start, end, "sp", frame_size)


def build_binary(spec: dict) -> VirtualBinary:
    """Build a :class:`VirtualBinary` from a declarative description.

    ``spec`` holds ``name``, optional ``code_size`` and a ``functions``
    list. Each function needs ``name``, ``length`` and ``fp``
    (``"preserves"``/``"omits"``); ``offset``, ``frame_size``,
    ``indirect`` and an explicit ``cfi`` list are optional. Functions
    without an offset are laid out back to back on 16-byte boundaries.
    ``sparse_symbols`` may list the names kept in a stripped table; those
    entries get size 0.

    The build id is a truncated SHA-256 over the normalized description,
    so the same spec always yields the same id.
    """
    raw_fns = spec.get("functions", [])
    if not raw_fns:
        raise BinaryError("binary needs at least one function")
    cursor = 0
    functions: list[FunctionDef] = []
    for f in raw_fns:
        conv = f.get("fp", f.get("fp_convention", PRESERVES))
        if conv not in (PRESERVES, OMITS):
            raise BinaryError(f"{f['name']}: unknown fp convention {conv!r}")
        offset = f.get("offset")
        if offset is None:
            offset = (cursor + 15) & ~15
        length = int(f["length"])
        if length <= 0:
            raise BinaryError(f"{f['name']}: non-positive length")
        frame_size = int(f.get("frame_size", 32))
        if frame_size % WORD or frame_size < 16:
            raise BinaryError(f"{f['name']}: frame_size must be a multiple of 8 and >= 16")
        indirect = bool(f.get("indirect", False))
        if indirect and frame_size < 24:
            raise BinaryError(f"{f['name']}: indirect CFA needs frame_size >= 24")
        if "cfi" in f:
            cfi = tuple(
                r if isinstance(r, CfiRule) else CfiRule.from_dict(r) for r in f["cfi"]
            )
        else:
            cfi = (_default_rule(offset, offset + length, frame_size, indirect),)
        cfi = tuple(sorted(cfi, key=lambda r: r.pc_start))
        pos = offset
        for rule in cfi:
            if rule.pc_start != pos:
                raise BinaryError(
                    f"{f['name']}: CFI gap or overlap at [{pos:#x}, {rule.pc_start:#x})"
                )
            pos = rule.pc_end
        if pos != offset + length:
            raise BinaryError(f"{f['name']}: CFI gap at [{pos:#x}, {offset + length:#x})")
        functions.append(FunctionDef(f["name"], offset, length, conv, frame_size, cfi))
        cursor = offset + length

    functions.sort(key=lambda fn: fn.offset)
    for a, b in zip(functions, functions[1:]):
        if b.offset < a.end:
            raise BinaryError(
                f"overlapping functions {a.name} [{a.offset:#x}, {a.end:#x}) and "
                f"{b.name} [{b.offset:#x}, {b.end:#x})"
            )
    code_size = int(spec.get("code_size") or ((functions[-1].end + PAGE_SIZE - 1) // PAGE_SIZE * PAGE_SIZE))
    if functions[-1].end > code_size:
        raise BinaryError("functions extend past code_size")

    full = tuple((fn.offset, fn.length, fn.name) for fn in functions)
    sparse = None
    if "sparse_symbols" in spec:
        keep = set(spec["sparse_symbols"])
        sparse = tuple((fn.offset, 0, fn.name) for fn in functions if fn.name in keep)

    canon = {
        "name": spec.get("name", ""),
        "code_size": code_size,
        "functions": [fn.to_dict() for fn in functions],
        "sparse": None if sparse is None else [list(s) for s in sparse],
    }
    build_id = BuildId.digest_of(json.dumps(canon, sort_keys=True).encode())
    return VirtualBinary(spec.get("name", build_id.hex[:8]), build_id, code_size,
                         tuple(functions), full, sparse)


@dataclass(frozen=True)
class MappedRegion:
    base: int
    length: int
    build_id: BuildId
    executable: bool = True

    def __post_init__(self) -> None:
        if self.base % PAGE_SIZE:
            raise ValueError("region base must be 4 KiB aligned")

    def contains(self, addr: int) -> bool:
        return self.base <= addr < self.base + self.length


@dataclass(frozen=True)
class RegisterSnapshot:
    pc: int
    sp: int
    fp: int


@dataclass(frozen=True)
class InterpreterFrame:
    code_name: str
    line: int
    join_sp: int


@dataclass(frozen=True)
class GroundTruthStack:
    """Leaf-first list of ``(BuildId, code offset)`` pairs."""

    frames: tuple[tuple[BuildId, int], ...]

    def __post_init__(self) -> None:
        if not self.frames:
            raise ValueError("ground truth stack must be non-empty")

    def __len__(self) -> int:
        return len(self.frames)


@dataclass(frozen=True)
class ThreadImage:
    """Materialized stack bytes for ``[stack_base, stack_base + len(memory))``."""

    stack_base: int
    memory: bytes
    registers: RegisterSnapshot
    interpreter_chain: tuple[InterpreterFrame, ...] = ()

    @property
    def stack_end(self) -> int:
        return self.stack_base + len(self.memory)

    def read(self, addr: int, length: int) -> bytes | None:
        lo = addr - self.stack_base
        if addr < self.stack_base or length < 0 or lo + length > len(self.memory):
            return None
        return self.memory[lo : lo + length]

    def read_u64(self, addr: int) -> int | None:
        lo = addr - self.stack_base
        if addr < self.stack_base or lo + WORD > len(self.memory):
            return None
        return int.from_bytes(self.memory[lo : lo + WORD], "little")


def read_memory(thread: ThreadImage, addr: int, length: int) -> bytes | None:
    """Read ``length`` bytes at ``addr``; ``None`` signals a fault."""
    return thread.read(addr, length)


class VirtualProcess:
    """Binaries mapped into one address space, plus sampled threads."""

    def __init__(self, regions: Sequence[MappedRegion], binaries: dict[BuildId, VirtualBinary],
                 threads: Iterable[ThreadImage] = ()):
        regions = sorted(regions, key=lambda r: r.base)
        for a, b in zip(regions, regions[1:]):
            if b.base < a.base + a.length:
                raise ValueError("mapped regions overlap")
        self.regions = tuple(regions)
        self.binaries = dict(binaries)
        self.threads = list(threads)
        self._bases = [r.base for r in self.regions]
        self._by_id = {r.build_id: r for r in self.regions}

    def region_for(self, addr: int) -> MappedRegion | None:
        i = bisect.bisect_right(self._bases, addr) - 1
        if i < 0:
            return None
        region = self.regions[i]
        return region if region.contains(addr) else None

    def is_executable(self, addr: int) -> bool:
        region = self.region_for(addr)
        return region is not None and region.executable

    def region_of(self, build_id: BuildId) -> MappedRegion:
        return self._by_id[build_id]

    def address_of(self, build_id: BuildId, offset: int) -> int:
        return self._by_id[build_id].base + offset

    def function_for(self, build_id: BuildId, offset: int) -> FunctionDef | None:
        binary = self.binaries.get(build_id)
        return None if binary is None else binary.function_at(offset)


def layout_process(binaries: Sequence[VirtualBinary], base: int = DEFAULT_LOAD_BASE,
                   gap_pages: int = 16) -> VirtualProcess:
    """Map ``binaries`` one after another with unmapped guard gaps."""
    regions = []
    addr = base
    for b in binaries:
        regions.append(MappedRegion(addr, b.code_size, b.build_id, True))
        addr += (b.code_size + PAGE_SIZE - 1) // PAGE_SIZE * PAGE_SIZE + gap_pages * PAGE_SIZE
    return VirtualProcess(regions, {b.build_id: b for b in binaries})


def synthesize_stack_image(
    chain: GroundTruthStack,
    process: VirtualProcess,
    clobber_mode: str = "garbage-fp",
    seed: int = 0,
    stack_size: int = DEFAULT_STACK_SIZE,
    interpreter_chain: Sequence[InterpreterFrame] = (),
) -> ThreadImage:
    """Write the stack memory ``chain`` leaves behind at the sample point.

    FP-preserving frames get the saved-FP/RA pair at ``[FP]``/``[FP+8]``.
    FP-omitting frames store their RA per their CFI rule and repurpose the
    FP register: under ``garbage-fp`` it holds a value outside every
    mapping; under ``stale-fp`` it keeps pointing at the nearest enclosing
    FP-preserving frame, which makes FP walks skip callers silently.

    Only the used top of the stack (plus a small red zone) is
    materialized; ``stack_size`` bounds how deep the chain may reach.
    """
    if clobber_mode not in CLOBBER_MODES:
        raise ValueError(f"unknown clobber mode {clobber_mode!r}")
    rng = np.random.default_rng(seed)

    fns: list[FunctionDef] = []
    rules: list[CfiRule] = []
    pcs: list[int] = []
    for build_id, offset in chain.frames:
        fn = process.function_for(build_id, offset)
        if fn is None:
            raise StackImageError(f"{build_id.hex}+{offset:#x} resolves to no function")
        rule = fn.rule_for(offset)
        if rule is None:
            raise StackImageError(f"{fn.name}: no CFI covering {offset:#x}")
        fns.append(fn)
        rules.append(rule)
        pcs.append(process.address_of(build_id, offset))

    n = len(fns)
    cfa = [0] * n
    sp = [0] * n
    top_cfa = STACK_TOP - 64
    for i in range(n - 1, -1, -1):
        cfa[i] = top_cfa if i == n - 1 else sp[i + 1]
        sp[i] = cfa[i] - fns[i].frame_size
    if STACK_TOP - sp[0] > stack_size:
        raise StackImageError(
            f"chain needs {STACK_TOP - sp[0]} bytes, stack image holds {stack_size}"
        )

    # FP register value live in each frame and on entry to it, root first.
    garbage = GARBAGE_BASE + rng.integers(0, GARBAGE_SPAN // WORD, size=n) * WORD
    live_fp = [0] * n
    incoming_fp = [0] * n
    for i in range(n - 1, -1, -1):
        incoming_fp[i] = 0 if i == n - 1 else live_fp[i + 1]
        if not fns[i].omits_fp:
            live_fp[i] = cfa[i] - 16
        elif clobber_mode == "garbage-fp":
            live_fp[i] = int(garbage[i])
        else:
            live_fp[i] = incoming_fp[i]

    lo = sp[0] - RED_ZONE
    size = STACK_TOP - lo
    mem = bytearray(rng.bytes(size))

    def put(addr: int, value: int) -> None:
        off = addr - lo
        if not 0 <= off <= size - WORD:
            raise StackImageError(f"write at {addr:#x} outside stack image")
        mem[off : off + WORD] = (value & 0xFFFF_FFFF_FFFF_FFFF).to_bytes(WORD, "little")

    for i in range(n):
        rule = rules[i]
        ra = pcs[i + 1] if i + 1 < n else 0
        put(cfa[i] + rule.ra_slot_offset, ra)
        if not fns[i].omits_fp:
            put(cfa[i] - 16, incoming_fp[i])
        elif rule.fp_slot_offset is not None:
            put(cfa[i] + rule.fp_slot_offset, incoming_fp[i])
        if rule.indirect:
            base_val = sp[i] if rule.base == "sp" else live_fp[i]
            put(base_val + rule.load_offset, cfa[i] - rule.add_offset)
        elif rule.base == "sp" and rule.cfa_offset != fns[i].frame_size:
            raise StackImageError(f"{fns[i].name}: SP-based CFA offset disagrees with frame size")

    regs = RegisterSnapshot(pc=pcs[0], sp=sp[0], fp=live_fp[0])
    return ThreadImage(lo, bytes(mem), regs, tuple(interpreter_chain))


def frame_sps(chain: GroundTruthStack, process: VirtualProcess) -> list[int]:
    """SP of each chain frame in the layout :func:`synthesize_stack_image` uses."""
    sizes = [process.function_for(b, o).frame_size for b, o in chain.frames]
    out = [0] * len(sizes)
    cfa = STACK_TOP - 64
    for i in range(len(sizes) - 1, -1, -1):
        out[i] = cfa - sizes[i]
        cfa = out[i]
    return out
