"""Adaptive hybrid FP/DWARF stack unwinding.

The hybrid walker tries the cheap frame-pointer step for every function it
has not seen before, checks the result against the process map, and falls
back to the CFI table when the check fails. The decision is cached per
function in a :class:`MarkerMap`, so steady-state walks never pay for
validation again.
"""

from __future__ import annotations

import enum
import math
import threading
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .buildid import BuildId
from .vproc import (
    CfiRule,
    GroundTruthStack,
    InterpreterFrame,
    RegisterSnapshot,
    ThreadImage,
    VirtualBinary,
    VirtualProcess,
)

MODES = ("fp-only", "dwarf-only", "hybrid")


class Marker(enum.Enum):
    UNMARKED = "unmarked"
    FP = "fp"
    DWARF = "dwarf"


class StepError(Exception):
    """A single unwind step could not be completed."""


class MemoryFault(StepError):
    pass


class NoFdeError(StepError):
    pass


class FdeTableError(ValueError):
    pass


class MarkerMap:
    """Set-once cache of per-function unwinding decisions.

    Reads never take the lock. Writes go through :meth:`set_once`, which
    behaves like a compare-and-swap from ``UNMARKED``: the first writer
    wins and later writers get the stored value back.
    """

    def __init__(self) -> None:
        self._markers: dict[tuple[BuildId, int], Marker] = {}
        self._lock = threading.Lock()

    def get(self, key: tuple[BuildId, int]) -> Marker:
        return self._markers.get(key, Marker.UNMARKED)

    def set_once(self, key: tuple[BuildId, int], value: Marker) -> Marker:
        if value is Marker.UNMARKED:
            raise ValueError("cannot store UNMARKED")
        with self._lock:
            current = self._markers.get(key)
            if current is None:
                self._markers[key] = value
                return value
            return current

    def __len__(self) -> int:
        return len(self._markers)

    def items(self):
        return list(self._markers.items())

    def counts(self) -> dict[str, int]:
        out = {"fp": 0, "dwarf": 0}
        for m in list(self._markers.values()):
            out[m.value] += 1
        return out


@dataclass
class CompiledFdeTable:
    """Sorted FDE array for one binary, searched by binary search."""

    build_id: BuildId
    starts: list[int]
    ends: list[int]
    rules: list[CfiRule]

    @property
    def size(self) -> int:
        return len(self.starts)

    @property
    def probe_bound(self) -> int:
        return math.ceil(math.log2(self.size)) + 1 if self.size else 0

    @classmethod
    def from_rules(cls, build_id: BuildId, rules: Iterable[CfiRule]) -> "CompiledFdeTable":
        ordered = sorted(rules, key=lambda r: r.pc_start)
        for a, b in zip(ordered, ordered[1:]):
            if b.pc_start < a.pc_end:
                raise FdeTableError(
                    f"overlapping FDEs [{a.pc_start:#x}, {a.pc_end:#x}) and "
                    f"[{b.pc_start:#x}, {b.pc_end:#x})"
                )
        return cls(build_id, [r.pc_start for r in ordered], [r.pc_end for r in ordered], ordered)

    def lookup(self, offset: int, cost: "UnwindCost | None" = None) -> CfiRule | None:
        starts = self.starts
        lo, hi = 0, len(starts)
        probes = 0
        while lo < hi:
            mid = (lo + hi) >> 1
            probes += 1
            if starts[mid] <= offset:
                lo = mid + 1
            else:
                hi = mid
        if cost is not None:
            cost.table_probes += probes
        i = lo - 1
        if i < 0 or offset >= self.ends[i]:
            return None
        return self.rules[i]

    def lookup_probes(self, offset: int) -> int:
        cost = UnwindCost()
        self.lookup(offset, cost)
        return cost.table_probes


def compile_fde_table(binary: VirtualBinary) -> CompiledFdeTable:
    return CompiledFdeTable.from_rules(binary.build_id, (r for f in binary.functions for r in f.cfi))


def compile_tables(process: VirtualProcess) -> dict[BuildId, CompiledFdeTable]:
    return {bid: compile_fde_table(b) for bid, b in process.binaries.items()}


@dataclass
class UnwindConfig:
    max_frames: int = 127
    validation_enabled: bool = True
    cost_accounting: bool = True

    def __post_init__(self) -> None:
        if self.max_frames < 1:
            raise ValueError("max_frames must be >= 1")


@dataclass
class UnwindCost:
    stack_reads: int = 0
    table_probes: int = 0
    validations: int = 0
    marker_lookups: int = 0
    unmarked_branches: int = 0
    slow_path_steps: int = 0
    fp_frames: int = 0
    dwarf_frames: int = 0
    fp_reads: int = 0
    dwarf_reads: int = 0

    def add(self, other: "UnwindCost") -> None:
        for k, v in asdict(other).items():
            setattr(self, k, getattr(self, k) + v)

    def to_dict(self) -> dict[str, int]:
        return asdict(self)


@dataclass(frozen=True)
class Step:
    pc: int
    sp: int
    fp: int


@dataclass
class UnwindResult:
    frames: list[tuple[BuildId, int]]
    methods: list[str]
    sps: list[int]
    termination: str
    cost: UnwindCost = field(default_factory=UnwindCost)


def _read(mem: ThreadImage, addr: int, cost: UnwindCost | None) -> int:
    if cost is not None:
        cost.stack_reads += 1
    value = mem.read_u64(addr)
    if value is None:
        raise MemoryFault(f"read at {addr:#x}")
    return value


def unwind_fp(pc: int, sp: int, fp: int, mem: ThreadImage, cost: UnwindCost | None = None) -> Step:
    """One frame-pointer step: ``fp' = [FP]``, ``pc' = [FP+8]``, ``sp' = FP+16``."""
    saved_fp = _read(mem, fp, cost)
    ra = _read(mem, fp + 8, cost)
    return Step(ra, fp + 16, saved_fp)


def unwind_dwarf(pc: int, sp: int, fp: int, table: CompiledFdeTable, mem: ThreadImage,
                 load_base: int = 0, cost: UnwindCost | None = None) -> Step:
    """One CFI step for ``pc`` using ``table`` (offsets relative to ``load_base``)."""
    rule = table.lookup(pc - load_base, cost)
    if rule is None:
        raise NoFdeError(f"no FDE covers {pc:#x}")
    base = sp if rule.base == "sp" else fp
    if rule.indirect:
        if cost is not None:
            cost.slow_path_steps += 1
        cfa = _read(mem, base + rule.load_offset, cost) + rule.add_offset
    else:
        cfa = base + rule.cfa_offset
    ra = _read(mem, cfa + rule.ra_slot_offset, cost)
    new_fp = fp if rule.fp_slot_offset is None else _read(mem, cfa + rule.fp_slot_offset, cost)
    return Step(ra, cfa, new_fp)


def validate_caller_pc(pc2: int, sp2: int, sp: int, process: VirtualProcess) -> bool:
    """True iff ``pc2`` is in an executable mapping and the stack moved up."""
    return sp2 > sp and process.is_executable(pc2)


def marker_key(process: VirtualProcess, build_id: BuildId, offset: int) -> tuple[BuildId, int]:
    fn = process.function_for(build_id, offset)
    return (build_id, fn.offset if fn is not None else offset)


def _walk(regs: RegisterSnapshot, thread: ThreadImage, process: VirtualProcess,
          tables: dict[BuildId, CompiledFdeTable], config: UnwindConfig, mode: str,
          markers: MarkerMap | None) -> UnwindResult:
    cost = UnwindCost()
    frames: list[tuple[BuildId, int]] = []
    methods: list[str] = []
    sps: list[int] = []
    pc, sp, fp = regs.pc, regs.sp, regs.fp
    termination = "completed"

    while True:
        region = process.region_for(pc)
        if region is None or not region.executable:
            break
        if len(frames) >= config.max_frames:
            termination = "max_frames"
            break
        offset = pc - region.base
        frames.append((region.build_id, offset))
        sps.append(sp)
        reads_before = cost.stack_reads
        method = "dwarf" if mode == "dwarf-only" else "fp"
        try:
            if mode == "fp-only":
                method = "fp"
                step = unwind_fp(pc, sp, fp, thread, cost)
            elif mode == "dwarf-only":
                method = "dwarf"
                step = unwind_dwarf(pc, sp, fp, tables[region.build_id], thread, region.base, cost)
            else:
                key = marker_key(process, region.build_id, offset)
                cost.marker_lookups += 1
                marker = markers.get(key)
                if marker is Marker.UNMARKED:
                    cost.unmarked_branches += 1
                    try:
                        step = unwind_fp(pc, sp, fp, thread, cost)
                        cost.validations += 1
                        # A zero return address above a valid frame is the
                        # end-of-stack sentinel, not a failed FP step.
                        ok = validate_caller_pc(step.pc, step.sp, sp, process) or (
                            step.pc == 0 and step.sp > sp)
                    except MemoryFault:
                        ok = False
                    method = "fp" if ok else "dwarf"
                    markers.set_once(key, Marker.FP if ok else Marker.DWARF)
                    if not ok:
                        step = unwind_dwarf(pc, sp, fp, tables[region.build_id], thread,
                                            region.base, cost)
                elif marker is Marker.FP:
                    method = "fp"
                    step = unwind_fp(pc, sp, fp, thread, cost)
                else:
                    method = "dwarf"
                    step = unwind_dwarf(pc, sp, fp, tables[region.build_id], thread,
                                        region.base, cost)
        except MemoryFault:
            methods.append(method)
            termination = "memory_fault"
            break
        except NoFdeError:
            methods.append("dwarf")
            termination = "invalid_step"
            break
        methods.append(method)
        reads = cost.stack_reads - reads_before
        if method == "fp":
            cost.fp_frames += 1
            cost.fp_reads += reads
        else:
            cost.dwarf_frames += 1
            cost.dwarf_reads += reads
        if mode != "fp-only" and config.validation_enabled and step.sp <= sp:
            termination = "invalid_step"
            break
        pc, sp, fp = step.pc, step.sp, step.fp

    if not config.cost_accounting:
        cost = UnwindCost()
    return UnwindResult(frames, methods, sps, termination, cost)


def unwind_hybrid(regs: RegisterSnapshot, thread: ThreadImage, process: VirtualProcess,
                  markers: MarkerMap, tables: dict[BuildId, CompiledFdeTable],
                  config: UnwindConfig | None = None) -> UnwindResult:
    """Walk the stack choosing FP or DWARF per function via ``markers``.

    Unmarked functions try an FP step, validate it, and get marked ``fp``
    on success or ``dwarf`` (after a CFI step) on failure. Marked
    functions use their cached method without validation. The walk stops
    once PC leaves every executable mapping, after ``max_frames`` frames,
    or on the first failing step; the partial stack is returned.
    """
    return _walk(regs, thread, process, tables, config or UnwindConfig(), "hybrid", markers)


def unwind_fp_only(regs: RegisterSnapshot, thread: ThreadImage, process: VirtualProcess,
                   config: UnwindConfig | None = None) -> UnwindResult:
    # Conventional FP profilers: no validation, no markers.
    return _walk(regs, thread, process, {}, config or UnwindConfig(), "fp-only", None)


def unwind_dwarf_only(regs: RegisterSnapshot, thread: ThreadImage, process: VirtualProcess,
                      tables: dict[BuildId, CompiledFdeTable],
                      config: UnwindConfig | None = None) -> UnwindResult:
    return _walk(regs, thread, process, tables, config or UnwindConfig(), "dwarf-only", None)


@dataclass
class StitchedStack:
    """Unified leaf-first stack; interpreter frames appear as :class:`InterpreterFrame`."""

    frames: list
    orphans: list[InterpreterFrame]


def stitch_stacks(native: UnwindResult, chain: Sequence[InterpreterFrame],
                  eval_functions: set[tuple[BuildId, int]],
                  process: VirtualProcess) -> StitchedStack:
    """Replace interpreter eval-loop frames with the interpreted frames they host.

    Every maximal run of native frames whose function is in
    ``eval_functions`` covers the SP interval from its leaf-most frame's
    SP up to the SP of the first frame above the run. Interpreter frames
    whose ``join_sp`` falls in that interval replace the run, leaf first.
    Interpreter frames that land in no run are returned as orphans.
    """
    joins = [f.join_sp for f in chain]
    if any(b <= a for a, b in zip(joins, joins[1:])):
        raise ValueError("interpreter join_sp values must strictly increase leaf to root")
    if not chain:
        return StitchedStack(list(native.frames), [])

    n = len(native.frames)
    is_eval = [marker_key(process, b, o) in eval_functions for b, o in native.frames]
    used = [False] * len(chain)
    out: list = []
    i = 0
    while i < n:
        if not is_eval[i]:
            out.append(native.frames[i])
            i += 1
            continue
        j = i
        while j + 1 < n and is_eval[j + 1]:
            j += 1
        lo = native.sps[i]
        hi = native.sps[j + 1] if j + 1 < n else math.inf
        for k, frame in enumerate(chain):
            if lo <= frame.join_sp < hi:
                out.append(frame)
                used[k] = True
        i = j + 1
    orphans = [f for f, u in zip(chain, used) if not u]
    return StitchedStack(out, orphans)


def frame_accuracy(produced: Sequence, truth: GroundTruthStack | Sequence) -> float:
    """Fraction of truth positions matched exactly, comparing leaf-first."""
    expected = truth.frames if isinstance(truth, GroundTruthStack) else tuple(truth)
    if not expected:
        raise ValueError("truth must be non-empty")
    hits = sum(1 for a, b in zip(produced, expected) if a == b)
    return hits / len(expected)


@dataclass
class UnwindCorpus:
    process: VirtualProcess
    samples: list[tuple[ThreadImage, GroundTruthStack]]
    tables: dict[BuildId, CompiledFdeTable]


@dataclass
class EvalReport:
    mode: str
    accuracies: np.ndarray
    cost: UnwindCost
    frames: int
    terminations: dict[str, int]

    @property
    def mean_accuracy(self) -> float:
        return float(self.accuracies.mean())

    def per_frame(self) -> dict[str, float]:
        f = max(self.frames, 1)
        out = {
            "memory_reads_per_frame": self.cost.stack_reads / f,
            "table_probes_per_frame": self.cost.table_probes / f,
            "validations_per_frame": self.cost.validations / f,
        }
        if self.cost.fp_frames:
            out["reads_per_fp_frame"] = self.cost.fp_reads / self.cost.fp_frames
        if self.cost.dwarf_frames:
            out["reads_per_dwarf_frame"] = self.cost.dwarf_reads / self.cost.dwarf_frames
        return out

    def histogram(self, bins: int = 10) -> list[int]:
        counts, _ = np.histogram(self.accuracies, bins=bins, range=(0.0, 1.0))
        return counts.tolist()

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "samples": int(self.accuracies.size),
            "mean_accuracy": self.mean_accuracy,
            "histogram": self.histogram(),
            "terminations": self.terminations,
            "cost": self.cost.to_dict(),
            "per_frame": self.per_frame(),
        }


def unwind_corpus_eval(corpus: UnwindCorpus, mode: str, markers: MarkerMap | None = None,
                       config: UnwindConfig | None = None) -> EvalReport:
    """Unwind every sample in ``mode`` and score it against ground truth.

    In hybrid mode ``markers`` carries over between calls, which is how
    steady-state behaviour is measured: run once to warm the cache, then
    again to observe the converged cost.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if not corpus.samples:
        raise ValueError("corpus is empty")
    config = config or UnwindConfig()
    if mode == "hybrid" and markers is None:
        markers = MarkerMap()
    total = UnwindCost()
    acc = np.empty(len(corpus.samples))
    frames = 0
    terms: dict[str, int] = {}
    for i, (thread, truth) in enumerate(corpus.samples):
        res = _walk(thread.registers, thread, corpus.process, corpus.tables, config, mode, markers)
        acc[i] = frame_accuracy(res.frames, truth)
        total.add(res.cost)
        frames += len(res.frames)
        terms[res.termination] = terms.get(res.termination, 0) + 1
    return EvalReport(mode, acc, total, frames, terms)


def format_eval_table(reports: Sequence[EvalReport]) -> str:
    lines = [f"{'mode':<11} {'samples':>8} {'accuracy':>9} {'reads/fr':>9} {'probes/fr':>10} {'valid/fr':>9}"]
    for r in reports:
        pf = r.per_frame()
        lines.append(
            f"{r.mode:<11} {r.accuracies.size:>8} {r.mean_accuracy:>9.4f} "
            f"{pf['memory_reads_per_frame']:>9.3f} {pf['table_probes_per_frame']:>10.3f} "
            f"{pf['validations_per_frame']:>9.3f}"
        )
        lines.append(f"{'':<11} histogram {r.histogram()}")
    return "\n".join(lines)
