"""Synthetic corpora for unwinder and symbolization evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .buildid import BuildId
from .symbols import pack_symbols
from .unwind import UnwindCorpus, compile_tables
from .vproc import (
    OMITS,
    PRESERVES,
    GroundTruthStack,
    VirtualBinary,
    build_binary,
    layout_process,
    synthesize_stack_image,
)

FRAME_SIZES = tuple(range(32, 257, 16))


def call_site(fn) -> int:
    """Return-address offset used when ``fn`` appears as a caller."""
    return fn.offset + (fn.length // 2 & ~3)


def leaf_pc(fn) -> int:
    return fn.offset + min(16, fn.length - 1)


def chain_offsets(binary: VirtualBinary, names_leaf_first) -> GroundTruthStack:
    fns = [binary.function_named(n) for n in names_leaf_first]
    frames = [(binary.build_id, leaf_pc(fns[0]))]
    frames += [(binary.build_id, call_site(fn)) for fn in fns[1:]]
    return GroundTruthStack(tuple(frames))


def corpus_binary(functions: int = 400, omits_fraction: float = 0.2, indirect_fraction: float = 0.0,
                  seed: int = 0, name: str = "corpus") -> VirtualBinary:
    """A binary with exactly ``round(omits_fraction * functions)`` FP-omitting functions.

    ``indirect_fraction`` is the share of FP-omitting functions whose CFA
    rule is an indirect (memory-loaded) expression.
    """
    if not 0 <= omits_fraction <= 1 or not 0 <= indirect_fraction <= 1:
        raise ValueError("fractions must lie in [0, 1]")
    if functions < 1:
        raise ValueError("need at least one function")
    rng = np.random.default_rng(seed)
    n_omit = round(omits_fraction * functions)
    omit = set(rng.permutation(functions)[:n_omit].tolist())
    omit_list = sorted(omit)
    n_ind = round(indirect_fraction * len(omit_list))
    indirect = set(rng.permutation(omit_list)[:n_ind].tolist()) if omit_list else set()
    sizes = rng.choice(FRAME_SIZES, size=functions)
    lengths = rng.integers(64, 2048, size=functions)
    fns = [
        {"name": f"fn_{i:05d}", "length": int(lengths[i]), "fp": OMITS if i in omit else PRESERVES,
         "frame_size": int(sizes[i]), "indirect": i in indirect}
        for i in range(functions)
    ]
    return build_binary({"name": name, "functions": fns})


def generate_unwind_corpus(functions: int = 400, omits_fraction: float = 0.2, samples: int = 10_000,
                           depth_mean: float = 25.0, depth_cap: int = 120,
                           indirect_fraction: float = 0.0, clobber_mode: str = "garbage-fp",
                           seed: int = 0) -> UnwindCorpus:
    """Sampled call chains over one binary, with their materialized stacks.

    Depths are geometric with mean ``depth_mean``, capped at
    ``depth_cap``. Frames are drawn from a stream that starts with a
    permutation of every function, so any corpus of at least a few dozen
    samples touches each function.
    """
    if depth_mean < 1 or depth_cap < 1:
        raise ValueError("depths must be positive")
    binary = corpus_binary(functions, omits_fraction, indirect_fraction, seed)
    process = layout_process([binary])
    rng = np.random.default_rng([seed, 1])
    depths = np.minimum(rng.geometric(1.0 / depth_mean, size=samples), depth_cap)
    total = int(depths.sum())
    stream = np.concatenate([rng.permutation(functions),
                             rng.integers(0, functions, size=max(total - functions, 0))])
    fns = binary.functions
    out = []
    pos = 0
    for s in range(samples):
        d = int(depths[s])
        idx = stream[pos:pos + d]
        pos += d
        frames = [(binary.build_id, leaf_pc(fns[idx[0]]))]
        frames += [(binary.build_id, call_site(fns[i])) for i in idx[1:]]
        truth = GroundTruthStack(tuple(frames))
        image = synthesize_stack_image(truth, process, clobber_mode, seed=seed * 1_000_003 + s)
        out.append((image, truth))
    return UnwindCorpus(process, out, compile_tables(process))


# -- symbol misattribution -------------------------------------------------

MEMCPY_OFFSET = 0x11C6AA0
GAP = 18 << 20
HOT_FUNCTIONS = (
    "PrepareWatcher::Start", "IoWatcher::onReady", "TimerWatcher::fire", "RpcChannel::send",
    "RpcServer::dispatch", "Buffer::append", "Crc32c::update", "Connection::onRead",
    "Connection::onWrite", "Session::flush", "ThreadPool::worker", "ChunkWriter::commit",
)


@dataclass
class MisattributionCorpus:
    binary: VirtualBinary
    stacks: list[list[tuple[BuildId, int]]]

    def full_symbols(self) -> bytes:
        return pack_symbols(self.binary.build_id, self.binary.full_symbols)

    def sparse_symbols(self) -> bytes:
        return pack_symbols(self.binary.build_id, self.binary.sparse_symbols)


def misattribution_binary() -> VirtualBinary:
    """A storage daemon whose stripped table keeps only exported symbols.

    ``pangu_memcpy_avx512`` is the last exported symbol before an 18 MiB
    stretch of internal code, so nearest-lower lookups attribute that
    whole stretch to it.
    """
    fns = [
        {"name": "_start", "offset": 0x1000, "length": 0x40, "fp": PRESERVES},
        {"name": "main", "offset": 0x1040, "length": 0x200, "fp": PRESERVES},
        {"name": "pangu_memcpy_avx512", "offset": MEMCPY_OFFSET, "length": 0x380, "fp": OMITS},
        {"name": "EventLoop::runOnce", "offset": 0x2300000, "length": 0x600, "fp": PRESERVES},
    ]
    for i, name in enumerate(HOT_FUNCTIONS):
        fns.append({"name": name, "offset": 0x2310000 + i * 0x8000, "length": 0x400 + 0x40 * i,
                    "fp": OMITS if i % 4 == 3 else PRESERVES})
    fns.append({"name": "pangu_shutdown", "offset": MEMCPY_OFFSET + GAP, "length": 0x100,
                "fp": PRESERVES})
    return build_binary({"name": "pangu_chunkserver", "functions": fns,
                         "sparse_symbols": ["_start", "main", "pangu_memcpy_avx512", "pangu_shutdown"]})


def misattribution_corpus(samples: int = 5000, seed: int = 0) -> MisattributionCorpus:
    binary = misattribution_binary()
    rng = np.random.default_rng(seed)
    # Mildly skewed load over the hot set plus a little genuine memcpy time.
    names = list(HOT_FUNCTIONS) + ["pangu_memcpy_avx512"]
    w = np.array([1.0 / (i + 2) ** 0.5 for i in range(len(HOT_FUNCTIONS))] + [0.3])
    picks = rng.choice(len(names), size=samples, p=w / w.sum())
    stacks = []
    for p in picks:
        chain = chain_offsets(binary, [names[p], "EventLoop::runOnce", "main", "_start"])
        stacks.append(list(chain.frames))
    return MisattributionCorpus(binary, stacks)
