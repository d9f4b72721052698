"""Deterministic multi-rank training traces with injectable faults.

Each rank's main thread runs the same iteration skeleton::

    dataloader -> forward launch -> backward launch -> sync tail -> [collective] -> optimizer

The host timeline is a sequence of intervals, each tagged with the call
stack active during it. Samples fire on a jittered tick grid and take the
stack of whatever interval they land in. GPU compute kernels finish at
collective entry; only the sync tail of kernel work is unoverlapped with
host launches, so GPU slowdowns reach lateness through that tail.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from .bundle import GpuEvent, OsCounterRecord, TraceBundle
from .collector import KERNEL_SUFFIX, NS_PER_MS, NS_PER_S, CollectiveEvent, StackSample
from .corpus import call_site, chain_offsets, leaf_pc
from .symbols import pack_symbols
from .unwind import MarkerMap, UnwindConfig, compile_tables, unwind_hybrid
from .vproc import OMITS, PRESERVES, VirtualBinary, build_binary, layout_process, synthesize_stack_image

SCENARIOS = ("healthy", "thermal", "softirq", "dentry-lock", "logging", "io-bottleneck")

DEFAULT_PHASES = {  # ms; sums to a 1 s iteration
    "dataloader": 60.0,
    "forward": 380.0,
    "backward": 440.0,
    "sync_tail": 5.49,
    "collective": 30.0,
    "optimizer": 84.51,
}
HOST_PHASES = ("dataloader", "forward", "backward", "optimizer")
# Kernel time per iteration in ms; over a 1 s iteration these read as wall fractions.
DEFAULT_KERNELS = {"forward": 481.0, "softmax": 191.0, "dropout": 153.0}

DEFAULT_TARGETS = {"thermal": (0,), "softirq": (4,), "dentry-lock": (5,)}
DEFAULT_MAGNITUDE = {"thermal": 1.175, "softirq": 0.0174, "dentry-lock": 0.6,
                     "logging": 0.03, "io-bottleneck": 0.20}
DEFAULT_SLOWDOWN = {"logging": 0.10, "io-bottleneck": 0.30}
EXPECTED_VERDICT = {
    "healthy": "healthy",
    "thermal": "gpu-uniform-slowdown",
    "softirq": "cpu-interference",
    "dentry-lock": "cpu-interference",
    "logging": "temporal-degradation",
    "io-bottleneck": "temporal-degradation",
}

ROOT = ("_start", "__libc_start_main", "main", "Trainer::run", "Trainer::step")
CPFS_PATH = ("cpfs::Client::Read", "ossutils::GetObject")
LOG_PATH = ("MetricsLogger::log", "SLS::LogClient::Send", "protobuf::Serialize", "memcpy")
PHASE_VARIANTS = {
    "dataloader": [
        (("DataLoader::next", "Dataset::getitem") + CPFS_PATH, 1.0),
        (("DataLoader::next", "Dataset::getitem", "Decoder::decode"), 2.5),
        (("DataLoader::next", "Collate::stack", "memcpy"), 2.5),
    ],
    "forward": [
        (("Model::forward", "at::native::linear", "cudaLaunchKernel"), 16.0),
        (("Model::forward", "at::native::softmax", "cudaLaunchKernel"), 8.0),
        (("Model::forward", "at::native::dropout", "cudaLaunchKernel"), 6.0),
        (("Model::forward", "at::native::layer_norm"), 8.0),
    ],
    "backward": [
        (("autograd::Engine::execute", "autograd::Node::apply", "at::native::linear_backward",
          "cudaLaunchKernel"), 24.0),
        (("autograd::Engine::execute", "autograd::Node::apply", "at::native::softmax_backward",
          "cudaLaunchKernel"), 10.0),
        (("autograd::Engine::execute", "autograd::Node::apply", "at::native::dropout_backward"), 10.0),
    ],
    "sync_tail": [(("cudaStreamSynchronize", "cuda::EventQuery"), 1.0)],
    "optimizer": [
        (("Optimizer::step", "at::native::add_", "cudaLaunchKernel"), 2.5),
        (("Optimizer::step", "at::native::mul_"), 1.0),
    ],
}
ALLREDUCE_CALL = ("c10d::ProcessGroupNCCL::allreduce", "ncclAllReduce")
ALLREDUCE_WAIT = ("c10d::Work::wait", "cudaStreamSynchronize", "cuda::EventQuery")

IRQ_CHAIN = ("asm_common_interrupt", "common_interrupt", "irq_exit_rcu", "do_softirq",
             "net_rx_action", "napi_poll", "virtnet_poll", "virtnet_receive", "napi_gro_receive")
# Self time of napi_poll, virtnet_poll, virtnet_receive, napi_gro_receive (percent of CPU).
IRQ_SELF = ((6, 0.22), (7, 0.04), (8, 0.67), (9, 0.81))
SYSCALL_USER = ("DataLoader::next", "Dataset::getitem", "__libc_open64")
OPENAT = ("entry_SYSCALL_64", "do_syscall_64", "__x64_sys_openat", "do_sys_openat2",
          "do_filp_open", "path_openat")
SPIN = "queued_spin_lock_slowpath"
DENTRY_PATHS = (
    (OPENAT + ("link_path_walk", "try_to_unlazy", "__legitimize_path", "lockref_get_not_dead", SPIN), 65),
    (OPENAT + ("terminate_walk", "dput", SPIN), 34),
    (OPENAT + ("link_path_walk", "lookup_fast", "unlazy_child", SPIN), 11),
)

OMIT_FP_USER = {"memcpy", "Decoder::decode", "at::native::softmax", "cuda::EventQuery",
                "protobuf::Serialize", "ossutils::GetObject", "at::native::mul_"}
INDIRECT_USER = {"at::native::mul_"}

BASE_RATES = {  # events per second
    "interrupts": {"LOC": 1000, "virtio0-input.0": 2000, "nvidia": 500},
    "softirqs": {"NET_RX": 2000, "TIMER": 1000, "SCHED": 800, "RCU": 600},
}
NUMA_RATE = 2.0
BG_NET_RX_SHARE = 0.0003
BURST_MS = 0.2


def kernel_label(name: str) -> str:
    return name + KERNEL_SUFFIX


class SpecError(ValueError):
    pass


@dataclass
class ScenarioSpec:
    scenario: str = "healthy"
    seed: int = 0
    ranks: int = 8
    iterations: int = 300
    sample_rate: float = 99.0
    onset: int = 100
    targets: tuple[int, ...] | None = None
    magnitude: float | None = None
    slowdown: float | None = None
    phases: dict = field(default_factory=lambda: dict(DEFAULT_PHASES))
    kernels: dict = field(default_factory=lambda: dict(DEFAULT_KERNELS))
    clock_sensitivity: float = 0.416
    critical_fraction: float = 0.0345
    max_skew_ms: float = 10.0
    exit_jitter_us: float = 50.0
    phase_jitter: float = 0.01
    rank_jitter: float = 0.00002
    tick_jitter: float = 0.02
    drain_interval: float = 5.0
    clobber_mode: str = "garbage-fp"
    group: str = "g0"

    def resolved(self) -> "ScenarioSpec":
        s = copy.deepcopy(self)
        if s.targets is None:
            s.targets = DEFAULT_TARGETS.get(s.scenario, ())
            if s.scenario in ("logging", "io-bottleneck"):
                s.targets = tuple(range(s.ranks))
        s.targets = tuple(int(t) for t in s.targets)
        if s.magnitude is None:
            s.magnitude = DEFAULT_MAGNITUDE.get(s.scenario, 0.0)
        if s.slowdown is None:
            s.slowdown = DEFAULT_SLOWDOWN.get(s.scenario, 0.0)
        return s

    def validate(self) -> None:
        if self.scenario not in SCENARIOS:
            raise SpecError(f"unknown scenario {self.scenario!r}; choose from {', '.join(SCENARIOS)}")
        if self.ranks < 2:
            raise SpecError("ranks must be >= 2")
        if self.iterations < 2:
            raise SpecError("iterations must be >= 2")
        if not 0 <= self.onset < self.iterations:
            raise SpecError("onset must lie in [0, iterations)")
        if self.sample_rate <= 0 or self.drain_interval <= 0:
            raise SpecError("sample rate and drain interval must be positive")
        if set(self.phases) != set(DEFAULT_PHASES) or min(self.phases.values()) <= 0:
            raise SpecError(f"phases must give positive durations for {', '.join(DEFAULT_PHASES)}")
        if not self.kernels or min(self.kernels.values()) <= 0:
            raise SpecError("kernel mix must be non-empty and positive")
        if self.scenario == "healthy":
            return
        if self.magnitude is None or self.magnitude <= 0:
            raise SpecError("fault magnitude must be positive")
        if any(not 0 <= t < self.ranks for t in self.targets or ()):
            raise SpecError("target rank out of range")
        if not self.targets:
            raise SpecError("fault needs at least one target rank")
        if self.scenario == "thermal" and self.magnitude < 1:
            raise SpecError("thermal magnitude is a clock ratio and must be >= 1")
        if self.scenario == "softirq" and self.magnitude >= 0.5:
            raise SpecError("softirq share exceeds the iteration budget")
        if self.scenario == "dentry-lock" and self.magnitude > 10:
            raise SpecError("dentry-lock magnitude exceeds the iteration budget")
        if self.scenario in ("logging", "io-bottleneck"):
            if self.slowdown is None or self.slowdown < 0:
                raise SpecError("slowdown must be non-negative")
            if _host_scale(self) <= 0:
                raise SpecError("fault share exceeds the iteration budget")

    @property
    def kernel_slowdown(self) -> float:
        return 1 + self.clock_sensitivity * (self.magnitude - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["targets"] = None if self.targets is None else list(self.targets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        d = dict(d)
        if d.get("targets") is not None:
            d["targets"] = tuple(d["targets"])
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown spec fields: {', '.join(sorted(unknown))}")
        return cls(**d)


def _host_scale(spec: ScenarioSpec) -> float:
    """Factor applied to host phases so a uniform fault hits its target iteration time."""
    ph = spec.phases
    t0 = sum(ph.values())
    fixed = ph["sync_tail"] + ph["collective"]
    host = t0 - fixed
    t_new = t0 * (1 + spec.slowdown)
    return (t_new - fixed - spec.magnitude * t_new) / host


@dataclass
class GroundTruthLabel:
    scenario: str
    expected_verdict: str
    flagged_ranks: list[int]
    affected_ranks: list[int]
    injected_path: list[str]
    onset: int | None
    expected_lateness_ms: float
    clock_skew_ns: list[int]

    def to_dict(self) -> dict:
        return asdict(self)


def injected_path(scenario: str) -> list[str]:
    if scenario == "softirq":
        return [kernel_label(n) for n in IRQ_CHAIN]
    if scenario == "dentry-lock":
        path = DENTRY_PATHS[0][0]
        return [kernel_label(n) for n in path[path.index("do_sys_openat2"):]]
    if scenario == "logging":
        return list(LOG_PATH[1:])
    if scenario == "io-bottleneck":
        return list(CPFS_PATH)
    return []


def make_label(spec: ScenarioSpec, skews_ns: list[int]) -> GroundTruthLabel:
    s = spec
    t0 = sum(s.phases.values())
    if s.scenario == "thermal":
        late = (s.kernel_slowdown - 1) * s.phases["sync_tail"]
    elif s.scenario == "softirq":
        late = s.critical_fraction * s.magnitude * t0
    elif s.scenario == "dentry-lock":
        late = s.magnitude * t0
    else:
        late = 0.0
    straggler = s.scenario in ("thermal", "softirq", "dentry-lock")
    return GroundTruthLabel(
        s.scenario, EXPECTED_VERDICT[s.scenario],
        sorted(s.targets) if straggler else [],
        sorted(s.targets) if s.scenario != "healthy" else [],
        injected_path(s.scenario),
        s.onset if s.scenario != "healthy" else None,
        late, skews_ns,
    )


# -- binaries --------------------------------------------------------------

def _user_names() -> list[str]:
    names = list(ROOT)
    for variants in PHASE_VARIANTS.values():
        for suffix, _ in variants:
            names += suffix
    names += ALLREDUCE_CALL + ALLREDUCE_WAIT + LOG_PATH + SYSCALL_USER
    return list(dict.fromkeys(names))


def _kernel_names() -> list[str]:
    names = list(IRQ_CHAIN)
    for path, _ in DENTRY_PATHS:
        names += path
    return list(dict.fromkeys(names))


def trainer_binary() -> VirtualBinary:
    fns = []
    for i, name in enumerate(_user_names()):
        omit = name in OMIT_FP_USER
        fns.append({"name": name, "length": 0x180 + 0x20 * (i % 7), "fp": OMITS if omit else PRESERVES,
                    "frame_size": 48 + 16 * (i % 4), "indirect": name in INDIRECT_USER})
    return build_binary({"name": "trainer", "functions": fns})


def kernel_binary() -> VirtualBinary:
    fns = [{"name": n, "length": 0x100 + 0x10 * (i % 5), "fp": PRESERVES}
           for i, n in enumerate(_kernel_names())]
    return build_binary({"name": "vmlinux", "functions": fns})


class StackFactory:
    """Turns label stacks into raw sampled frames, unwinding the user part.

    User frames come from a materialized stack image walked by the hybrid
    unwinder, exactly as a live profiler would see them. Kernel frames
    are taken from the kernel binary directly.
    """

    def __init__(self, clobber_mode: str = "garbage-fp", seed: int = 0) -> None:
        self.trainer = trainer_binary()
        self.kernel = kernel_binary()
        self.process = layout_process([self.trainer])
        self.tables = compile_tables(self.process)
        self.markers = MarkerMap()
        self.clobber_mode = clobber_mode
        self.seed = seed
        self.mismatches = 0
        self._cache: dict[tuple[str, ...], tuple[tuple, tuple]] = {}

    def frames(self, labels: tuple[str, ...]):
        hit = self._cache.get(labels)
        if hit is not None:
            return hit
        user = [n for n in labels if not n.endswith(KERNEL_SUFFIX)]
        kern = [n[: -len(KERNEL_SUFFIX)] for n in labels if n.endswith(KERNEL_SUFFIX)]
        truth = chain_offsets(self.trainer, user[::-1])
        image = synthesize_stack_image(truth, self.process, self.clobber_mode,
                                       seed=self.seed * 7919 + len(self._cache))
        res = unwind_hybrid(image.registers, image, self.process, self.markers, self.tables,
                            UnwindConfig())
        if tuple(res.frames) != truth.frames:
            self.mismatches += 1
        kframes = []
        for j, name in enumerate(reversed(kern)):
            fn = self.kernel.function_named(name)
            kframes.append((self.kernel.build_id, leaf_pc(fn) if j == 0 else call_site(fn)))
        frames = tuple(kframes) + tuple(res.frames)
        flags = (True,) * len(kframes) + (False,) * len(res.frames)
        hit = self._cache[labels] = (frames, flags)
        return hit


# -- timeline --------------------------------------------------------------

class _Registry:
    def __init__(self) -> None:
        self.ids: dict[tuple[str, ...], int] = {}
        self.stacks: list[tuple[str, ...]] = []

    def get(self, labels: tuple[str, ...]) -> int:
        sid = self.ids.get(labels)
        if sid is None:
            sid = self.ids[labels] = len(self.stacks)
            self.stacks.append(labels)
        return sid


def _place(total: float, lengths: list[float], rng: np.random.Generator) -> list[float]:
    """Non-overlapping start offsets for ``lengths`` inside ``[0, total)``."""
    free = total - sum(lengths)
    cuts = np.sort(rng.uniform(0, max(free, 0.0), size=len(lengths)))
    out, used = [], 0.0
    for c, ln in zip(cuts, lengths):
        out.append(float(c) + used)
        used += ln
    return out


def _insert(intervals: list[list], at: float, pieces: list[list]) -> None:
    """Split the interval covering offset ``at`` and insert ``pieces`` there."""
    pos = 0.0
    for i, (dur, sid) in enumerate(intervals):
        if at <= pos + dur or i == len(intervals) - 1:
            head = min(max(at - pos, 0.0), dur)
            intervals[i:i + 1] = [[head, sid]] + pieces + [[dur - head, sid]]
            return
        pos += dur


class _Generator:
    def __init__(self, spec: ScenarioSpec) -> None:
        self.spec = spec
        self.reg = _Registry()
        self.variants = {
            p: [(self.reg.get(ROOT + suffix), w / sum(x for _, x in vs)) for suffix, w in vs]
            for p, vs in PHASE_VARIANTS.items()
        }
        self.call_sid = self.reg.get(ROOT + ALLREDUCE_CALL)
        self.wait_sid = self.reg.get(ROOT + ALLREDUCE_WAIT)
        self.log_sid = self.reg.get(ROOT + LOG_PATH)
        self.t0 = sum(spec.phases.values())
        self.irq_self_total = sum(s for _, s in IRQ_SELF)

    def irq_pieces(self, user_sid: int, length: float) -> list[list]:
        user = self.reg.stacks[user_sid]
        return [[length * s / self.irq_self_total,
                 self.reg.get(user + tuple(kernel_label(n) for n in IRQ_CHAIN[:depth]))]
                for depth, s in IRQ_SELF]

    def dentry_pieces(self, length: float, rounds: int = 2) -> list[list]:
        base = ROOT + SYSCALL_USER
        total = sum(w for _, w in DENTRY_PATHS)
        out = []
        for _ in range(rounds):
            for path, w in DENTRY_PATHS:
                out.append([length * w / total / rounds,
                            self.reg.get(base + tuple(kernel_label(n) for n in path))])
        return out

    def run(self):
        s = self.spec
        N, ph = s.ranks, s.phases
        shared = np.random.default_rng([s.seed, 0])
        rank_rng = [np.random.default_rng([s.seed, 1, r]) for r in range(N)]
        skews = (np.random.default_rng([s.seed, 2]).uniform(0, s.max_skew_ms, N) * NS_PER_MS).astype(np.int64)
        targets = set(s.targets)
        faulty = s.scenario != "healthy"
        ks = s.kernel_slowdown if s.scenario == "thermal" else 1.0
        host_scale = _host_scale(s) if s.scenario in ("logging", "io-bottleneck") else 1.0

        timelines = [[] for _ in range(N)]       # (start ms, stack id)
        starts = np.zeros(N)
        onset_time = np.full(N, np.inf)
        gpu, coll = [], []
        phase_names = list(ph)
        for it in range(s.iterations):
            g = dict(zip(phase_names, shared.lognormal(0, s.phase_jitter, len(phase_names))))
            gk = dict(zip(s.kernels, shared.lognormal(0, s.phase_jitter, len(s.kernels))))
            active = faulty and it >= s.onset
            pre = []
            entry = np.zeros(N)
            opt = np.zeros(N)
            for r in range(N):
                rng = rank_rng[r]
                h = dict(zip(phase_names, rng.lognormal(0, s.rank_jitter, len(phase_names))))
                hit = active and r in targets
                if hit and it == s.onset:
                    onset_time[r] = starts[r]
                d = {p: ph[p] * g[p] * h[p] for p in phase_names}
                if hit and s.scenario in ("logging", "io-bottleneck"):
                    for p in HOST_PHASES:
                        d[p] *= host_scale
                if hit and s.scenario == "thermal":
                    d["sync_tail"] *= ks
                iv: list[list] = []
                for p in ("dataloader", "forward", "backward"):
                    iv += [[d[p] * w, sid] for sid, w in self.variants[p]]
                if hit and s.scenario == "io-bottleneck":
                    iv[0][0] += s.magnitude * self.t0 * (1 + s.slowdown)
                if hit and s.scenario == "dentry-lock":
                    k = len(self.variants["dataloader"]) - 1
                    iv[k:k] = self.dentry_pieces(s.magnitude * self.t0)
                if hit and s.scenario == "logging":
                    iv.append([s.magnitude * self.t0 * (1 + s.slowdown), self.log_sid])
                if hit and s.scenario == "softirq":
                    crit = s.critical_fraction * s.magnitude * self.t0
                    span = sum(x[0] for x in iv)
                    n = max(1, round(crit / BURST_MS))
                    for at in reversed(_place(span, [crit / n] * n, rng)):
                        owner = self._owner(iv, at)
                        _insert(iv, at, self.irq_pieces(owner, crit / n))
                iv += [[d["sync_tail"] * w, sid] for sid, w in self.variants["sync_tail"]]
                pre.append(iv)
                entry[r] = starts[r] + sum(x[0] for x in iv)
                opt[r] = d["optimizer"]
                # Compute kernels end at entry; one event per kernel type.
                dur = {k: s.kernels[k] * gk[k] * rng.lognormal(0, s.rank_jitter) * (ks if hit else 1.0)
                       for k in s.kernels}
                t = entry[r] - sum(dur.values())
                for k, v in dur.items():
                    gpu.append((r, k, t, t + v))
                    t += v
            latest = entry.max()
            transfer = ph["collective"] * g["collective"]
            exits = latest + transfer + shared.uniform(0, s.exit_jitter_us / 1000.0, N)
            for r in range(N):
                rng = rank_rng[r]
                tl = timelines[r]
                t = starts[r]
                for dur, sid in pre[r]:
                    tl.append((t, sid))
                    t += dur
                wait = exits[r] - entry[r]
                call = min(0.1, 0.1 * wait)
                bursts = [BG_NET_RX_SHARE * self.t0]
                if active and r in targets and s.scenario == "softirq":
                    noncrit = (1 - s.critical_fraction) * s.magnitude * self.t0
                    n = max(1, round(noncrit / BURST_MS))
                    bursts += [noncrit / n] * n
                # Bursts that cannot fit in the wait are dropped rather than extend it.
                while bursts and sum(bursts) > 0.8 * (wait - call):
                    bursts.pop()
                tl.append((t, self.call_sid))
                t += call
                # Interrupt bursts during the wait replace wait time rather than extend it.
                pos = t
                offsets = _place(wait - call, bursts, rng) if bursts else []
                for at, ln in zip(offsets, bursts):
                    if pos < t + at:
                        tl.append((pos, self.wait_sid))
                    b0 = t + at
                    for dur, sid in self.irq_pieces(self.wait_sid, ln):
                        tl.append((b0, sid))
                        b0 += dur
                    pos = b0
                tl.append((pos, self.wait_sid))
                t = exits[r]
                for sid, w in self.variants["optimizer"]:
                    tl.append((t, sid))
                    t += opt[r] * w
                coll.append((r, entry[r], exits[r], transfer))
                starts[r] = t
        return timelines, starts, skews, onset_time, gpu, coll

    def _owner(self, iv: list[list], at: float) -> int:
        pos = 0.0
        for dur, sid in iv:
            if at <= pos + dur:
                return sid
            pos += dur
        return iv[-1][1]


def tick_times(start_ms: float, end_ms: float, rate: float, jitter: float,
               rng: np.random.Generator) -> np.ndarray:
    """Jittered sampling ticks in ``[start_ms, end_ms)``.

    Ticks sit on a grid with a random phase; each moves by up to
    ``jitter`` of the period without accumulating drift.
    """
    period = 1000.0 / rate
    phase = rng.uniform(0, period)
    n = max(int(np.ceil((end_ms - start_ms - phase) / period)), 0)
    t = start_ms + phase + period * np.arange(n)
    t += rng.uniform(-jitter, jitter, n) * period
    return np.clip(t, start_ms, np.nextafter(end_ms, start_ms))


def _os_records(spec: ScenarioSpec, rank: int, end_ms: float, skew_ns: int, onset_ms: float,
                rng: np.random.Generator) -> list[OsCounterRecord]:
    drain_ms = spec.drain_interval * 1000.0
    skew_ms = skew_ns / NS_PER_MS
    hit = spec.scenario == "softirq" and rank in spec.targets
    cum = {kind: {k: 0 for k in rates} for kind, rates in BASE_RATES.items()}
    numa = 0
    out = [OsCounterRecord(rank, 0, {k: 0 for k in cum["interrupts"]}, {k: 0 for k in cum["softirqs"]},
                           0, 0, 0)]
    k = 1
    prev = -skew_ms
    while True:
        stamp = k * drain_ms                      # rank clock
        now = min(stamp - skew_ms, end_ms)        # true time
        if now <= prev:
            break
        lo, hi = max(prev, 0.0), now
        dt = max(hi - lo, 0.0) / 1000.0
        faulty = max(hi - max(lo, onset_ms), 0.0) / 1000.0 if hit else 0.0
        for kind, rates in BASE_RATES.items():
            for name, rate in rates.items():
                boost = 9 if name in ("NET_RX", "virtio0-input.0") else 0
                cum[kind][name] += int(rng.poisson(rate * dt + boost * rate * faulty))
        numa += int(rng.poisson(NUMA_RATE * dt))
        p50 = int(20_000 * rng.lognormal(0, 0.05))
        p99 = int(250_000 * rng.lognormal(0, 0.1))
        out.append(OsCounterRecord(rank, int(round((now + skew_ms) * NS_PER_MS)),
                                   dict(cum["interrupts"]), dict(cum["softirqs"]), p50, p99, numa))
        if now >= end_ms:
            break
        prev = now
        k += 1
    return out


def generate(spec: ScenarioSpec) -> TraceBundle:
    """Simulate one communication group; identical specs give identical bundles."""
    spec = spec.resolved()
    spec.validate()
    gen = _Generator(spec)
    timelines, ends, skews, onset_time, gpu_raw, coll_raw = gen.run()
    factory = StackFactory(spec.clobber_mode, spec.seed)
    tick_rng = np.random.default_rng([spec.seed, 3])

    samples: list[StackSample] = []
    per_rank_counts = []
    by_sid = [factory.frames(labels) for labels in gen.reg.stacks]
    for r in range(spec.ranks):
        tl = timelines[r]
        t_start = np.array([t for t, _ in tl])
        sids = np.array([sid for _, sid in tl])
        ticks = tick_times(0.0, float(ends[r]), spec.sample_rate, spec.tick_jitter, tick_rng)
        idx = np.searchsorted(t_start, ticks, side="right") - 1
        stamps = np.rint(ticks * NS_PER_MS).astype(np.int64) + skews[r]
        per_rank_counts.append(int(ticks.size))
        thread = 1000 + r
        for ts, sid in zip(stamps.tolist(), sids[idx].tolist()):
            frames, flags = by_sid[sid]
            samples.append(StackSample(ts, r, thread, frames, flags))

    def ns(ms: float, r: int) -> int:
        return int(round(ms * NS_PER_MS)) + int(skews[r])

    gpu = sorted((GpuEvent(r, k, ns(a, r), ns(b, r)) for r, k, a, b in gpu_raw),
                 key=lambda e: (e.rank, e.start))
    coll = sorted((CollectiveEvent(r, spec.group, "AllReduce", ns(a, r), ns(b, r), int(x * NS_PER_MS))
                   for r, a, b, x in coll_raw), key=lambda e: (e.rank, e.host_entry))
    os_rng = np.random.default_rng([spec.seed, 4])
    os_counters = []
    for r in range(spec.ranks):
        os_counters += _os_records(spec, r, float(ends[r]), int(skews[r]), float(onset_time[r]), os_rng)

    binaries = [factory.trainer, factory.kernel]
    symbols = {b.build_id: pack_symbols(b.build_id, b.full_symbols) for b in binaries}
    meta = {
        "scenario": spec.scenario,
        "seed": spec.seed,
        "ranks": spec.ranks,
        "iterations": spec.iterations,
        "sample_rate": spec.sample_rate,
        "drain_interval": spec.drain_interval,
        "group": spec.group,
        "spec": spec.to_dict(),
        "duration_ns": [int(round(e * NS_PER_MS)) for e in ends.tolist()],
        "samples_per_rank": per_rank_counts,
        "distinct_stacks": len(gen.reg.stacks),
        "unwind_mismatches": factory.mismatches,
        "markers": factory.markers.counts(),
    }
    labels = make_label(spec, [int(x) for x in skews]).to_dict()
    return TraceBundle(meta, samples, gpu, coll, os_counters, binaries, symbols, labels)


def sample_budget(bundle: TraceBundle, rank: int) -> int:
    """``floor(sample_rate * duration)`` for one rank."""
    return int(bundle.meta["sample_rate"] * bundle.meta["duration_ns"][rank] / NS_PER_S)
