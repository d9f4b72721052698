"""Layered differential diagnosis over one communication group.

The procedure: find a persistent straggler from aligned collective entry
lateness, then compare it with a reference rank layer by layer (GPU
kernel times, CPU profile against the group waterline, OS counters).
Without a straggler, a regression in iteration time triggers comparison
of the current group profile against the run's own early baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .bundle import GpuEvent, OsCounterRecord, TraceBundle
from .collector import (
    NS_PER_MS,
    CollectiveInstance,
    FoldedProfile,
    ProfileWindow,
    aggregate_samples,
    align_clocks,
    entry_lateness,
    match_collectives,
    to_folded,
)
from .symbols import Resolver

DEFAULT_WINDOW = 100
DEFAULT_K = 2.0
DEFAULT_DELTA = 0.005
DEFAULT_REGRESSION_GATE = 0.03

VERDICTS = ("gpu-uniform-slowdown", "gpu-specific-kernel", "cpu-interference",
            "os-interference", "temporal-degradation", "inconclusive", "healthy")
LAYERS = ("gpu", "cpu", "os")

OS_FLOORS = {"interrupts": 1000, "softirq": 1000, "sched": NS_PER_MS, "numa": 100}


class WaterlineUnavailable(ValueError):
    pass


# -- waterline -------------------------------------------------------------

@dataclass
class Waterline:
    group: str
    window: int
    k: float
    ranks: int
    mean: dict[str, float]
    std: dict[str, float]
    line_mean: dict[tuple[str, ...], float] = field(default_factory=dict)

    def threshold(self, function: str, k: float | None = None) -> float:
        k = self.k if k is None else k
        return self.mean.get(function, 0.0) + k * self.std.get(function, 0.0)


def compute_waterline(profiles: Mapping[int, FoldedProfile], window: int = DEFAULT_WINDOW,
                      group: str = "g0", k: float = DEFAULT_K) -> Waterline:
    """Per-function mean and population std of inclusive fractions across ranks.

    A function missing from a rank's profile counts as fraction 0 there.
    """
    if len(profiles) < 2:
        raise WaterlineUnavailable("waterline needs at least two ranks")
    if window < 2:
        raise ValueError("window must cover at least two iterations")
    per_rank = [p.inclusive_fractions() for p in profiles.values()]
    names = sorted(set().union(*per_rank))
    mat = np.array([[fr.get(n, 0.0) for n in names] for fr in per_rank]).reshape(len(per_rank), len(names))
    mean = mat.mean(axis=0)
    std = mat.std(axis=0)
    per_line = [p.line_fractions() for p in profiles.values()]
    lines = set().union(*per_line)
    line_mean = {ln: sum(pl.get(ln, 0.0) for pl in per_line) / len(per_line) for ln in lines}
    return Waterline(group, window, k, len(per_rank),
                     dict(zip(names, mean.tolist())), dict(zip(names, std.tolist())), line_mean)


def flag_ranks(waterline: Waterline, profiles: Mapping[int, FoldedProfile],
               k: float | None = None) -> list[tuple[int, str]]:
    """``(rank, function)`` pairs whose fraction strictly exceeds mean + k*std."""
    out = []
    for rank in sorted(profiles):
        for name, frac in sorted(profiles[rank].inclusive_fractions().items()):
            if frac > waterline.threshold(name, k):
                out.append((rank, name))
    return out


# -- straggler detection ---------------------------------------------------

@dataclass
class StragglerAlert:
    rank: int
    group: str
    lateness_mean: float
    z_score: float
    flagged_fraction: float
    window: tuple[int, int]

    def to_dict(self) -> dict:
        return {"rank": self.rank, "group": self.group, "lateness_mean_ms": self.lateness_mean,
                "z_score": self.z_score, "flagged_fraction": self.flagged_fraction,
                "window": list(self.window)}


def instance_flags(lateness: np.ndarray, k: float = DEFAULT_K) -> np.ndarray:
    """Boolean matrix: rank flagged in an instance when lateness > mean + k*std over ranks."""
    lat = np.atleast_2d(np.asarray(lateness, dtype=float))
    mu = lat.mean(axis=1, keepdims=True)
    sigma = lat.std(axis=1, keepdims=True)
    return lat > mu + k * sigma


def detect_straggler(lateness: np.ndarray, k: float = DEFAULT_K, ranks: Sequence[int] | None = None,
                     group: str = "g0", window: tuple[int, int] = (0, 0),
                     persistence: float = 0.5) -> list[StragglerAlert]:
    """Alerts for ranks flagged in more than ``persistence`` of the instances.

    ``lateness`` has shape (instances, ranks), in milliseconds. A rank
    must also stand out on its window-mean lateness (z > k).
    """
    lat = np.asarray(lateness, dtype=float)
    if lat.ndim != 2 or lat.shape[0] < 2 or lat.shape[1] < 2:
        raise ValueError("need at least two instances over at least two ranks")
    ranks = list(range(lat.shape[1])) if ranks is None else list(ranks)
    share = instance_flags(lat, k).mean(axis=0)
    means = lat.mean(axis=0)
    mu, sigma = means.mean(), means.std()
    alerts = []
    for j, r in enumerate(ranks):
        if share[j] <= persistence or sigma == 0:
            continue
        z = (means[j] - mu) / sigma
        if z > k:
            alerts.append(StragglerAlert(r, group, float(means[j]), float(z), float(share[j]), window))
    return sorted(alerts, key=lambda a: -a.z_score)


# -- GPU layer -------------------------------------------------------------

@dataclass
class GpuProfile:
    rank: int
    times: dict[str, int]
    window_ns: int

    @property
    def fractions(self) -> dict[str, float]:
        return {k: v / self.window_ns for k, v in self.times.items()} if self.window_ns else {}

    @classmethod
    def from_events(cls, events: Iterable[GpuEvent], rank: int, start: int, end: int) -> "GpuProfile":
        times: dict[str, int] = {}
        for e in events:
            if e.rank == rank and start <= e.start and e.end <= end:
                times[e.name] = times.get(e.name, 0) + e.duration
        return cls(rank, times, end - start)


@dataclass
class GpuDiff:
    verdict: str
    kernels: list[tuple[str, int, int, float]]
    note: str = ""


def gpu_diff(straggler: GpuProfile, reference: GpuProfile, floor_ns: int | None = None,
             uniform_median: float = 0.03, uniform_cv: float = 0.25,
             specific_share: float = 0.6, none_median: float = 0.01) -> GpuDiff:
    """Classify the kernel-time difference as ``uniform``, ``specific`` or ``none``.

    Only kernels whose reference time exceeds ``floor_ns`` (default 0.1%
    of the reference window) take part. ``kernels`` holds
    ``(name, straggler ns, reference ns, relative slowdown)`` sorted by
    added time.
    """
    floor_ns = reference.window_ns // 1000 if floor_ns is None else floor_ns
    common = sorted(n for n in straggler.times.keys() & reference.times.keys()
                    if reference.times[n] > floor_ns)
    if not common:
        return GpuDiff("none", [], "no common kernels above the floor")
    t_s = np.array([straggler.times[n] for n in common], dtype=float)
    t_r = np.array([reference.times[n] for n in common], dtype=float)
    s = t_s / t_r - 1.0
    added = t_s - t_r
    order = np.argsort(-added, kind="stable")
    rows = [(common[i], int(t_s[i]), int(t_r[i]), float(s[i])) for i in order]
    med = float(np.median(s))
    mean = float(s.mean())
    cv = float(s.std() / mean) if mean > 0 else math.inf
    if med > uniform_median and cv < uniform_cv:
        return GpuDiff("uniform", rows, f"median slowdown {med:.2%}, cv {cv:.3f}")
    positive = added[added > 0].sum()
    if positive > none_median * t_r.sum() and added[order[0]] > specific_share * positive:
        return GpuDiff("specific", rows, f"{rows[0][0]} carries {added[order[0]] / positive:.0%} of added time")
    return GpuDiff("none", rows, f"median slowdown {med:.2%}")


# -- CPU layer -------------------------------------------------------------

@dataclass
class CpuFinding:
    function: str
    fraction: float
    reference: float
    delta: float
    self_fraction: float
    path: tuple[str, ...]

    def to_dict(self) -> dict:
        return {"function": self.function, "fraction": self.fraction, "reference": self.reference,
                "delta": self.delta, "self_fraction": self.self_fraction, "path": list(self.path)}


def _hottest_path(function: str, lines: Mapping[tuple[str, ...], float],
                  ref_lines: Mapping[tuple[str, ...], float]) -> tuple[str, ...]:
    """Hottest descent through ``function``, by fraction increase over the reference.

    The prefix ending at ``function`` with the largest increase is chosen,
    then the path repeatedly follows the child frame with the largest
    positive increase, as one would read a differential flame graph.
    """
    def gain(items) -> float:
        return sum(lines.get(ln, 0.0) - ref_lines.get(ln, 0.0) for ln in items)

    by_prefix: dict[tuple[str, ...], list] = {}
    for line in lines:
        if function in line:
            by_prefix.setdefault(line[: line.index(function) + 1], []).append(line)
    if not by_prefix:
        return ()
    path, members = max(by_prefix.items(), key=lambda kv: (gain(kv[1]), kv[0]))
    depth = len(path)
    while True:
        children: dict[str, list] = {}
        for ln in members:
            if len(ln) > depth:
                children.setdefault(ln[depth], []).append(ln)
        if not children:
            return path
        name, sub = max(children.items(), key=lambda kv: (gain(kv[1]), kv[0]))
        if gain(sub) <= 0:
            return path
        path, members, depth = path + (name,), sub, depth + 1


def _rank_findings(found: list[CpuFinding]) -> list[CpuFinding]:
    return sorted(found, key=lambda f: (-f.delta, -f.self_fraction, f.function))


def cpu_diff(straggler: FoldedProfile, waterline: Waterline | None = None,
             reference: FoldedProfile | None = None, k: float | None = None,
             delta: float = DEFAULT_DELTA) -> list[CpuFinding]:
    """Functions running hotter on the straggler, hottest first.

    Against a waterline a function needs fraction > mean + k*std and
    fraction - mean > ``delta``; against a reference profile only the
    ``delta`` rule applies. Ties on delta go to the larger self fraction.
    """
    if (waterline is None) == (reference is None):
        raise ValueError("pass exactly one of waterline or reference")
    fracs = straggler.inclusive_fractions()
    selfs = straggler.self_fractions()
    lines = straggler.line_fractions()
    if waterline is not None:
        base = waterline.mean
        ref_lines = waterline.line_mean
    else:
        base = reference.inclusive_fractions()
        ref_lines = reference.line_fractions()
    found = []
    for name, frac in fracs.items():
        ref = base.get(name, 0.0)
        if frac - ref <= delta:
            continue
        if waterline is not None and not frac > waterline.threshold(name, k):
            continue
        found.append(CpuFinding(name, frac, ref, frac - ref, selfs.get(name, 0.0),
                                _hottest_path(name, lines, ref_lines)))
    return _rank_findings(found)


# -- OS layer --------------------------------------------------------------

@dataclass
class OsSnapshot:
    rank: int
    start: int
    end: int
    interrupts: dict[str, int]
    softirqs: dict[str, int]
    sched_delay_p50: int
    sched_delay_p99: int
    numa_migrations: int

    def counters(self) -> dict[str, int]:
        out = {f"interrupts/{k}": v for k, v in self.interrupts.items()}
        out.update({f"softirq/{k}": v for k, v in self.softirqs.items()})
        out["sched/delay_p99_ns"] = self.sched_delay_p99
        out["numa/migrations"] = self.numa_migrations
        return out


def os_snapshot(records: Sequence[OsCounterRecord], rank: int, start: int, end: int) -> OsSnapshot | None:
    """Difference cumulative counters across ``[start, end]`` for one rank."""
    rows = sorted((r for r in records if r.rank == rank), key=lambda r: r.timestamp)
    for a, b in zip(rows, rows[1:]):
        for kind in ("interrupts", "softirqs"):
            da, db = getattr(a, kind), getattr(b, kind)
            if any(db.get(key, 0) < v for key, v in da.items()):
                raise ValueError(f"rank {rank}: {kind} counter decreased at {b.timestamp}")
        if b.numa_migrations < a.numa_migrations:
            raise ValueError(f"rank {rank}: numa migrations decreased at {b.timestamp}")
    before = [r for r in rows if r.timestamp <= start]
    inside = [r for r in rows if start < r.timestamp <= end]
    if not inside:
        return None
    first = before[-1] if before else None
    last = inside[-1]

    def sub(kind: str) -> dict[str, int]:
        now = getattr(last, kind)
        then = getattr(first, kind) if first else {}
        return {k: v - then.get(k, 0) for k, v in now.items()}

    return OsSnapshot(
        rank, start, end, sub("interrupts"), sub("softirqs"),
        int(np.median([r.sched_delay_p50 for r in inside])),
        int(max(r.sched_delay_p99 for r in inside)),
        last.numa_migrations - (first.numa_migrations if first else 0),
    )


@dataclass
class OsFinding:
    counter: str
    straggler: float
    reference: float
    ratio: float

    def to_dict(self) -> dict:
        return {"counter": self.counter, "straggler": self.straggler, "reference": self.reference,
                "ratio": "inf" if math.isinf(self.ratio) else self.ratio}


def os_diff(straggler: OsSnapshot, reference: OsSnapshot, ratio: float = 2.0,
            floors: Mapping[str, float] = OS_FLOORS) -> list[OsFinding]:
    """Counters at least ``ratio`` times the reference and above the absolute floor."""
    s, r = straggler.counters(), reference.counters()
    out = []
    for name in sorted(s.keys() | r.keys()):
        sv, rv = s.get(name, 0), r.get(name, 0)
        floor = floors[name.split("/", 1)[0]]
        if sv - rv <= floor:
            continue
        if rv == 0:
            out.append(OsFinding(name, sv, rv, math.inf))
        elif sv / rv >= ratio:
            out.append(OsFinding(name, sv, rv, sv / rv))
    return sorted(out, key=lambda f: (-(f.straggler - f.reference), f.counter))


# -- temporal layer --------------------------------------------------------

@dataclass
class BaselineProfile:
    group: str
    epoch: str
    fractions: dict[str, float]
    delta: float = DEFAULT_DELTA
    lines: dict[tuple[str, ...], float] = field(default_factory=dict)

    @classmethod
    def from_profile(cls, profile: FoldedProfile, group: str = "g0", epoch: str = "baseline",
                     delta: float = DEFAULT_DELTA) -> "BaselineProfile":
        return cls(group, epoch, profile.inclusive_fractions(), delta, profile.line_fractions())


def temporal_diff(current: FoldedProfile, baseline: BaselineProfile | None,
                  delta: float | None = None) -> list[CpuFinding]:
    """Functions whose fraction grew by more than ``delta`` over the baseline."""
    if baseline is None:
        raise WaterlineUnavailable("no baseline for this group")
    delta = baseline.delta if delta is None else delta
    fracs = current.inclusive_fractions()
    selfs = current.self_fractions()
    lines = current.line_fractions()
    found = [
        CpuFinding(name, f, baseline.fractions.get(name, 0.0), f - baseline.fractions.get(name, 0.0),
                   selfs.get(name, 0.0), _hottest_path(name, lines, baseline.lines))
        for name, f in fracs.items() if f - baseline.fractions.get(name, 0.0) > delta
    ]
    return _rank_findings(found)


# -- differential output ---------------------------------------------------

def diff_flamegraph(a: FoldedProfile, b: FoldedProfile) -> list[str]:
    """``frames countA countB`` per stack line, missing side as 0."""
    if not a or not b:
        raise ValueError("both profiles must be non-empty")
    keys = sorted(a.counts.keys() | b.counts.keys())
    return [f"{';'.join(k)} {a.counts.get(k, 0)} {b.counts.get(k, 0)}" for k in keys]


def gpu_folded(profile: GpuProfile) -> FoldedProfile:
    """GPU kernel time as a folded profile in microseconds."""
    return FoldedProfile({("gpu", name): t // 1000 for name, t in profile.times.items() if t >= 1000})


# -- orchestration ---------------------------------------------------------

@dataclass
class Evidence:
    layer: str
    item: str
    straggler_value: float
    reference_value: float
    delta: float

    def to_dict(self) -> dict:
        return {"layer": self.layer, "item": self.item, "straggler_value": self.straggler_value,
                "reference_value": self.reference_value, "delta": self.delta}


@dataclass
class DiagnosisReport:
    verdict: str
    flagged_ranks: list[int]
    evidence: list[Evidence]
    diffs: dict[str, list[str]] = field(default_factory=dict)
    diff_files: list[str] = field(default_factory=list)
    reference_rank: int | None = None
    top_path: list[str] = field(default_factory=list)
    alerts: list[StragglerAlert] = field(default_factory=list)
    cpu_findings: list[CpuFinding] = field(default_factory=list)
    iteration_ms: tuple[float, float] | None = None
    notes: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.verdict not in VERDICTS:
            raise ValueError(f"unknown verdict {self.verdict!r}")

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "flagged_ranks": self.flagged_ranks,
            "evidence": [e.to_dict() for e in self.evidence],
            "differential_profiles": self.diff_files,
            "reference_rank": self.reference_rank,
            "top_path": self.top_path,
            "alerts": [a.to_dict() for a in self.alerts],
            "cpu_findings": [f.to_dict() for f in self.cpu_findings[:20]],
            "iteration_ms": None if self.iteration_ms is None else
            {"baseline": self.iteration_ms[0], "current": self.iteration_ms[1]},
            "notes": self.notes,
        }

    def summary(self) -> str:
        lines = [f"verdict: {self.verdict}"]
        if self.flagged_ranks:
            lines.append(f"flagged ranks: {', '.join(map(str, self.flagged_ranks))}"
                         f" (reference rank {self.reference_rank})")
        if self.iteration_ms:
            b, c = self.iteration_ms
            lines.append(f"iteration time: {c:.2f} ms now vs {b:.2f} ms baseline")
        if self.top_path:
            lines.append("top path: " + " -> ".join(self.top_path))
        for e in self.evidence[:12]:
            lines.append(f"  [{e.layer}] {e.item}: {e.straggler_value:.6g} vs "
                         f"{e.reference_value:.6g} (delta {e.delta:+.6g})")
        lines.extend(f"note: {n}" for n in self.notes)
        return "\n".join(lines)


@dataclass
class DiagnoseConfig:
    window: int = DEFAULT_WINDOW
    k: float = DEFAULT_K
    delta: float = DEFAULT_DELTA
    regression_gate: float = DEFAULT_REGRESSION_GATE
    persistence: float = 0.5
    uniform_median: float = 0.03
    uniform_cv: float = 0.25
    specific_share: float = 0.6


class _GroupView:
    """Shared per-bundle state: per-rank windows, folded caches, instance timing."""

    def __init__(self, bundle: TraceBundle) -> None:
        self.bundle = bundle
        self.ranks = bundle.ranks
        self.group = bundle.meta.get("group", "g0")
        self.resolver = Resolver(bundle.symbol_source())
        drain = bundle.meta.get("drain_interval", 5.0)
        self.windows: dict[int, list[ProfileWindow]] = {r: [] for r in self.ranks}
        for w in aggregate_samples(bundle.samples, drain):
            self.windows.setdefault(w.rank, []).append(w)
        self._folded: dict[tuple[int, int], FoldedProfile] = {}
        instances = match_collectives(bundle.collectives, self.ranks)
        self.offsets, self.aligned = align_clocks(instances)
        self.instances = [i for i in instances if i.complete]
        self.partial = len(instances) - len(self.instances)

    def folded(self, rank: int, start: int, end: int) -> FoldedProfile:
        """Merge the rank's drain windows whose midpoint falls in ``[start, end]``."""
        prof = FoldedProfile()
        for w in self.windows.get(rank, []):
            if start <= (w.start + w.end) // 2 <= end:
                key = (rank, w.start)
                if key not in self._folded:
                    self._folded[key] = to_folded(w, self.resolver)
                prof.merge(self._folded[key])
        return prof

    def bounds(self, rank: int, insts: Sequence[CollectiveInstance], prior: CollectiveInstance | None):
        start = prior.events[rank].host_exit if prior else 0
        return start, insts[-1].events[rank].host_exit

    def iteration_ms(self, insts: Sequence[CollectiveInstance]) -> float:
        exits = np.array([[i.events[r].host_exit for r in self.ranks] for i in insts], dtype=float)
        return float(np.diff(exits, axis=0).mean() / NS_PER_MS)


def diagnose(bundle: TraceBundle, config: DiagnoseConfig | None = None) -> DiagnosisReport:
    cfg = config or DiagnoseConfig()
    view = _GroupView(bundle)
    notes = []
    if not view.aligned:
        notes.append("no complete collective instance; clock alignment unavailable")
    if view.partial:
        notes.append(f"{view.partial} partial collective instances ignored")
    insts = view.instances
    if len(insts) < 2:
        notes.append("fewer than two complete collective instances")
        return DiagnosisReport("inconclusive", [], [], notes=notes)

    W = min(cfg.window, len(insts))
    cur = insts[-W:]
    cur_prior = insts[-W - 1] if len(insts) > W else None
    lat = np.array([[row[r] for r in view.ranks]
                    for row in (entry_lateness(i, view.offsets) for i in cur)])
    alerts = detect_straggler(lat, cfg.k, view.ranks, view.group,
                              (len(insts) - W, len(insts) - 1), cfg.persistence)
    if alerts:
        return _diagnose_straggler(view, cfg, cur, cur_prior, lat, alerts, notes)

    base = insts[:W]
    base_ms, cur_ms = view.iteration_ms(base), view.iteration_ms(cur)
    if len(insts) < 2 * W:
        notes.append(f"only {len(insts)} instances; baseline and current windows overlap")
    if cur_ms <= base_ms * (1 + cfg.regression_gate):
        return DiagnosisReport("healthy", [], [], iteration_ms=(base_ms, cur_ms), notes=notes)
    return _diagnose_temporal(view, cfg, base, cur, cur_prior, (base_ms, cur_ms), notes)


def _group_profile(view: _GroupView, insts, prior) -> FoldedProfile:
    prof = FoldedProfile()
    for r in view.ranks:
        prof.merge(view.folded(r, *view.bounds(r, insts, prior)))
    return prof


def _diagnose_temporal(view, cfg, base, cur, cur_prior, iteration_ms, notes) -> DiagnosisReport:
    evidence: list[Evidence] = []
    gpu_base = _group_gpu(view, base, None)
    gpu_cur = _group_gpu(view, cur, cur_prior)
    for name in sorted(gpu_base.keys() & gpu_cur.keys()):
        b, c = gpu_base[name], gpu_cur[name]
        evidence.append(Evidence("gpu", name, c, b, c - b))
    baseline_prof = _group_profile(view, base, None)
    current_prof = _group_profile(view, cur, cur_prior)
    diffs = {}
    findings: list[CpuFinding] = []
    if baseline_prof and current_prof:
        baseline = BaselineProfile.from_profile(baseline_prof, view.group, "initial-window", cfg.delta)
        findings = temporal_diff(current_prof, baseline, cfg.delta)
        diffs["cpu_current_vs_baseline"] = diff_flamegraph(current_prof, baseline_prof)
    else:
        notes.append("no CPU samples in baseline or current window")
    evidence += [Evidence("cpu", f.function, f.fraction, f.reference, f.delta) for f in findings]
    b_ms, c_ms = iteration_ms
    notes.append(f"iteration time up {c_ms / b_ms - 1:.1%} with no straggler")
    verdict = "temporal-degradation" if findings else "inconclusive"
    if not evidence:
        evidence.append(Evidence("cpu", "iteration_time_ms", c_ms, b_ms, c_ms - b_ms))
    return DiagnosisReport(verdict, [], evidence, diffs, top_path=list(findings[0].path) if findings else [],
                           cpu_findings=findings, iteration_ms=iteration_ms, notes=notes)


def _group_gpu(view: _GroupView, insts, prior) -> dict[str, float]:
    """Mean per-iteration kernel time (ms) across ranks."""
    total: dict[str, float] = {}
    for r in view.ranks:
        start, end = view.bounds(r, insts, prior)
        prof = GpuProfile.from_events(view.bundle.gpu_events, r, start, end)
        for name, t in prof.times.items():
            total[name] = total.get(name, 0.0) + t
    scale = NS_PER_MS * len(view.ranks) * len(insts)
    return {k: v / scale for k, v in total.items()}


def _diagnose_straggler(view, cfg, cur, cur_prior, lat, alerts, notes) -> DiagnosisReport:
    flagged = sorted(a.rank for a in alerts)
    means = lat.mean(axis=0)
    healthy = [r for r in sorted(view.ranks, key=lambda r: (means[view.ranks.index(r)], r))
               if r not in flagged]
    ref = healthy[(len(healthy) - 1) // 2] if healthy else None
    evidence: dict[str, list[Evidence]] = {layer: [] for layer in LAYERS}
    diffs: dict[str, list[str]] = {}
    conclusions: dict[str, str] = {}
    top_path: list[str] = []
    cpu_all: list[CpuFinding] = []
    if ref is None:
        notes.append("every rank flagged; no healthy reference")
        return DiagnosisReport("inconclusive", flagged, [Evidence("gpu", "lateness_ms", float(means.max()),
                               float(means.min()), float(means.max() - means.min()))],
                               reference_rank=None, alerts=alerts, notes=notes)

    # GPU layer.
    ref_bounds = view.bounds(ref, cur, cur_prior)
    ref_gpu = GpuProfile.from_events(view.bundle.gpu_events, ref, *ref_bounds)
    for s in flagged:
        s_gpu = GpuProfile.from_events(view.bundle.gpu_events, s, *view.bounds(s, cur, cur_prior))
        gd = gpu_diff(s_gpu, ref_gpu, uniform_median=cfg.uniform_median, uniform_cv=cfg.uniform_cv,
                      specific_share=cfg.specific_share)
        for name, ts, tr, rel in gd.kernels:
            evidence["gpu"].append(Evidence("gpu", f"rank{s}:{name}", s_gpu.fractions.get(name, 0.0),
                                            ref_gpu.fractions.get(name, 0.0), rel))
        if gd.note:
            notes.append(f"gpu rank {s} vs {ref}: {gd.note}")
        if gd.verdict == "uniform":
            conclusions.setdefault("gpu", "gpu-uniform-slowdown")
        elif gd.verdict == "specific":
            conclusions.setdefault("gpu", "gpu-specific-kernel")
        if s_gpu.times and ref_gpu.times:
            diffs[f"gpu_rank{s}_vs_rank{ref}"] = diff_flamegraph(gpu_folded(s_gpu), gpu_folded(ref_gpu))

    # CPU layer.
    profiles = {r: view.folded(r, *view.bounds(r, cur, cur_prior)) for r in view.ranks}
    profiles = {r: p for r, p in profiles.items() if p}
    if len(profiles) >= 2:
        wl = compute_waterline(profiles, cfg.window, view.group, cfg.k)
        for s in flagged:
            if s not in profiles:
                notes.append(f"no CPU samples for rank {s}")
                continue
            found = cpu_diff(profiles[s], waterline=wl, k=cfg.k, delta=cfg.delta)
            cpu_all.extend(found)
            evidence["cpu"] += [Evidence("cpu", f"rank{s}:{f.function}", f.fraction, f.reference, f.delta)
                                for f in found]
            if found:
                conclusions.setdefault("cpu", "cpu-interference")
                if not top_path:
                    top_path = list(found[0].path)
            if ref in profiles:
                diffs[f"cpu_rank{s}_vs_rank{ref}"] = diff_flamegraph(profiles[s], profiles[ref])
    else:
        notes.append("waterline unavailable: fewer than two ranks with CPU samples")

    # OS layer.
    ref_os = os_snapshot(view.bundle.os_counters, ref, *ref_bounds)
    for s in flagged:
        s_os = os_snapshot(view.bundle.os_counters, s, *view.bounds(s, cur, cur_prior))
        if s_os is None or ref_os is None:
            notes.append(f"no OS counters covering the window for rank {s} or {ref}")
            continue
        found = os_diff(s_os, ref_os)
        evidence["os"] += [Evidence("os", f"rank{s}:{f.counter}", f.straggler, f.reference,
                                    f.straggler - f.reference) for f in found]
        if found:
            conclusions.setdefault("os", "os-interference")

    verdict = next((conclusions[layer] for layer in LAYERS if layer in conclusions), "inconclusive")
    ordered = [e for layer in LAYERS for e in evidence[layer]]
    if not ordered:
        ordered.append(Evidence("gpu", "lateness_ms", float(means.max()), float(np.median(means)),
                                float(means.max() - np.median(means))))
    if verdict.startswith("gpu"):
        top_path = []
    return DiagnosisReport(verdict, flagged, ordered, diffs, reference_rank=ref, top_path=top_path,
                           alerts=alerts, cpu_findings=_rank_findings(cpu_all), notes=notes)
