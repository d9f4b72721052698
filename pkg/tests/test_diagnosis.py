import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from strata.bundle import OsCounterRecord
from strata.collector import FoldedProfile
from strata.diagnosis import (
    BaselineProfile,
    DiagnosisReport,
    Evidence,
    GpuProfile,
    OsSnapshot,
    WaterlineUnavailable,
    compute_waterline,
    cpu_diff,
    detect_straggler,
    diff_flamegraph,
    flag_ranks,
    gpu_diff,
    instance_flags,
    os_diff,
    os_snapshot,
    temporal_diff,
)

lateness_rows = st.lists(st.floats(0, 50, allow_nan=False), min_size=2, max_size=16)


@settings(max_examples=100, deadline=None)
@given(lateness_rows, st.floats(-1000, 1000, allow_nan=False), st.floats(0.5, 3))
def test_flags_translation_invariant(row, shift, k):
    lat = np.array([row])
    a = instance_flags(lat, k)
    b = instance_flags(lat + shift, k)
    # Exclude knife-edge cases where rounding of the shift decides the comparison.
    margin = np.abs(lat - (lat.mean() + k * lat.std())) > 1e-9 * (1 + abs(shift))
    assert (a == b)[margin].all()


def test_two_of_eight_equal_outliers_need_lower_k():
    d = 1.0
    lat = np.array([[0.0] * 6 + [d, d]])
    mu = lat.mean()
    sigma = math.sqrt(((lat - mu) ** 2).mean())
    assert mu + 2 * sigma == pytest.approx((0.25 + math.sqrt(3) / 2) * d)
    assert not instance_flags(lat, 2.0).any()
    assert instance_flags(lat, 1.5)[0].tolist() == [False] * 6 + [True, True]


def test_single_outlier_oracle():
    lat = np.array([[0.0] * 7 + [0.6]])
    assert instance_flags(lat, 2.0)[0].tolist() == [False] * 7 + [True]


def test_detect_straggler_persistence_and_z():
    rng = np.random.default_rng(0)
    lat = rng.normal(0, 0.01, size=(100, 8)).clip(0)
    lat[40:, 3] += 0.6
    alerts = detect_straggler(lat, ranks=list(range(8)))
    assert [a.rank for a in alerts] == [3] and alerts[0].flagged_fraction >= 0.6
    transient = lat.copy()
    transient[:, 3] -= 0.6 * (np.arange(100) >= 40)
    transient[90:, 3] += 0.6
    assert detect_straggler(transient) == []
    with pytest.raises(ValueError):
        detect_straggler(lat[:1])


def test_waterline_requires_two_ranks_and_missing_function_is_zero():
    p = FoldedProfile({("a", "b"): 3, ("a",): 1})
    with pytest.raises(WaterlineUnavailable):
        compute_waterline({0: p})
    wl = compute_waterline({0: p, 1: FoldedProfile({("a",): 4})})
    assert wl.mean["b"] == pytest.approx(0.375) and wl.std["b"] == pytest.approx(0.375)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 64), st.integers(1, 999), st.integers(0, 999))
def test_waterline_mean_shift_is_delta_over_n(n, base, extra):
    total = 1000
    base_p = FoldedProfile({("m", "h"): base, ("m", "o"): total - base})
    hot = min(base + extra, total)
    out_p = FoldedProfile({("m", "h"): hot, ("m", "o"): total - hot} if hot < total else {("m", "h"): hot})
    m0 = compute_waterline({r: base_p for r in range(n)}).mean["h"]
    m1 = compute_waterline({**{r: base_p for r in range(n - 1)}, n - 1: out_p}).mean["h"]
    delta = out_p.inclusive_fractions()["h"] - base_p.inclusive_fractions()["h"]
    assert abs((m1 - m0) - delta / n) < 1e-14


def profiles_with_outlier(share, noise=0.0, n=8, total=10_000):
    out = {}
    for r in range(n):
        s = share if r == n - 1 else 0.01 + noise * (r % 3)
        hot = round(s * total)
        out[r] = FoldedProfile({("main", "loop", "hot"): hot, ("main", "loop", "work"): total - hot})
    return out


def test_cpu_diff_needs_both_sigma_and_delta():
    profs = profiles_with_outlier(0.013)
    wl = compute_waterline(profs)
    # Well above mean + 2 sigma but only 0.26% above the mean: no finding at delta 0.5%.
    assert (7, "hot") in flag_ranks(wl, profs)
    assert cpu_diff(profs[7], waterline=wl, delta=0.005) == []
    found = cpu_diff(profs[7], waterline=wl, delta=0.001)
    assert [f.function for f in found] == ["hot"]
    assert found[0].path == ("main", "loop", "hot")
    big = profiles_with_outlier(0.2)
    found = cpu_diff(big[7], waterline=compute_waterline(big))
    assert found[0].function == "hot" and found[0].delta == pytest.approx(0.2 - (0.01 * 7 + 0.2) / 8)


def test_cpu_diff_tie_prefers_larger_self_fraction():
    ref = FoldedProfile({("main", "x"): 100})
    cur = FoldedProfile({("main", "x"): 50, ("main", "x", "a", "b"): 50})
    found = cpu_diff(cur, reference=ref)
    assert [f.function for f in found] == ["b", "a"]   # equal deltas, b has the self time
    with pytest.raises(ValueError):
        cpu_diff(cur)


def test_hottest_path_follows_largest_gain():
    ref = FoldedProfile({("r", "s", "w"): 100})
    cur = FoldedProfile({("r", "s", "w"): 60, ("r", "s", "i", "j", "k"): 30, ("r", "s", "i", "q"): 10})
    found = cpu_diff(cur, reference=ref)
    assert found[0].function == "i"
    assert found[0].path == ("r", "s", "i", "j", "k")


def gpu(times, window=1_000_000_000, rank=0):
    return GpuProfile(rank, dict(times), window)


def test_gpu_diff_classification():
    ref = gpu({"fwd": 480, "softmax": 190, "drop": 150, "tiny": 1})
    uni = gpu({"fwd": 515, "softmax": 204, "drop": 161, "tiny": 5})
    assert gpu_diff(uni, ref, floor_ns=10).verdict == "uniform"
    spec = gpu({"fwd": 600, "softmax": 190, "drop": 151, "tiny": 1})
    d = gpu_diff(spec, ref, floor_ns=10)
    assert d.verdict == "specific" and d.kernels[0][0] == "fwd"
    none = gpu({"fwd": 481, "softmax": 190, "drop": 150, "tiny": 1})
    assert gpu_diff(none, ref, floor_ns=10).verdict == "none"
    assert gpu_diff(gpu({}), ref).verdict == "none"


def test_gpu_floor_excludes_negligible_kernels():
    ref = gpu({"fwd": 480_000_000, "tiny": 500_000})
    cur = gpu({"fwd": 480_000_000, "tiny": 5_000_000})
    assert [k[0] for k in gpu_diff(cur, ref).kernels] == ["fwd"]


def snap(rank, net_rx, sched=250_000, numa=10):
    return OsSnapshot(rank, 0, 1, {"virtio0-input.0": net_rx}, {"NET_RX": net_rx, "TIMER": 5000}, 20_000,
                      sched, numa)


def test_os_diff_ratio_and_floor():
    found = os_diff(snap(1, 20_000), snap(0, 2_000))
    assert {f.counter for f in found} == {"interrupts/virtio0-input.0", "softirq/NET_RX"}
    assert os_diff(snap(1, 1_400), snap(0, 500)) == []              # 2.8x but under the floor
    assert os_diff(snap(1, 30_000), snap(0, 20_000)) == []          # over the floor, under 2x
    inf = os_diff(snap(1, 5_000), snap(0, 0))
    assert all(math.isinf(f.ratio) for f in inf) and inf[0].to_dict()["ratio"] == "inf"


def test_os_snapshot_windows_and_monotonicity():
    rows = [OsCounterRecord(0, t, {"i": 10 * t}, {"s": t}, 1, 2, t) for t in range(0, 60, 10)]
    s = os_snapshot(rows, 0, 15, 45)
    assert s.interrupts == {"i": 300} and s.numa_migrations == 30
    assert os_snapshot(rows, 0, 100, 200) is None
    bad = rows + [OsCounterRecord(0, 70, {"i": 0}, {"s": 0}, 1, 2, 0)]
    with pytest.raises(ValueError, match="decreased"):
        os_snapshot(bad, 0, 0, 100)


def test_temporal_diff_and_missing_baseline():
    base = BaselineProfile.from_profile(FoldedProfile({("m", "w"): 1000}))
    cur = FoldedProfile({("m", "w"): 970, ("m", "log", "send"): 30})
    found = temporal_diff(cur, base)
    assert [f.function for f in found] == ["send", "log"]
    assert found[0].path == ("m", "log", "send")
    with pytest.raises(WaterlineUnavailable):
        temporal_diff(cur, None)


def test_diff_flamegraph_lines():
    a = FoldedProfile({("m", "x"): 2})
    b = FoldedProfile({("m", "y"): 3})
    assert diff_flamegraph(a, b) == ["m;x 2 0", "m;y 0 3"]
    with pytest.raises(ValueError):
        diff_flamegraph(a, FoldedProfile())


def test_report_rejects_unknown_verdict_and_serializes():
    with pytest.raises(ValueError):
        DiagnosisReport("broken", [], [])
    rep = DiagnosisReport("healthy", [], [Evidence("cpu", "x", 1.0, 0.5, 0.5)], iteration_ms=(1.0, 1.01))
    d = rep.to_dict()
    assert set(d) >= {"verdict", "flagged_ranks", "evidence", "differential_profiles"}
    assert d["iteration_ms"] == {"baseline": 1.0, "current": 1.01}
    assert "verdict: healthy" in rep.summary()
