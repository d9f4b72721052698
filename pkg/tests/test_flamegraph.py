import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from strata.collector import FoldedProfile, aggregate_samples, to_folded
from strata.diagnosis import diff_flamegraph
from strata.flamegraph import NEUTRAL, build_tree, layout, one_sided, parse_diff, render_svg
from strata.sim import ScenarioSpec, generate, injected_path
from strata.symbols import Resolver

profiles = st.dictionaries(st.lists(st.sampled_from("abcde"), min_size=1, max_size=5).map(tuple),
                           st.integers(1, 500), min_size=1, max_size=25).map(FoldedProfile)


@settings(max_examples=100, deadline=None)
@given(profiles)
def test_children_nest_inside_parents(prof):
    rects = layout(build_tree(prof))
    assert rects[0].x == 0 and rects[0].width == 1 and rects[0].count == prof.total
    stack = []
    for r in rects:
        del stack[r.depth:]
        if stack:
            p = stack[-1]
            assert p.x - 1e-12 <= r.x and r.x + r.width <= p.x + p.width + 1e-12
        stack.append(r)
    # Siblings never overlap.
    by_depth = {}
    for r in rects:
        by_depth.setdefault(r.depth, []).append(r)
    for row in by_depth.values():
        row.sort(key=lambda r: r.x)
        for a, b in zip(row, row[1:]):
            assert a.x + a.width <= b.x + 1e-12


@settings(max_examples=60, deadline=None)
@given(profiles, profiles)
def test_parse_diff_inverts_diff_lines(a, b):
    a2, b2 = parse_diff(diff_flamegraph(a, b))
    assert a2.counts == a.counts and b2.counts == b.counts


@settings(max_examples=60, deadline=None)
@given(profiles)
def test_self_diff_is_neutral(prof):
    rects = layout(build_tree(prof, prof))
    assert all(r.delta == pytest.approx(0.0, abs=1e-12) for r in rects)
    svg = render_svg(prof, other=prof)
    fills = {part.split('"')[1] for part in svg.split('fill=')[2:]}
    assert fills == {NEUTRAL}


def test_svg_is_deterministic_and_escaped():
    prof = FoldedProfile({("main", "operator<<", "write"): 5, ("main", "run"): 3})
    svg = render_svg(prof, title="a & b")
    assert svg == render_svg(FoldedProfile(dict(reversed(list(prof.counts.items())))), title="a & b")
    assert "operator&lt;&lt;" in svg and "a &amp; b" in svg
    assert svg.startswith("<?xml") and svg.rstrip().endswith("</svg>")


def test_diff_colors_follow_direction():
    a = FoldedProfile({("m", "hot"): 60, ("m", "w"): 40})
    b = FoldedProfile({("m", "hot"): 20, ("m", "w"): 80})
    rects = {r.name: r for r in layout(build_tree(a, b))}
    assert rects["hot"].delta == pytest.approx(0.4) and rects["w"].delta == pytest.approx(-0.4)
    svg = render_svg(a, other=b)
    assert "rgb(255,0,0)" in svg and "rgb(0,0,255)" in svg


def test_softirq_diff_isolates_interrupt_chain():
    b = generate(ScenarioSpec("softirq", seed=0, iterations=40, onset=10))
    res = Resolver(b.symbol_source())
    windows = [w for w in aggregate_samples(b.samples, 5.0) if w.start >= 15 * 10**9]
    straggler = to_folded([w for w in windows if w.rank == 4], res)
    ref = to_folded([w for w in windows if w.rank == 0], res)
    only = one_sided(straggler, ref)
    assert set(injected_path("softirq")) <= set(only)
    assert sum(to_folded([w for w in aggregate_samples(b.samples, 5.0) if w.rank == 4], res)
               .counts.values()) == sum(1 for s in b.samples if s.rank == 4)
