import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from strata.buildid import BuildId
from strata.corpus import call_site, chain_offsets, corpus_binary, generate_unwind_corpus, leaf_pc
from strata.unwind import (
    CompiledFdeTable,
    FdeTableError,
    Marker,
    MarkerMap,
    UnwindConfig,
    compile_tables,
    frame_accuracy,
    stitch_stacks,
    unwind_corpus_eval,
    unwind_dwarf_only,
    unwind_fp_only,
    unwind_hybrid,
)
from strata.vproc import (
    GroundTruthStack,
    InterpreterFrame,
    CfiRule,
    build_binary,
    frame_sps,
    layout_process,
    synthesize_stack_image,
    PRESERVES,
)

BIN = corpus_binary(functions=80, omits_fraction=0.25, indirect_fraction=0.3, seed=5)
PROC = layout_process([BIN])
TABLES = compile_tables(PROC)
chains = st.lists(st.integers(0, len(BIN.functions) - 1), min_size=1, max_size=40)


def truth_of(idx):
    fns = [BIN.functions[i] for i in idx]
    frames = [(BIN.build_id, leaf_pc(fns[0]))] + [(BIN.build_id, call_site(f)) for f in fns[1:]]
    return GroundTruthStack(tuple(frames))


@settings(max_examples=80, deadline=None)
@given(chains, st.integers(0, 2**31))
def test_hybrid_and_dwarf_recover_simple_and_indirect_chains(idx, seed):
    truth = truth_of(idx)
    img = synthesize_stack_image(truth, PROC, "garbage-fp", seed=seed)
    hyb = unwind_hybrid(img.registers, img, PROC, MarkerMap(), TABLES)
    dw = unwind_dwarf_only(img.registers, img, PROC, TABLES)
    assert tuple(hyb.frames) == truth.frames
    assert tuple(dw.frames) == truth.frames
    assert hyb.termination == dw.termination == "completed"


@settings(max_examples=60, deadline=None)
@given(chains, st.integers(0, 2**31))
def test_fp_only_keeps_exactly_the_prefix_up_to_first_omitting_frame(idx, seed):
    truth = truth_of(idx)
    img = synthesize_stack_image(truth, PROC, "garbage-fp", seed=seed)
    res = unwind_fp_only(img.registers, img, PROC)
    omit = [BIN.functions[i].omits_fp for i in idx]
    cut = omit.index(True) + 1 if True in omit else len(idx)
    assert tuple(res.frames[:cut]) == truth.frames[:cut]
    assert len(res.frames) == cut
    assert frame_accuracy(res.frames, truth) == pytest.approx(cut / len(idx))


def test_fp_only_is_exact_on_all_preserving_corpus():
    corpus = generate_unwind_corpus(functions=50, omits_fraction=0.0, samples=300, seed=3)
    assert unwind_corpus_eval(corpus, "fp-only").mean_accuracy == 1.0
    assert unwind_corpus_eval(corpus, "hybrid").mean_accuracy == 1.0


def test_fp_only_accuracy_matches_analytic_expectation():
    corpus = generate_unwind_corpus(functions=200, omits_fraction=0.2, samples=3000, seed=9)
    binary = next(iter(corpus.process.binaries.values()))
    expected = []
    for _, truth in corpus.samples:
        omit = [binary.function_at(o).omits_fp for _, o in truth.frames]
        cut = omit.index(True) + 1 if True in omit else len(omit)
        expected.append(cut / len(omit))
    got = unwind_corpus_eval(corpus, "fp-only").accuracies
    assert np.allclose(got, expected)
    assert np.mean(expected) < 0.5


def test_hybrid_stale_fp_is_misattributed_not_recovered():
    corpus = generate_unwind_corpus(functions=100, omits_fraction=0.2, samples=400, clobber_mode="stale-fp", seed=1)
    assert unwind_corpus_eval(corpus, "dwarf-only").mean_accuracy == 1.0
    # Validation only checks that the caller PC is mapped; a stale FP passes it.
    assert unwind_corpus_eval(corpus, "hybrid").mean_accuracy < 1.0


def test_indirect_share_of_dwarf_steps():
    corpus = generate_unwind_corpus(functions=400, omits_fraction=0.2, indirect_fraction=0.05,
                                    samples=2000, seed=4)
    rep = unwind_corpus_eval(corpus, "hybrid")
    share = rep.cost.slow_path_steps / rep.cost.dwarf_frames
    assert 0.02 < share < 0.09


def test_markers_converge_and_second_pass_skips_validation():
    corpus = generate_unwind_corpus(functions=100, omits_fraction=0.2, samples=500, seed=2)
    markers = MarkerMap()
    first = unwind_corpus_eval(corpus, "hybrid", markers)
    second = unwind_corpus_eval(corpus, "hybrid", markers)
    assert first.cost.unmarked_branches == len(markers) == 100
    assert second.cost.unmarked_branches == 0 and second.cost.validations == 0
    assert markers.counts() == {"fp": 80, "dwarf": 20}
    binary = next(iter(corpus.process.binaries.values()))
    for (bid, start), m in markers.items():
        assert (m is Marker.DWARF) == binary.function_at(start).omits_fp


def test_marker_set_once_first_writer_wins():
    mm = MarkerMap()
    key = (BIN.build_id, 0)
    results = []
    barrier = threading.Barrier(8)

    def worker(i):
        barrier.wait()
        results.append(mm.set_once(key, Marker.FP if i % 2 else Marker.DWARF))

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(set(results)) == 1 and mm.get(key) is results[0]
    with pytest.raises(ValueError):
        mm.set_once(key, Marker.UNMARKED)


def test_max_frames_truncates():
    truth = truth_of(list(range(30)))
    img = synthesize_stack_image(truth, PROC)
    res = unwind_hybrid(img.registers, img, PROC, MarkerMap(), TABLES, UnwindConfig(max_frames=5))
    assert res.termination == "max_frames" and tuple(res.frames) == truth.frames[:5]


def test_fde_table_rejects_overlap_and_misses_gaps():
    bid = BuildId.digest_of(b"t")
    with pytest.raises(FdeTableError):
        CompiledFdeTable.from_rules(bid, [CfiRule(0, 32), CfiRule(16, 48)])
    table = CompiledFdeTable.from_rules(bid, [CfiRule(0, 32), CfiRule(64, 96)])
    assert table.lookup(40) is None and table.lookup(100) is None
    assert table.lookup(70).pc_start == 64


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5000), st.data())
def test_fde_lookup_probe_bound(m, data):
    bid = BuildId.digest_of(b"p")
    table = CompiledFdeTable.from_rules(bid, (CfiRule(8 * i, 8 * i + 8) for i in range(m)))
    off = data.draw(st.integers(0, 8 * m + 8))
    assert table.lookup_probes(off) <= math.ceil(math.log2(m)) + 1
    rule = table.lookup(off)
    assert (rule is None) == (off >= 8 * m) and (rule is None or rule.pc_start <= off < rule.pc_end)


def test_stitching_replaces_eval_runs_with_interpreter_frames():
    b = build_binary({"name": "py", "functions": [
        {"name": n, "length": 64, "fp": PRESERVES, "frame_size": 32}
        for n in ("builtin_leaf", "_PyEval_EvalFrameDefault", "PyObject_Call", "main")]})
    proc = layout_process([b])
    names = ["builtin_leaf", "_PyEval_EvalFrameDefault", "_PyEval_EvalFrameDefault", "PyObject_Call", "main"]
    truth = chain_offsets(b, names)
    sps = frame_sps(truth, proc)
    chain = [InterpreterFrame("inner.py:f", 3, sps[1]), InterpreterFrame("outer.py:g", 9, sps[2]),
             InterpreterFrame("lost.py:h", 1, sps[4] + 4096)]
    img = synthesize_stack_image(truth, proc, interpreter_chain=chain)
    res = unwind_hybrid(img.registers, img, proc, MarkerMap(), compile_tables(proc))
    evals = {(b.build_id, b.function_named("_PyEval_EvalFrameDefault").offset)}
    out = stitch_stacks(res, chain, evals, proc)
    assert out.frames[0] == truth.frames[0]
    assert out.frames[1:3] == chain[:2]
    assert out.frames[3:] == list(truth.frames[3:])
    assert out.orphans == [chain[2]]
