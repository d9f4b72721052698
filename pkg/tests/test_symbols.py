import bisect
import hashlib
import os

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from strata.buildid import BuildId
from strata.corpus import misattribution_corpus
from strata.symbols import (
    EXACT,
    HEADER,
    NEAREST,
    IngestError,
    Repository,
    Resolver,
    SymbolFile,
    SymbolFormatError,
    ingest_symbols,
    name_concentration,
    open_symbol_file,
    pack_symbols,
    parse_symbols,
    resolve_stacks,
    segment_digests,
    unknown_frame,
)

BID = BuildId(bytes(range(20)))

entry_sets = st.dictionaries(
    st.integers(0, 2**48), st.tuples(st.integers(0, 2**20), st.text(min_size=1, max_size=30)),
    min_size=1, max_size=120,
).map(lambda d: sorted((s, z, n) for s, (z, n) in d.items()))


def oracle(entries, offset, mode):
    starts = [s for s, _, _ in entries]
    i = bisect.bisect_right(starts, offset) - 1
    if i < 0:
        return None
    s, z, n = entries[i]
    if mode == EXACT and (offset >= s + z if z else offset != s):
        return None
    return n


@settings(max_examples=150, deadline=None)
@given(entry_sets)
def test_pack_parse_round_trip(entries):
    bid, parsed = parse_symbols(pack_symbols(BID, entries))
    assert bid == BID
    assert [tuple(e) for e in parsed] == entries


@settings(max_examples=150, deadline=None)
@given(entry_sets, st.lists(st.integers(0, 2**48 + 2**21), min_size=1, max_size=20))
def test_lookup_matches_bisect_oracle_within_probe_bound(entries, offsets):
    f = SymbolFile(pack_symbols(BID, entries))
    for off in offsets:
        for mode in (EXACT, NEAREST):
            before = f.probes
            assert f.lookup(off, mode) == oracle(entries, off, mode)
            assert f.probes - before <= f.probe_bound


def test_duplicate_starts_and_empty_names_rejected():
    with pytest.raises(ValueError):
        pack_symbols(BID, [(16, 4, "a"), (16, 8, "b")])
    with pytest.raises(ValueError):
        pack_symbols(BID, [(16, 4, "")])


@pytest.mark.parametrize("mangle, message", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:10], "truncated"),
    (lambda b: b[:4] + (9).to_bytes(4, "little") + b[8:], "version"),
    (lambda b: b[: HEADER.size + 4], "entry array"),
])
def test_corrupt_files_raise_format_error(mangle, message):
    data = pack_symbols(BID, [(0, 16, "a"), (32, 16, "b")])
    with pytest.raises(SymbolFormatError, match=message):
        SymbolFile(mangle(data))


def test_nearest_lower_absorbs_gap_exact_range_does_not():
    data = pack_symbols(BID, [(0x1000, 0x100, "memcpy"), (0x9000, 0x10, "tail")])
    f = SymbolFile(data)
    assert f.lookup(0x5000, NEAREST) == "memcpy"
    assert f.lookup(0x5000, EXACT) is None
    assert f.lookup(0x0FFF, NEAREST) is None


def test_unknown_frame_rendering_and_resolver():
    other = BuildId(b"\xff" * 20)
    r = Resolver({BID: SymbolFile(pack_symbols(BID, [(0, 16, "f")]))})
    assert r.name(BID, 4) == "f"
    assert r.name(BID, 64) == unknown_frame(BID, 64) == f"[{BID.hex}+0x40]"
    assert r.name(other, 1).startswith("[ffff")
    with pytest.raises(ValueError):
        Resolver({}, "fuzzy")


def test_repository_ingest_is_idempotent_and_mmap_readable(tmp_path):
    repo = Repository(tmp_path)
    data = pack_symbols(BID, [(0, 16, "f"), (64, 16, "g")])
    assert ingest_symbols(repo, BID, data, digests=segment_digests(data)) == "stored"
    assert ingest_symbols(repo, BID, data) == "already-present"
    assert repo.path_for(BID) == tmp_path / "symbols" / BID.hex[:2] / f"{BID.hex}.symr"
    assert repo.get(BID).lookup(70) == "g"
    assert repo.build_ids() == [BID]
    f = open_symbol_file(repo.path_for(BID))
    assert f.lookup(3) == "f"


def test_ingest_digest_mismatch_leaves_nothing(tmp_path):
    repo = Repository(tmp_path)
    data = pack_symbols(BID, [(0, 16, "f")])
    with pytest.raises(IngestError, match="segment 0"):
        ingest_symbols(repo, BID, data, digests=[hashlib.sha256(b"nope").hexdigest()])
    assert BID not in repo
    assert not any(p.is_file() for p in tmp_path.rglob("*"))


def test_ingest_crash_between_segments_is_invisible(tmp_path):
    repo = Repository(tmp_path)
    entries = [(i * 32, 16, f"function_{i}") for i in range(200)]
    data = pack_symbols(BID, entries)

    def crash(index):
        if index == 1:
            raise KeyboardInterrupt

    with pytest.raises(KeyboardInterrupt):
        ingest_symbols(repo, BID, data, segment_size=1024, on_segment=crash)
    assert repo.get(BID) is None
    assert not list(tmp_path.rglob("*.partial"))
    assert ingest_symbols(repo, BID, data, segment_size=1024,
                          digests=segment_digests(data, 1024)) == "stored"
    assert repo.get(BID).lookup(33) == "function_1"


def test_ingest_rejects_build_id_mismatch(tmp_path):
    other = BuildId(b"\x01" * 20)
    with pytest.raises(IngestError, match="does not match"):
        ingest_symbols(Repository(tmp_path), other, pack_symbols(BID, [(0, 1, "f")]))


def test_misattribution_corpus_concentration():
    corpus = misattribution_corpus(samples=2000, seed=1)
    bid = corpus.binary.build_id
    sparse = {bid: SymbolFile(corpus.sparse_symbols())}
    full = {bid: SymbolFile(corpus.full_symbols())}
    top, share, _ = name_concentration(resolve_stacks(corpus.stacks, sparse, NEAREST))
    assert top == "pangu_memcpy_avx512" and share > 0.5
    top_e, share_e, distinct = name_concentration(resolve_stacks(corpus.stacks, full, EXACT))
    assert distinct >= 10 and share_e < 0.5
    # Nearest-lower over the full table is correct as well.
    assert name_concentration(resolve_stacks(corpus.stacks, full, NEAREST))[2] == distinct


def test_name_concentration_empty():
    assert name_concentration([]) == (None, 0.0, 0)
