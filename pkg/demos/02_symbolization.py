"""Build-id keyed symbolization, and how a sparse table misattributes samples.

Run with ``python demos/02_symbolization.py``.
"""

# %% A stripped library exports a handful of names; most of its code is anonymous
import tempfile
from collections import Counter

from strata.corpus import misattribution_corpus
from strata.symbols import (
    EXACT,
    NEAREST,
    Repository,
    Resolver,
    SymbolFile,
    ingest_symbols,
    name_concentration,
    resolve_stacks,
    segment_digests,
)

corpus = misattribution_corpus(samples=5000, seed=0)
bid = corpus.binary.build_id
print(f"build id {bid.hex}")
print(f"sparse table {len(corpus.sparse_symbols())} bytes, full table {len(corpus.full_symbols())} bytes")

# %% Nearest-lower lookup on the sparse table hands every unnamed hot spot
# to whichever exported symbol precedes it.
sparse = {bid: SymbolFile(corpus.sparse_symbols())}
names = resolve_stacks(corpus.stacks, sparse, NEAREST)
top, share, distinct = name_concentration(names)
print(f"nearest-lower, sparse: {top} absorbs {share:.1%} ({distinct} distinct names)")

# %% Exact-range lookup on the full table spreads the samples over the real functions
full = {bid: SymbolFile(corpus.full_symbols())}
names = resolve_stacks(corpus.stacks, full, EXACT)
leaves = Counter(stack[0] for stack in names)
for name, n in leaves.most_common(6):
    print(f"  {n / len(names):6.1%}  {name}")

# %% Exact-range on the sparse table refuses to guess and prints raw offsets instead
names = resolve_stacks(corpus.stacks, sparse, EXACT)
print("exact-range, sparse:", Counter(stack[0] for stack in names).most_common(2))

# %% Symbol files live in a repository keyed by build id. Uploads are
# checked segment by segment and become visible only when complete.
with tempfile.TemporaryDirectory() as root:
    repo = Repository(root)
    data = corpus.full_symbols()
    print(ingest_symbols(repo, bid, data, digests=segment_digests(data)))
    print(ingest_symbols(repo, bid, data))
    print("stored at", repo.path_for(bid).relative_to(root))
    print("frame resolves to", Resolver(repo).name(bid, corpus.stacks[0][0][1]))
