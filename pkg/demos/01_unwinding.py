"""Unwinding stacks when some functions omit the frame pointer.

Run with ``python demos/01_unwinding.py``. The script builds a synthetic
binary, samples call chains through it and compares three unwinders
against the ground truth that produced each stack image.
"""

# %% A binary where one function in five omits the frame pointer
from strata.corpus import generate_unwind_corpus
from strata.unwind import MarkerMap, UnwindConfig, format_eval_table, unwind_corpus_eval

corpus = generate_unwind_corpus(functions=400, omits_fraction=0.2, samples=2000, seed=0)
binary = next(iter(corpus.process.binaries.values()))
print(f"binary {binary.name}: {len(binary.functions)} functions, "
      f"{binary.omits_fraction:.0%} omit the frame pointer")

# %% Frame-pointer walking stops or skips as soon as it meets an omitting frame.
# DWARF-only is exact but pays a table lookup per frame. The hybrid unwinder
# learns per-function markers and only consults the table where it must.
markers = MarkerMap()
cfg = UnwindConfig()
reports = [unwind_corpus_eval(corpus, mode, markers if mode == "hybrid" else None, cfg)
           for mode in ("fp-only", "dwarf-only", "hybrid")]
print(format_eval_table(reports))

# %% A second pass reuses the learned markers: no frame is unmarked any more,
# so the validation work of the first pass disappears. Table probes remain
# only for the functions that really need DWARF rules.
steady = unwind_corpus_eval(corpus, "hybrid", markers, cfg)
print("markers learned:", markers.counts())
for label, rep in (("first pass", reports[2]), ("second pass", steady)):
    c = rep.cost
    print(f"hybrid {label:11s} unmarked {c.unmarked_branches:4d}  validations {c.validations:4d}  "
          f"fp frames {c.fp_frames}  dwarf frames {c.dwarf_frames}")

# %% Where fp-only goes wrong: the accuracy histogram is bimodal.
# Stacks that avoid omitting functions are perfect; the rest lose their tails.
print("fp-only accuracy histogram (10 bins from 0 to 1):", reports[0].histogram())

# %% A stale frame pointer is harder: it points at a plausible older frame,
# so caller validation passes and whole frames are skipped silently.
stale = generate_unwind_corpus(functions=200, samples=500, clobber_mode="stale-fp", seed=1)
for mode in ("fp-only", "dwarf-only", "hybrid"):
    rep = unwind_corpus_eval(stale, mode, MarkerMap() if mode == "hybrid" else None, cfg)
    print(f"stale-fp {mode:10s} accuracy {rep.mean_accuracy:.3f}")
