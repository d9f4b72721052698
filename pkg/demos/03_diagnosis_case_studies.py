"""Diagnosing simulated training jobs, one fault at a time.

Run with ``python demos/03_diagnosis_case_studies.py [outdir]``. Each
case simulates eight ranks for 300 one-second iterations with a fault
injected from iteration 100, then runs the layered diagnosis. SVG
differential flame graphs for the cases are written to ``outdir``
(default: a temporary directory).
"""

# %% Setup
import sys
import tempfile
import time
from pathlib import Path

from strata.diagnosis import DiagnoseConfig, diagnose
from strata.flamegraph import parse_diff, render_svg
from strata.sim import ScenarioSpec, generate

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="strata-demo-"))
out.mkdir(parents=True, exist_ok=True)
cfg = DiagnoseConfig()


def case(scenario: str, seed: int = 0):
    t0 = time.perf_counter()
    bundle = generate(ScenarioSpec(scenario, seed=seed))
    report = diagnose(bundle, cfg)
    print(f"\n=== {scenario} (seed {seed}, {time.perf_counter() - t0:.1f} s) ===")
    print("injected:", bundle.labels["expected_verdict"], "on ranks",
          bundle.labels["flagged_ranks"] or bundle.labels["affected_ranks"])
    print(report.summary())
    for name, lines in report.diffs.items():
        a, b = parse_diff(lines)
        path = out / f"{scenario}_{name}.svg"
        path.write_text(render_svg(a, title=f"{scenario}: {name}", other=b))
    return bundle, report


# %% A healthy job: no rank lags, iteration time is flat, nothing to report
case("healthy")

# %% A thermally throttled GPU: one rank's kernels all run ~7% slower.
# The GPU layer sees a uniform slowdown across kernels and stops there.
case("thermal")

# %% Network interrupts pinned to the trainer's CPU: the GPU is idle-waiting,
# so the CPU layer compares the straggler against the waterline of all
# ranks and follows the hottest new path down to the interrupt handler.
case("softirq")

# %% Dentry lock contention looks the same from the outside: a CPU-side
# straggler. The differential profile names the kernel lock path instead.
case("dentry-lock")

# %% Synchronous logging slows every rank equally. There is no straggler,
# so the iteration-time gate triggers a comparison against the job's own
# earlier profile, which exposes the new logging path.
case("logging")

print(f"\nflame graphs in {out}")
