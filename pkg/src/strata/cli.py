"""Command-line entry point: ``strata <command> [options]``.

Exit codes: 0 success or healthy verdict, 2 usage or input error,
3 a non-healthy diagnosis verdict.

Options may also come from a JSON file given with ``--config``. Keys are
option names (``window``, ``k``, ``scenario`` ...), either at the top
level or nested under a command name; nested keys win. Explicit flags
override the file, which overrides built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .buildid import BuildId
from .bundle import BundleError, TraceBundle, load_bundle
from .collector import NS_PER_S, FoldedProfile, aggregate_samples, to_folded
from .corpus import generate_unwind_corpus, misattribution_corpus
from .diagnosis import DEFAULT_DELTA, DEFAULT_K, DEFAULT_WINDOW, DiagnoseConfig, diagnose, diff_flamegraph
from .flamegraph import render_svg
from .sim import SCENARIOS, ScenarioSpec, SpecError, generate
from .symbols import (
    EXACT,
    LOOKUP_MODES,
    IngestError,
    Repository,
    Resolver,
    SymbolFile,
    SymbolFormatError,
    ingest_symbols,
    name_concentration,
    open_symbol_file,
    pack_symbols,
    resolve_stacks,
)
from .unwind import MarkerMap, UnwindConfig, format_eval_table, unwind_corpus_eval
from .vproc import CLOBBER_MODES, VirtualBinary

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_ALERT = 3
BUNDLE_ENV = "STRATA_BUNDLE"
MODE_ALIASES = {"fp": "fp-only", "dwarf": "dwarf-only", "hybrid": "hybrid",
                "fp-only": "fp-only", "dwarf-only": "dwarf-only"}

log = logging.getLogger("strata")


class UsageError(Exception):
    """Bad input detected after argument parsing; maps to exit 2."""


# -- helpers ---------------------------------------------------------------

def _bundle_dir(args) -> Path:
    if not args.bundle:
        raise UsageError(f"no bundle given; pass --bundle or set {BUNDLE_ENV}")
    return Path(args.bundle)


def _load(args) -> TraceBundle:
    try:
        return load_bundle(_bundle_dir(args))
    except BundleError as exc:
        raise UsageError(str(exc)) from exc


def _check_rank(bundle: TraceBundle, rank: int) -> None:
    if rank not in bundle.ranks:
        raise UsageError(f"unknown rank {rank}; bundle has ranks 0..{len(bundle.ranks) - 1}")


def _rank_profile(bundle: TraceBundle, rank: int, start_s: float | None, end_s: float | None,
                  mode: str = EXACT) -> FoldedProfile:
    _check_rank(bundle, rank)
    lo = -1 if start_s is None else int(start_s * NS_PER_S)
    hi = None if end_s is None else int(end_s * NS_PER_S)
    samples = [s for s in bundle.samples
               if s.rank == rank and s.timestamp >= lo and (hi is None or s.timestamp < hi)]
    windows = aggregate_samples(samples, bundle.meta.get("drain_interval", 5.0))
    return to_folded(windows, Resolver(bundle.symbol_source(), mode))


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# -- commands --------------------------------------------------------------

def cmd_simulate(args) -> int:
    spec = ScenarioSpec(scenario=args.scenario, seed=args.seed, ranks=args.ranks,
                        iterations=args.iterations, sample_rate=args.sample_rate, onset=args.onset,
                        targets=tuple(args.targets) if args.targets else None,
                        magnitude=args.magnitude, slowdown=args.slowdown,
                        phase_jitter=args.phase_jitter, clobber_mode=args.clobber)
    try:
        bundle = generate(spec)
    except SpecError as exc:
        raise UsageError(f"invalid scenario: {exc}") from exc
    out = Path(args.out)
    digest = bundle.save(out)
    log.info("%d samples across %d ranks", len(bundle.samples), len(bundle.ranks))
    print(f"bundle {out} scenario={spec.scenario} seed={spec.seed}")
    print(f"digest {digest}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    bundle = _load(args)
    cfg = DiagnoseConfig(window=args.window, k=args.k, delta=args.delta)
    if cfg.window < 2 or cfg.k <= 0 or cfg.delta < 0:
        raise UsageError("window must be >= 2, k > 0 and delta >= 0")
    report = diagnose(bundle, cfg)
    out = Path(args.out)
    files = []
    for name, lines in sorted(report.diffs.items()):
        rel = f"diffs/{name}.folded"
        _write(out / rel, "".join(line + "\n" for line in lines))
        files.append(rel)
    report.diff_files = files
    _write(out / "report.json", json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    print(report.summary())
    print(f"report {out / 'report.json'}")
    return EXIT_OK if report.verdict == "healthy" else EXIT_ALERT


def cmd_flamegraph(args) -> int:
    bundle = _load(args)
    prof = _rank_profile(bundle, args.rank, args.start, args.end, args.lookup)
    out = Path(args.out)
    stem = f"rank{args.rank}"
    _write(out / f"{stem}.folded", prof.to_text())
    if not args.no_svg:
        _write(out / f"{stem}.svg", render_svg(prof, title=f"rank {args.rank} ({prof.total} samples)"))
    print(f"{prof.total} samples, {len(prof.counts)} distinct stacks -> {out / stem}.folded")
    return EXIT_OK


def cmd_diff(args) -> int:
    bundle = _load(args)
    a = _rank_profile(bundle, args.rank, args.start, args.end, args.lookup)
    b = _rank_profile(bundle, args.against, args.start, args.end, args.lookup)
    if not a or not b:
        raise UsageError("no samples in the selected range")
    out = Path(args.out)
    stem = f"rank{args.rank}_vs_rank{args.against}"
    _write(out / f"{stem}.folded", "".join(line + "\n" for line in diff_flamegraph(a, b)))
    if not args.no_svg:
        _write(out / f"{stem}.svg", render_svg(a, title=f"rank {args.rank} vs rank {args.against}", other=b))
    print(f"{a.total} vs {b.total} samples -> {out / stem}.folded")
    return EXIT_OK


def cmd_symbols_pack(args) -> int:
    try:
        binary = VirtualBinary.from_dict(json.loads(Path(args.binary).read_text()))
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"{args.binary}: {exc}") from exc
    table = binary.sparse_symbols if args.sparse else binary.full_symbols
    data = pack_symbols(binary.build_id, table)
    out = Path(args.out) if args.out else Path(f"{binary.build_id.hex}.symr")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(data)
    print(f"{out} build_id={binary.build_id.hex} entries={len(table)} bytes={len(data)}")
    return EXIT_OK


def cmd_symbols_ingest(args) -> int:
    repo = Repository(args.repo)
    for path in args.files:
        try:
            f = open_symbol_file(path)
            bid = f.build_id
            f.close()
            with open(path, "rb") as fh:
                status = ingest_symbols(repo, bid, fh)
        except (OSError, SymbolFormatError, IngestError) as exc:
            raise UsageError(f"{path}: {exc}") from exc
        print(f"{bid.hex} {status}")
    return EXIT_OK


def cmd_symbols_resolve(args) -> int:
    if args.build_id is not None:
        if not args.repo or args.offset is None:
            raise UsageError("single lookups need --repo, --build-id and --offset")
        try:
            bid = BuildId.from_hex(args.build_id)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        print(Resolver(Repository(args.repo), args.mode).name(bid, int(args.offset, 0)))
        return EXIT_OK
    corpus = misattribution_corpus(samples=args.samples, seed=args.seed)
    data = corpus.sparse_symbols() if args.table == "sparse" else corpus.full_symbols()
    source = {corpus.binary.build_id: SymbolFile(data)}
    names = resolve_stacks(corpus.stacks, source, args.mode)
    top, share, distinct = name_concentration(names)
    report = {"mode": args.mode, "table": args.table, "samples": len(names),
              "top_name": top, "top_share": share, "distinct_names": distinct}
    if args.json:
        print(json.dumps(report, indent=2, sort_keys=True))
    else:
        print(f"mode={args.mode} table={args.table} samples={len(names)}")
        print(f"top name {top!r} absorbs {share:.1%} of samples; {distinct} distinct leaf names")
    return EXIT_OK


def cmd_unwind_eval(args) -> int:
    modes = ["fp-only", "dwarf-only", "hybrid"] if args.mode == "all" else [MODE_ALIASES[args.mode]]
    if not 0 <= args.omits_fraction <= 1 or not 0 <= args.indirect_fraction <= 1:
        raise UsageError("fractions must lie in [0, 1]")
    corpus = generate_unwind_corpus(functions=args.functions, omits_fraction=args.omits_fraction,
                                    samples=args.samples, depth_mean=args.depth_mean,
                                    indirect_fraction=args.indirect_fraction,
                                    clobber_mode=args.clobber, seed=args.seed)
    config = UnwindConfig(max_frames=args.max_frames)
    reports, passes = [], {}
    for mode in modes:
        markers = MarkerMap() if mode == "hybrid" else None
        rep = unwind_corpus_eval(corpus, mode, markers, config)
        if mode == "hybrid":
            steady = unwind_corpus_eval(corpus, mode, markers, config)
            passes = {"first_pass": rep.to_dict(), "second_pass": steady.to_dict(),
                      "markers": markers.counts()}
        reports.append(rep)
    print(format_eval_table(reports))
    doc = {"corpus": {"functions": args.functions, "omits_fraction": args.omits_fraction,
                      "samples": args.samples, "depth_mean": args.depth_mean,
                      "indirect_fraction": args.indirect_fraction, "clobber_mode": args.clobber,
                      "seed": args.seed},
           "modes": [r.to_dict() for r in reports]}
    if passes:
        doc["hybrid_passes"] = passes
    out = Path(args.out)
    _write(out / "unwind_eval.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out / 'unwind_eval.json'}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------

def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="JSON file of option defaults")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    return p


def _bundle_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--bundle", default=os.environ.get(BUNDLE_ENV),
                   help=f"trace bundle directory (default: ${BUNDLE_ENV})")


def _range_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--start", type=float, help="start time in seconds on the rank clock")
    p.add_argument("--end", type=float, help="end time in seconds on the rank clock")
    p.add_argument("--lookup", choices=LOOKUP_MODES, default=EXACT, help="symbol lookup mode")
    p.add_argument("--no-svg", action="store_true", help="write folded text only")
    p.add_argument("--out", default="out")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    common = _common()
    parser = argparse.ArgumentParser(prog="strata", description=__doc__.split("\n")[0],
                                     parents=[common])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    subs: dict[str, argparse.ArgumentParser] = {}

    p = subs["simulate"] = sub.add_parser("simulate", parents=[common], help="generate a trace bundle")
    p.add_argument("--scenario", choices=SCENARIOS, default="healthy")
    p.add_argument("--ranks", type=int, default=8)
    p.add_argument("--iterations", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sample-rate", type=float, default=99.0)
    p.add_argument("--onset", type=int, default=100, help="first faulty iteration")
    p.add_argument("--targets", type=int, nargs="+", help="faulty ranks (scenario default if omitted)")
    p.add_argument("--magnitude", type=float, help="fault magnitude (scenario default if omitted)")
    p.add_argument("--slowdown", type=float, help="iteration slowdown for uniform faults")
    p.add_argument("--phase-jitter", type=float, default=0.01, help="lognormal sigma of phase durations")
    p.add_argument("--clobber", choices=CLOBBER_MODES, default="garbage-fp")
    p.add_argument("--out", default="bundle", help="bundle directory to write")
    p.set_defaults(func=cmd_simulate)

    p = subs["diagnose"] = sub.add_parser("diagnose", parents=[common], help="diagnose a bundle")
    _bundle_opts(p)
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW, help="collective instances per window")
    p.add_argument("--k", type=float, default=DEFAULT_K, help="sigma multiplier")
    p.add_argument("--delta", type=float, default=DEFAULT_DELTA, help="minimum absolute fraction gap")
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_diagnose)

    p = subs["flamegraph"] = sub.add_parser("flamegraph", parents=[common],
                                            help="folded profile and SVG for one rank")
    _bundle_opts(p)
    _range_opts(p)
    p.set_defaults(func=cmd_flamegraph)

    p = subs["diff"] = sub.add_parser("diff", parents=[common], help="differential profile of two ranks")
    _bundle_opts(p)
    _range_opts(p)
    p.add_argument("--against", type=int, required=True, help="reference rank")
    p.set_defaults(func=cmd_diff)

    p = subs["symbols"] = sub.add_parser("symbols", parents=[common], help="symbol file tools")
    ssub = p.add_subparsers(dest="symbols_command", required=True, metavar="ACTION")
    q = subs["symbols pack"] = ssub.add_parser("pack", parents=[common],
                                               help="write a symbol file for a binary JSON")
    q.add_argument("--binary", required=True)
    q.add_argument("--sparse", action="store_true", help="pack only exported symbols")
    q.add_argument("--out")
    q.set_defaults(func=cmd_symbols_pack)
    q = subs["symbols ingest"] = ssub.add_parser("ingest", parents=[common],
                                                 help="store symbol files in a repository")
    q.add_argument("--repo", required=True)
    q.add_argument("files", nargs="+")
    q.set_defaults(func=cmd_symbols_ingest)
    q = subs["symbols resolve"] = ssub.add_parser(
        "resolve", parents=[common],
        help="symbolize the misattribution corpus, or one frame from a repository")
    q.add_argument("--mode", choices=LOOKUP_MODES, default=EXACT)
    q.add_argument("--table", choices=("sparse", "full"), default="sparse",
                   help="symbol table for the corpus")
    q.add_argument("--samples", type=int, default=5000)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--repo")
    q.add_argument("--build-id")
    q.add_argument("--offset", help="module offset, decimal or 0x hex")
    q.add_argument("--json", action="store_true")
    q.set_defaults(func=cmd_symbols_resolve)

    p = subs["unwind-eval"] = sub.add_parser("unwind-eval", parents=[common],
                                             help="score unwinding modes on a synthetic corpus")
    p.add_argument("--mode", choices=("fp", "dwarf", "hybrid", "fp-only", "dwarf-only", "all"),
                   default="all")
    p.add_argument("--functions", type=int, default=400)
    p.add_argument("--omits-fraction", type=float, default=0.2)
    p.add_argument("--indirect-fraction", type=float, default=0.0)
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--depth-mean", type=float, default=25.0)
    p.add_argument("--max-frames", type=int, default=UnwindConfig().max_frames)
    p.add_argument("--clobber", choices=CLOBBER_MODES, default="garbage-fp")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_unwind_eval)
    return parser, subs


def _config_defaults(path: str, command: str, parser: argparse.ArgumentParser) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise UsageError(f"{path}: cannot read config ({exc})") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    known = {a.dest for a in parser._actions} - {"help", "func", "config"}
    # Shared top-level keys apply where the command has such an option.
    merged = {k.replace("-", "_"): v for k, v in doc.items() if not isinstance(v, dict)}
    merged = {k: v for k, v in merged.items() if k in known}
    for part in (command.split()[0], command):
        nested = doc.get(part)
        if isinstance(nested, dict):
            own = {k.replace("-", "_"): v for k, v in nested.items() if not isinstance(v, dict)}
            unknown = sorted(set(own) - known)
            if unknown:
                raise UsageError(f"{path}: unknown {part} options {', '.join(unknown)}")
            merged.update(own)
    return merged


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser, subs = build_parser()
    args = parser.parse_args(argv)   # exits 2 on usage errors
    command = args.command + (f" {args.symbols_command}" if args.command == "symbols" else "")
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config:
            sp = subs[command]
            defaults = _config_defaults(args.config, command, sp)
            # Re-parse so explicit flags beat config values, which beat defaults.
            for a in sp._actions:
                if a.dest in defaults:
                    a.required = False
            sp.set_defaults(**defaults)
            args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"strata {command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
