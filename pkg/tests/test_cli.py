import json

import pytest

from strata.cli import BUNDLE_ENV, EXIT_ALERT, EXIT_OK, EXIT_USAGE, main
from strata.flamegraph import parse_diff

SMALL = ["--iterations", "40", "--onset", "10"]


@pytest.fixture(scope="module")
def bundles(tmp_path_factory):
    root = tmp_path_factory.mktemp("bundles")
    out = {}
    for name in ("healthy", "softirq"):
        assert main(["simulate", "--scenario", name, "--seed", "1", *SMALL, "--out", str(root / name)]) == 0
        out[name] = root / name
    return out


def digest_line(capsys):
    return [line for line in capsys.readouterr().out.splitlines() if line.startswith("digest")][0]


def test_simulate_is_deterministic(tmp_path, capsys):
    main(["simulate", "--scenario", "thermal", "--seed", "3", *SMALL, "--out", str(tmp_path / "a")])
    first = digest_line(capsys)
    main(["simulate", "--scenario", "thermal", "--seed", "3", *SMALL, "--out", str(tmp_path / "b")])
    assert digest_line(capsys) == first
    assert (tmp_path / "a" / "samples.jsonl").read_bytes() == (tmp_path / "b" / "samples.jsonl").read_bytes()


def test_unknown_scenario_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--scenario", "nope"])
    assert exc.value.code == EXIT_USAGE


def test_invalid_spec_exits_two(tmp_path, capsys):
    assert main(["simulate", "--ranks", "1", *SMALL, "--out", str(tmp_path)]) == EXIT_USAGE
    assert "ranks" in capsys.readouterr().err


def test_diagnose_exit_codes_and_report(bundles, tmp_path):
    assert main(["diagnose", "--bundle", str(bundles["healthy"]), "--window", "25",
                 "--out", str(tmp_path / "h")]) == EXIT_OK
    assert main(["diagnose", "--bundle", str(bundles["softirq"]), "--window", "25",
                 "--out", str(tmp_path / "s")]) == EXIT_ALERT
    rep = json.loads((tmp_path / "s" / "report.json").read_text())
    assert rep["verdict"] == "cpu-interference" and rep["flagged_ranks"] == [4]
    assert rep["evidence"] and rep["differential_profiles"]
    for rel in rep["differential_profiles"]:
        assert (tmp_path / "s" / rel).is_file()


def test_truncated_bundle_names_missing_file(bundles, tmp_path, capsys):
    import shutil
    copy = tmp_path / "bundle"
    shutil.copytree(bundles["healthy"], copy)
    (copy / "collectives.jsonl").unlink()
    assert main(["diagnose", "--bundle", str(copy), "--out", str(tmp_path / "o")]) == EXIT_USAGE
    assert "collectives.jsonl" in capsys.readouterr().err


def test_unknown_rank(bundles, tmp_path, capsys):
    assert main(["flamegraph", "--bundle", str(bundles["healthy"]), "--rank", "9",
                 "--out", str(tmp_path)]) == EXIT_USAGE
    assert "unknown rank 9" in capsys.readouterr().err


def test_flamegraph_and_self_diff(bundles, tmp_path):
    b = str(bundles["softirq"])
    assert main(["flamegraph", "--bundle", b, "--rank", "4", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "rank4.svg").read_text().startswith("<?xml")
    assert main(["diff", "--bundle", b, "--rank", "2", "--against", "2", "--out", str(tmp_path)]) == 0
    a, c = parse_diff((tmp_path / "rank2_vs_rank2.folded").read_text().splitlines())
    assert a.counts == c.counts and a.total > 0
    assert main(["diff", "--bundle", b, "--rank", "4", "--against", "0", "--start", "15",
                 "--no-svg", "--out", str(tmp_path)]) == 0
    text = (tmp_path / "rank4_vs_rank0.folded").read_text()
    assert "asm_common_interrupt_[k]" in text and not (tmp_path / "rank4_vs_rank0.svg").exists()


def test_bundle_from_environment(bundles, tmp_path, monkeypatch):
    monkeypatch.setenv(BUNDLE_ENV, str(bundles["healthy"]))
    assert main(["flamegraph", "--rank", "0", "--no-svg", "--out", str(tmp_path)]) == 0
    monkeypatch.delenv(BUNDLE_ENV)
    assert main(["flamegraph", "--rank", "0", "--out", str(tmp_path)]) == EXIT_USAGE


def test_symbols_resolve_concentration(capsys):
    assert main(["symbols", "resolve", "--mode", "nearest-lower", "--samples", "1000", "--json"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["top_share"] > 0.5
    assert main(["symbols", "resolve", "--mode", "exact-range", "--table", "full", "--samples", "1000",
                 "--json"]) == 0
    assert json.loads(capsys.readouterr().out)["distinct_names"] >= 10


def test_symbols_pack_ingest_and_lookup(bundles, tmp_path, capsys):
    binary = bundles["healthy"] / "binaries" / "trainer.json"
    sym = tmp_path / "trainer.symr"
    assert main(["symbols", "pack", "--binary", str(binary), "--out", str(sym)]) == 0
    bid = capsys.readouterr().out.split("build_id=")[1].split()[0]
    repo = tmp_path / "repo"
    assert main(["symbols", "ingest", "--repo", str(repo), str(sym)]) == 0
    assert capsys.readouterr().out.split() == [bid, "stored"]
    assert main(["symbols", "ingest", "--repo", str(repo), str(sym)]) == 0
    assert "already-present" in capsys.readouterr().out
    assert main(["symbols", "resolve", "--repo", str(repo), "--build-id", bid, "--offset", "0x0",
                 "--mode", "nearest-lower"]) == 0
    assert capsys.readouterr().out.strip()
    bad = tmp_path / "bad.symr"
    bad.write_bytes(b"garbage")
    assert main(["symbols", "ingest", "--repo", str(repo), str(bad)]) == EXIT_USAGE


def test_unwind_eval_modes(tmp_path):
    out = tmp_path / "h"
    assert main(["unwind-eval", "--mode", "hybrid", "--functions", "120", "--samples", "300",
                 "--out", str(out)]) == 0
    doc = json.loads((out / "unwind_eval.json").read_text())
    assert doc["modes"][0]["mean_accuracy"] == 1.0
    assert set(doc["hybrid_passes"]) == {"first_pass", "second_pass", "markers"}
    out = tmp_path / "fp"
    assert main(["unwind-eval", "--mode", "fp", "--omits-fraction", "0", "--functions", "120",
                 "--samples", "300", "--out", str(out)]) == 0
    assert json.loads((out / "unwind_eval.json").read_text())["modes"][0]["mean_accuracy"] == 1.0
    assert main(["unwind-eval", "--omits-fraction", "2", "--out", str(out)]) == EXIT_USAGE


def test_config_precedence(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 5, "simulate": {"scenario": "thermal", "iterations": 40,
                                                       "onset": 10}}))
    main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "a")])
    out = capsys.readouterr().out
    assert "scenario=thermal seed=5" in out
    main(["simulate", "--config", str(cfg), "--seed", "6", "--out", str(tmp_path / "b")])
    assert "scenario=thermal seed=6" in capsys.readouterr().out
    meta = json.loads((tmp_path / "a" / "meta.json").read_text())
    assert meta["iterations"] == 40
    cfg.write_text(json.dumps({"simulate": {"colour": "red"}}))
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "c")]) == EXIT_USAGE
