import json

import pytest

from strata.bundle import REQUIRED_FILES, BundleError, load_bundle
from strata.diagnosis import DiagnoseConfig, diagnose
from strata.sim import ScenarioSpec, generate


@pytest.fixture(scope="module")
def bundle():
    return generate(ScenarioSpec("softirq", seed=2, iterations=30, onset=5))


def test_save_load_round_trip(bundle, tmp_path):
    digest = bundle.save(tmp_path)
    again = load_bundle(tmp_path)
    assert again.digest() == digest
    assert again.samples == bundle.samples
    assert again.gpu_events == bundle.gpu_events
    assert again.collectives == bundle.collectives
    assert again.os_counters == bundle.os_counters
    assert [b.build_id for b in again.binaries] == [b.build_id for b in bundle.binaries]
    cfg = DiagnoseConfig(window=20)
    assert diagnose(again, cfg).to_dict() == diagnose(bundle, cfg).to_dict()


def test_layout_on_disk(bundle, tmp_path):
    bundle.save(tmp_path)
    for name in REQUIRED_FILES:
        assert (tmp_path / name).is_file()
    assert sorted(p.name for p in (tmp_path / "binaries").iterdir()) == ["trainer.json", "vmlinux.json"]
    assert len(list((tmp_path / "symbols").glob("*.symr"))) == 2
    first = json.loads((tmp_path / "samples.jsonl").read_text().splitlines()[0])
    assert set(first) == {"timestamp", "rank", "thread", "stack"}


@pytest.mark.parametrize("name", ["collectives.jsonl", "meta.json", "stacks.jsonl"])
def test_missing_file_is_named(bundle, tmp_path, name):
    bundle.save(tmp_path)
    (tmp_path / name).unlink()
    with pytest.raises(BundleError, match=name):
        load_bundle(tmp_path)


def test_malformed_line_reports_location(bundle, tmp_path):
    bundle.save(tmp_path)
    path = tmp_path / "gpu_events.jsonl"
    lines = path.read_text().splitlines()
    lines[3] = lines[3][:-5]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(BundleError, match="gpu_events.jsonl:4"):
        load_bundle(tmp_path)


def test_missing_directory(tmp_path):
    with pytest.raises(BundleError, match="not found"):
        load_bundle(tmp_path / "nothing")
