import json

import pytest

from conftest import event_frame, run_scenario, write_pcap
from dnsasset.cli import main
from dnsasset.synth import SCENARIO_DIR, bundled

ENTERPRISE = {
    "internal_prefixes": ["10.20.0.0/16"],
    "enterprise_zones": ["example.edu"],
}


def _scenario(tmp_path, hosts, **extra):
    p = tmp_path / "scenario.json"
    p.write_text(json.dumps({"enterprise": ENTERPRISE, "seed": 1, "duration": 1, "hosts": hosts, **extra}))
    return p


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    assert main(["synth", str(bundled("tiny")), "--out", str(out)]) == 0
    assert main(["classify", str(out / "events.jsonl"), "--out", str(out)]) == 0
    assert main(["health", str(out / "events.jsonl"), "--out", str(out)]) == 0
    assert main(["report", str(out)]) == 0
    return out


def test_run_directory_contents(tiny_run):
    names = {p.name for p in tiny_run.iterdir()}
    for want in ("events.jsonl", "truth.json", "config.json", "attributes.csv", "roles.csv", "models.json",
                 "elbow.csv", "ranking_resolvers.csv", "ranking_nameservers.csv", "nat.csv",
                 "consistency.csv", "health.jsonl", "coverage.csv", "diagnoses.jsonl", "severity.csv",
                 "codebook.json", "report.md", "manifest.synth.json", "manifest.classify.json",
                 "manifest.health.json", "manifest.report.json"):
        assert want in names


def test_every_artifact_embeds_its_manifest(tiny_run):
    digests = {}
    for m in tiny_run.glob("manifest.*.json"):
        doc = json.loads(m.read_text())
        digests[doc["command"]] = doc["manifest_hash"]
        assert "timings" not in doc
    owner = {
        "synth": ["events.jsonl", "truth.json", "config.json"],
        "classify": ["attributes.csv", "roles.csv", "models.json", "elbow.csv", "ranking_resolvers.csv",
                     "ranking_nameservers.csv", "nat.csv", "consistency.csv"],
        "health": ["health.jsonl", "coverage.csv", "diagnoses.jsonl", "severity.csv", "codebook.json"],
        "report": ["report.md"],
    }
    for cmd, files in owner.items():
        for f in files:
            assert digests[cmd] in (tiny_run / f).read_text(), f


def test_severity_has_seven_rows(tiny_run):
    rows = [l for l in (tiny_run / "severity.csv").read_text().splitlines() if not l.startswith("#")]
    assert [r.split(",")[0] for r in rows[1:]] == ["A1", "A2", "A3", "A4", "A5", "A6", "A4'"]


def test_tiny_misconfiguration_found(tiny_run):
    rows = {l.split(",")[0]: l.split(",") for l in (tiny_run / "severity.csv").read_text().splitlines()
            if not l.startswith("#")}
    assert int(rows["A1"][2]) == 1


def test_k_override_and_seed_recorded(tmp_path, tiny_run):
    out = tmp_path / "k3"
    assert main(["classify", str(tiny_run / "events.jsonl"), "--out", str(out), "--k", "3", "--seed", "7"]) == 0
    doc = json.loads((out / "models.json").read_text())
    assert doc["k"] == 3 and doc["seed"] == 7
    assert all(m["k"] == 3 for m in doc["days"].values())
    man = json.loads((out / "manifest.classify.json").read_text())
    assert man["params"]["k"] == 3 and man["seed"] == 7


def test_timings_only_on_request(tmp_path, tiny_run):
    out = tmp_path / "timed"
    assert main(["classify", str(tiny_run / "events.jsonl"), "--out", str(out), "--timings"]) == 0
    assert "timings" in json.loads((out / "manifest.classify.json").read_text())


def test_jobs_same_bytes(tmp_path, tiny_run):
    out = tmp_path / "jobs"
    ev = str(tiny_run / "events.jsonl")
    assert main(["classify", ev, "--out", str(out), "--jobs", "2"]) == 0
    assert main(["health", ev, "--out", str(out), "--roles", str(tiny_run / "roles.csv"), "--jobs", "2"]) == 0
    for name in ("roles.csv", "models.json", "health.jsonl", "severity.csv"):
        assert (out / name).read_bytes() == (tiny_run / name).read_bytes(), name


def test_zero_host_scenario(tmp_path):
    out = tmp_path / "empty"
    assert main(["synth", str(_scenario(tmp_path, [])), "--out", str(out)]) == 0
    lines = (out / "events.jsonl").read_text().splitlines()
    assert len(lines) == 1 and "_meta" in lines[0]
    truth = json.loads((out / "truth.json").read_text())
    assert truth["archetypes"] == {} and truth["total_events"] == 0
    # nothing to classify
    assert main(["classify", str(out / "events.jsonl"), "--out", str(out)]) == 4


def test_archetype_counts_in_truth(tmp_path):
    hosts = [{"addr_start": "10.20.0.10", "count": 2, "archetype": "NameServer", "intensity": 5},
             {"addr": "10.20.5.1", "archetype": "EndHost", "intensity": 2}]
    out = tmp_path / "o"
    assert main(["synth", str(_scenario(tmp_path, hosts)), "--out", str(out)]) == 0
    arche = json.loads((out / "truth.json").read_text())["archetypes"]
    assert sorted(arche.values()) == ["EndHost", "NameServer", "NameServer"]


def test_exit_codes(tmp_path, tiny_run, capsys):
    # 2: configuration problems
    no_enterprise = tmp_path / "bare.json"
    no_enterprise.write_text(json.dumps({"hosts": []}))
    assert main(["synth", str(no_enterprise), "--out", str(tmp_path / "a")]) == 2
    dup = [{"addr": "10.20.0.1", "archetype": "EndHost"}] * 2
    assert main(["synth", str(_scenario(tmp_path, dup)), "--out", str(tmp_path / "b")]) == 2
    bad_book = tmp_path / "book.json"
    bad_book.write_text(json.dumps({"A1": ["high_nelf_in", "bogus"]}))
    assert main(["health", str(tiny_run / "events.jsonl"), "--out", str(tmp_path / "c"),
                 "--codebook", str(bad_book)]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["classify", str(tiny_run / "events.jsonl"), "--out", str(tmp_path / "d"), "--k", "12"])
    assert exc.value.code == 2
    # 3: input problems
    assert main(["classify", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path / "e"),
                 "--config", str(tiny_run / "config.json")]) == 3
    junk = tmp_path / "junk.pcap"
    junk.write_bytes(b"nope nope nope")
    assert main(["parse", str(junk), "--out", str(tmp_path / "f"), "--config", str(tiny_run / "config.json")]) == 3
    bad_events = tmp_path / "g" / "events.jsonl"
    bad_events.parent.mkdir()
    bad_events.write_text('{"v": 42}\n')
    assert main(["classify", str(bad_events), "--out", str(tmp_path / "g"),
                 "--config", str(tiny_run / "config.json")]) == 3
    # 4: degenerate data
    few = [{"addr": "10.20.0.1", "archetype": "EndHost", "intensity": 5},
           {"addr": "10.20.0.2", "archetype": "EndHost", "intensity": 5}]
    out = tmp_path / "h"
    assert main(["synth", str(_scenario(tmp_path, few)), "--out", str(out)]) == 0
    assert main(["classify", str(out / "events.jsonl"), "--out", str(out)]) == 4


def test_parse_capture(tmp_path, tiny_run):
    run = run_scenario("tiny")
    sample = run.events[:500]
    cap = tmp_path / "cap.pcap"
    write_pcap(cap, [(e.ts_us, event_frame(e)) for e in sample])
    out = tmp_path / "parsed"
    assert main(["parse", str(cap), "--out", str(out), "--config", str(tiny_run / "config.json")]) == 0
    lines = (out / "events.jsonl").read_text().splitlines()
    assert len(lines) == 1 + len(sample)
    assert (out / "traffic_summary.csv").exists()


@pytest.mark.parametrize("name", sorted(p.stem for p in SCENARIO_DIR.glob("*.json")))
def test_bundled_scenarios_compose(tmp_path, name):
    out = tmp_path / name
    assert main(["synth", str(bundled(name)), "--out", str(out)]) == 0
    assert main(["classify", str(out / "events.jsonl"), "--out", str(out)]) == 0
    assert main(["health", str(out / "events.jsonl"), "--out", str(out)]) == 0
    assert main(["report", str(out)]) == 0


def test_flood_alerts_within_window(tmp_path):
    out = tmp_path / "flood"
    assert main(["synth", str(bundled("flood")), "--out", str(out)]) == 0
    assert main(["classify", str(out / "events.jsonl"), "--out", str(out)]) == 0
    assert main(["health", str(out / "events.jsonl"), "--out", str(out)]) == 0
    truth = json.loads((out / "truth.json").read_text())
    (attack,) = truth["anomalies"]
    window = set(attack["epochs"])
    lo, hi = min(window) - 1, max(window) + 1
    for line in (out / "health.jsonl").read_text().splitlines()[1:]:
        row = json.loads(line)
        if "high_qri" in row["alerts"]:
            assert row["host"] == attack["victim"] and lo <= row["epoch"] <= hi
