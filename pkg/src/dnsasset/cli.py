"""Command-line front end: synth, parse, classify, health, report.

Every command writes into an output directory together with a manifest
(``manifest.<command>.json``) whose hash is embedded in each artifact.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional

from . import __version__
from .attributes import extract_days, write_attributes_csv
from .clustering import (
    DEFAULT_K,
    CONFIDENCE_FLOOR,
    DegenerateInput,
    Role,
    SingularCovariance,
    classify_day,
    cluster_nat,
    consistency_report,
    rank_servers,
    read_roles_csv,
    write_ranking_csv,
    write_roles_csv,
)
from .config import DAY_US, ConfigError, EnterpriseConfig, load_config, parse_duration
from .health import ALERTS, Thresholds, alert_statistics, track_health, write_coverage_csv, write_health_jsonl
from .inference import (
    SEVERITY_COLUMNS,
    GraphError,
    build_codebook,
    diagnose,
    load_codebook,
    severity_report,
    write_diagnoses_jsonl,
    write_severity_csv,
)
from .ingest import FileFormatError, SchemaError, read_events, read_pcap, summarize_traffic, write_events
from .pairing import DEFAULT_WINDOW_US, OrderingError, pair
from .synth import SCENARIO_DIR, SpecError, TemplateError, bundled, generate, load_scenario
from .wire import EnvelopeError

log = logging.getLogger("dnsasset")

EXIT_OK, EXIT_CONFIG, EXIT_INPUT, EXIT_DEGENERATE = 0, 2, 3, 4


# -- manifest ---------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config_hash: str
    inputs: dict[str, str]
    seed: Optional[int]
    params: dict[str, Any]
    version: str = __version__
    timings: dict[str, float] = field(default_factory=dict)

    def core(self) -> dict[str, Any]:
        return {
            "command": self.command,
            "config_hash": self.config_hash,
            "inputs": self.inputs,
            "seed": self.seed,
            "params": self.params,
            "version": self.version,
        }

    @property
    def digest(self) -> str:
        blob = json.dumps(self.core(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def write(self, out_dir: Path, with_timings: bool) -> Path:
        doc = dict(self.core(), manifest_hash=self.digest)
        if with_timings:
            doc["timings"] = {k: round(v, 6) for k, v in self.timings.items()}
        path = out_dir / f"manifest.{self.command}.json"
        path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return path


@contextmanager
def _stage(manifest: RunManifest, name: str):
    t0 = time.perf_counter()
    yield
    manifest.timings[name] = time.perf_counter() - t0
    log.info("%s: %.3fs", name, manifest.timings[name])


def _inputs(**paths) -> dict[str, str]:
    return {name: sha256_file(p) for name, p in sorted(paths.items()) if p is not None}


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _date(day: int) -> str:
    return datetime.fromtimestamp(day * DAY_US / 1e6, tz=timezone.utc).date().isoformat()


# -- config -----------------------------------------------------------------


def _config(args, near: Optional[Path] = None) -> EnterpriseConfig:
    """--config, else a config.json next to the input; --epoch overrides."""
    path = args.config
    if path is None and near is not None and (near.parent / "config.json").exists():
        path = near.parent / "config.json"
    if path is None:
        raise ConfigError("no --config given and no config.json beside the input")
    cfg = load_config(path)
    if getattr(args, "epoch", None):
        cfg = EnterpriseConfig(
            cfg.internal_prefixes, cfg.enterprise_zones,
            parse_duration(args.epoch) // 1_000_000, cfg.day_boundary, cfg.extra,
        )
    return cfg


def _band(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(x) for x in text.split(":"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"band must look like 0.7:1.3, got {text!r}") from exc
    if not 0 <= lo <= hi:
        raise argparse.ArgumentTypeError("band needs 0 <= low <= high")
    return lo, hi


def _k(text: str) -> int:
    k = int(text)
    if not 1 <= k <= 9:
        raise argparse.ArgumentTypeError("k must be between 1 and 9")
    return k


# -- commands ---------------------------------------------------------------


def cmd_synth(args) -> int:
    out = _out_dir(args.out)
    source = args.scenario
    if not Path(source).exists() and (SCENARIO_DIR / f"{source}.json").exists():
        source = str(bundled(source))
    scenario, cfg = load_scenario(source, load_config(args.config) if args.config else None)
    if args.seed is not None:
        scenario.seed = args.seed
    man = RunManifest("synth", cfg.digest(), _inputs(scenario=source), scenario.seed, {})
    with _stage(man, "generate"):
        events, truth = generate(scenario, cfg)
    with _stage(man, "write"):
        _dump_json(out / "config.json", dict(cfg.to_dict(), _manifest=man.digest))
        write_events(out / "events.jsonl", events, meta={"manifest": man.digest})
        truth_doc = truth.to_dict()
        truth_doc["manifest"] = man.digest
        _dump_json(out / "truth.json", truth_doc)
    man.write(out, args.timings)
    print(f"{len(events)} events from {len(scenario.hosts)} hosts -> {out}")
    return EXIT_OK


def cmd_parse(args) -> int:
    out = _out_dir(args.out)
    cfg = _config(args)
    man = RunManifest("parse", cfg.digest(), _inputs(capture=args.capture), None, {})
    tally: Counter = Counter()
    with _stage(man, "parse"):
        events = list(read_pcap(args.capture, cfg, tally))
    with _stage(man, "write"):
        _dump_json(out / "config.json", dict(cfg.to_dict(), _manifest=man.digest))
        write_events(out / "events.jsonl", events, meta={"manifest": man.digest})
        summary = summarize_traffic(events)
        with open(out / "traffic_summary.csv", "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# manifest: {man.digest}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["table", "key", "count"])
            w.writerows(summary.rows())
            for reason in sorted(tally):
                w.writerow(["skipped", reason, tally[reason]])
    man.write(out, args.timings)
    print(f"{len(events)} DNS events, {sum(tally.values())} packets skipped -> {out}")
    return EXIT_OK


def _classify_one(job):
    vecs, k, seed, floor = job
    return classify_day(vecs, k, seed, floor)


def cmd_classify(args) -> int:
    out = _out_dir(args.out)
    events_path = Path(args.events)
    cfg = _config(args, events_path)
    window = parse_duration(args.window)
    params = {"k": args.k, "confidence_floor": args.confidence_floor, "window_us": window}
    man = RunManifest("classify", cfg.digest(), _inputs(events=events_path), args.seed, params)
    tag = f"manifest: {man.digest}"
    with _stage(man, "pair"):
        result = pair(read_events(events_path), window, cfg)
    with _stage(man, "attributes"):
        days = extract_days(result.paired, cfg)
    if not days:
        raise DegenerateInput("no paired lookups to classify")
    with _stage(man, "cluster"):
        jobs = [(vecs, args.k, args.seed, args.confidence_floor) for vecs in days.values()]
        if args.jobs > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                fits = list(pool.map(_classify_one, jobs))
        else:
            fits = [_classify_one(j) for j in jobs]
    roles = [r for fit in fits for r in fit.roles]
    with _stage(man, "write"):
        write_attributes_csv(out / "attributes.csv", [v for vecs in days.values() for v in vecs], tag)
        write_roles_csv(out / "roles.csv", roles, tag)
        _dump_json(out / "models.json", {
            "manifest": man.digest,
            "k": args.k,
            "seed": args.seed,
            "days": {str(f.day): f.model.to_dict() for f in fits},
        })
        with open(out / "elbow.csv", "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# {tag}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["day", "k", "sse", "suggested_k"])
            for f in fits:
                for k, sse in zip(f.elbow.ks, f.elbow.sse):
                    w.writerow([f.day, k, repr(sse), f.elbow.suggested_k])
        resolver_rows, ns_rows = [], []
        nat_rows = []
        for f in fits:
            res, ns = rank_servers(days[f.day], f.roles)
            resolver_rows += [(f.day, r) for r in res]
            ns_rows += [(f.day, r) for r in ns]
            end = {r.host for r in f.roles if r.role is Role.END_HOST}
            endhosts = [v for v in days[f.day] if v.host in end]
            if len(endhosts) >= 2:
                try:
                    nat_rows += cluster_nat(endhosts, seed=args.seed)
                except (DegenerateInput, SingularCovariance) as exc:
                    # NAT labels are a by-product; a tiny end-host population
                    # should not sink the role classification.
                    log.warning("day %s: NAT split skipped (%s)", f.day, exc)
        for name, rows in (("ranking_resolvers.csv", resolver_rows), ("ranking_nameservers.csv", ns_rows)):
            with open(out / name, "w", newline="", encoding="utf-8") as fh:
                fh.write(f"# {tag}\n")
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["day", "rank", "host", "role", "share", "cumulative"])
                for day, r in rows:
                    w.writerow([day, r.rank, r.host, r.role.value, repr(r.share), repr(r.cumulative)])
        with open(out / "nat.csv", "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# {tag}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["host", "day", "nat", "confidence"])
            for a in nat_rows:
                w.writerow([a.host, a.day, a.nat.value, repr(a.confidence)])
        with open(out / "consistency.csv", "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# {tag}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["host", "active_days", *(r.value for r in Role), "modal_role", "modal_share", "unstable"])
            for row in consistency_report(roles):
                w.writerow([
                    row.host, row.active_days, *(row.counts[r] for r in Role),
                    row.modal_role.value, repr(row.modal_share), int(row.unstable),
                ])
    man.write(out, args.timings)
    counts = Counter(r.role.value for r in roles)
    print(f"{len(days)} day(s), {len(roles)} host-days: " + ", ".join(f"{k}={v}" for k, v in sorted(counts.items())))
    return EXIT_OK


def cmd_health(args) -> int:
    out = _out_dir(args.out)
    events_path = Path(args.events)
    cfg = _config(args, events_path)
    roles_path = Path(args.roles) if args.roles else events_path.parent / "roles.csv"
    if not roles_path.exists():
        raise FileNotFoundError(f"roles file {roles_path} not found (run classify first or pass --roles)")
    window = parse_duration(args.window)
    th = Thresholds(margin=args.threshold, band=args.band, nelf_out_min=1 - args.threshold)
    book = load_codebook(args.codebook) if args.codebook else build_codebook()
    params = {"threshold": args.threshold, "band": list(args.band), "window_us": window,
              "codebook": book.to_dict()}
    man = RunManifest(
        "health", cfg.digest(), _inputs(events=events_path, roles=roles_path), None, params
    )
    tag = f"manifest: {man.digest}"
    with _stage(man, "pair"):
        events = list(read_events(events_path))
        result = pair(events, window, cfg)
    roles = read_roles_csv(roles_path)
    with _stage(man, "metrics"):
        results = track_health(events, result.paired, roles, cfg, th, jobs=args.jobs)
    with _stage(man, "inference"):
        diagnoses = diagnose(results, book)
        assets = sorted({rec.host for rec, _ in results})
        severity = severity_report(diagnoses, assets)
        stats = alert_statistics(results)
    with _stage(man, "write"):
        write_health_jsonl(out / "health.jsonl", results, meta={"manifest": man.digest})
        write_coverage_csv(out / "coverage.csv", stats, tag)
        write_diagnoses_jsonl(out / "diagnoses.jsonl", diagnoses, meta={"manifest": man.digest})
        write_severity_csv(out / "severity.csv", severity, tag)
        _dump_json(out / "codebook.json", dict(book.to_dict(), _manifest=man.digest))
    man.write(out, args.timings)
    alerts = sum(len(a) for _, a in results)
    print(f"{len(assets)} DNS assets, {len(results)} host-epochs, {alerts} alerts")
    return EXIT_OK


def _read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def cmd_report(args) -> int:
    run = Path(args.run)
    out = _out_dir(args.out or args.run)
    sources = {n: run / n for n in ("roles.csv", "severity.csv", "coverage.csv", "ranking_resolvers.csv")}
    present = {n: p for n, p in sources.items() if p.exists()}
    if not present:
        raise FileNotFoundError(f"{run} holds no classify or health outputs")
    man = RunManifest("report", "", _inputs(**{n.replace(".", "_"): p for n, p in present.items()}), None, {})
    lines = ["# DNS asset report", "", f"manifest: {man.digest}", ""]
    if "roles.csv" in present:
        by_day: dict[str, Counter] = {}
        for row in _read_csv(present["roles.csv"]):
            by_day.setdefault(row["day"], Counter())[row["role"]] += 1
        roles = [r.value for r in Role]
        lines += ["## Host roles per day", "", "| date | " + " | ".join(roles) + " |",
                  "|" + "---|" * (len(roles) + 1)]
        for day in sorted(by_day, key=int):
            lines.append(f"| {_date(int(day))} | " + " | ".join(str(by_day[day][r]) for r in roles) + " |")
        lines.append("")
    if "ranking_resolvers.csv" in present:
        rows = _read_csv(present["ranking_resolvers.csv"])
        lines += ["## Top resolvers (first day)", "", "| rank | host | share | cumulative |", "|---|---|---|---|"]
        first = rows[0]["day"] if rows else None
        for row in [r for r in rows if r["day"] == first][:5]:
            lines.append(f"| {row['rank']} | {row['host']} | {float(row['share']):.3f} | {float(row['cumulative']):.3f} |")
        lines.append("")
    if "coverage.csv" in present:
        net = [r for r in _read_csv(present["coverage.csv"]) if r["host"] == "*network*"]
        if net:
            lines += ["## Alerted share of host-epochs", "", "| alert | share |", "|---|---|"]
            lines += [f"| {a} | {float(net[0][a]):.4f} |" for a in ALERTS]
            lines.append("")
    if "severity.csv" in present:
        rows = {r["anomaly"]: r for r in _read_csv(present["severity.csv"])}
        lines += ["## Anomaly severity (share of DNS assets)", "", "| anomaly | share | assets |", "|---|---|---|"]
        for code in SEVERITY_COLUMNS:
            if code in rows:
                r = rows[code]
                lines.append(f"| {code} | {float(r['asset_fraction']):.3f} | {r['assets_affected']}/{r['assets_total']} |")
        lines.append("")
    (out / "report.md").write_text("\n".join(lines), encoding="utf-8")
    man.write(out, args.timings)
    print(f"report -> {out / 'report.md'}")
    return EXIT_OK


# -- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dnsasset", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *, config=True, seed=False, window=False):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--timings", action="store_true", help="record stage timings in the manifest")
        if config:
            sp.add_argument("--config", help="enterprise config (JSON or TOML)")
            sp.add_argument("--epoch", help="epoch length override, e.g. 1h")
        if seed:
            sp.add_argument("--seed", type=int, default=0, help="seed for k-means++ and EM starts")
        if window:
            sp.add_argument("--window", default=f"{DEFAULT_WINDOW_US // 1_000_000}s", help="pairing window")
            sp.add_argument("--jobs", type=int, default=1, help="worker processes")

    sp = sub.add_parser("synth", help="generate a labeled synthetic trace")
    sp.add_argument("scenario", help="scenario JSON file or bundled scenario name")
    common(sp, seed=False)
    sp.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("parse", help="convert a pcap/pcapng capture to events")
    sp.add_argument("capture")
    common(sp)
    sp.set_defaults(func=cmd_parse)

    sp = sub.add_parser("classify", help="attributes, roles, rankings, NAT labels")
    sp.add_argument("events")
    common(sp, seed=True, window=True)
    sp.add_argument("--k", type=_k, default=DEFAULT_K, help="mixture components (1-9)")
    sp.add_argument("--confidence-floor", type=float, default=CONFIDENCE_FLOOR,
                    help="below this responsibility a host is Unknown")
    sp.set_defaults(func=cmd_classify)

    sp = sub.add_parser("health", help="health metrics, alerts, diagnoses, severity")
    sp.add_argument("events")
    common(sp, window=True)
    sp.add_argument("--roles", help="roles.csv from classify (default: beside the events)")
    sp.add_argument("--threshold", type=float, default=0.3, help="alert margin for NELF, LEF and rate rises")
    sp.add_argument("--band", type=_band, default=(0.7, 1.3), help="service-ratio band, low:high")
    sp.add_argument("--codebook", help="codebook JSON overriding the default")
    sp.set_defaults(func=cmd_health)

    sp = sub.add_parser("report", help="summarize a run directory as markdown")
    sp.add_argument("run")
    sp.add_argument("--out", help="output directory (default: the run directory)")
    sp.add_argument("--timings", action="store_true", help="record stage timings in the manifest")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, SpecError, TemplateError, GraphError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileFormatError, SchemaError, EnvelopeError, OrderingError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (DegenerateInput, SingularCovariance) as exc:
        print(f"degenerate data: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE


if __name__ == "__main__":
    sys.exit(main())
