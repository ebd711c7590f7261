"""Per-host, per-day behavioural attributes over cleansed (paired) traffic."""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Optional

from .config import EnterpriseConfig, sort_hosts
from .pairing import PairedLookup

FEATURES = ("qry_frac_out", "frac_ext_srv", "frac_ext_client", "actv_qry_out_time")


@dataclass(frozen=True)
class AttributeVector:
    host: str
    day: int
    qry_frac_out: float
    frac_ext_srv: float
    frac_ext_client: float
    actv_qry_out_time: float
    qry_frac_host: float
    resp_frac_host: float
    # Raw counts behind the fractions; ext_srv_count also feeds NAT clustering.
    out_queries: int = 0
    out_responses: int = 0
    ext_srv_count: int = 0
    ext_client_count: int = 0
    active_hours: int = 0

    def features(self) -> tuple[float, float, float, float]:
        return (self.qry_frac_out, self.frac_ext_srv, self.frac_ext_client, self.actv_qry_out_time)


class _HostTally:
    __slots__ = ("out_q", "out_r", "servers", "clients", "hours")

    def __init__(self) -> None:
        self.out_q = 0
        self.out_r = 0
        self.servers: set[str] = set()
        self.clients: set[str] = set()
        self.hours: set[int] = set()


def extract(
    paired: Iterable[PairedLookup], day: int, cfg: EnterpriseConfig
) -> list[AttributeVector]:
    """Attribute vectors for every internal host seen in ``paired`` on ``day``.

    A lookup belongs to the day of its query.  Shares (``frac_ext_*`` and
    ``*_frac_host``) are taken over the sum of the per-host quantities, so
    they add up to one across hosts.
    """
    tallies: dict[str, _HostTally] = defaultdict(_HostTally)
    internal = cfg.is_internal
    for lk in paired:
        q = lk.query
        if cfg.day_of(q.ts_us) != day:
            continue
        if internal(q.src):
            t = tallies[q.src]
            t.out_q += 1
            t.hours.add(cfg.hour_of_day(q.ts_us))
            if not internal(q.dst):
                t.servers.add(q.dst)
        if internal(q.dst):
            t = tallies[q.dst]
            t.out_r += 1
            if not internal(q.src):
                t.clients.add(q.src)
    return _vectors(tallies, day)


def _vectors(tallies: dict[str, _HostTally], day: int) -> list[AttributeVector]:
    total_q = sum(t.out_q for t in tallies.values())
    total_r = sum(t.out_r for t in tallies.values())
    total_srv = sum(len(t.servers) for t in tallies.values())
    total_cli = sum(len(t.clients) for t in tallies.values())
    out = []
    for host in sort_hosts(tallies):
        t = tallies[host]
        sent = t.out_q + t.out_r
        out.append(
            AttributeVector(
                host=host,
                day=day,
                qry_frac_out=t.out_q / sent if sent else 0.0,
                frac_ext_srv=len(t.servers) / total_srv if total_srv else 0.0,
                frac_ext_client=len(t.clients) / total_cli if total_cli else 0.0,
                actv_qry_out_time=len(t.hours) / 24,
                qry_frac_host=t.out_q / total_q if total_q else 0.0,
                resp_frac_host=t.out_r / total_r if total_r else 0.0,
                out_queries=t.out_q,
                out_responses=t.out_r,
                ext_srv_count=len(t.servers),
                ext_client_count=len(t.clients),
                active_hours=len(t.hours),
            )
        )
    return out


def extract_days(paired: Iterable[PairedLookup], cfg: EnterpriseConfig) -> dict[int, list[AttributeVector]]:
    """Split a multi-day lookup stream by local day and extract each."""
    by_day: dict[int, list[PairedLookup]] = defaultdict(list)
    for lk in paired:
        by_day[cfg.day_of(lk.query.ts_us)].append(lk)
    return {day: extract(lks, day, cfg) for day, lks in sorted(by_day.items())}


_COLUMNS = [f.name for f in fields(AttributeVector)]


def write_attributes_csv(path, vectors: Iterable[AttributeVector], header_comment: Optional[str] = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.DictWriter(fh, fieldnames=_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for vec in vectors:
            row = asdict(vec)
            for name in FEATURES + ("qry_frac_host", "resp_frac_host"):
                row[name] = repr(row[name])
            writer.writerow(row)


def read_attributes_csv(path) -> list[AttributeVector]:
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    out = []
    for row in csv.DictReader(lines):
        kwargs = {}
        for f in fields(AttributeVector):
            raw = row[f.name]
            if f.name == "host":
                kwargs[f.name] = raw
            elif f.type in ("int", int):
                kwargs[f.name] = int(raw)
            else:
                kwargs[f.name] = float(raw)
        out.append(AttributeVector(**kwargs))
    return out
