"""Per-asset, per-epoch traffic health metrics and threshold alerts.

Service ratios and rates use raw packet counts, malformed and unanswered
packets included, so floods show up.  NELF and LEF use paired lookups only,
because relevance and error need a parsed question and answer.
"""

from __future__ import annotations

import csv
import json
from collections import Counter, defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Mapping, Optional, Sequence

from .clustering import SERVER_ROLES, Role, RoleAssignment, modal_roles
from .config import EnterpriseConfig, host_key
from .pairing import PairedLookup, Relevance
from .wire import DnsEvent, Kind

ALERTS = (
    # inbound block
    "high_nelf_in", "high_lef_in", "low_qsri", "high_qsro", "high_qri", "high_rri",
    # outbound block
    "low_nelf_out", "high_lef_out", "high_qsri", "low_qsro", "high_rro", "high_qro",
)
RATES = ("qri", "rro", "qro", "rri")
_RATE_ALERT = {"qri": "high_qri", "rro": "high_rro", "qro": "high_qro", "rri": "high_rri"}


@dataclass(frozen=True)
class Thresholds:
    margin: float = 0.3
    band: tuple[float, float] = (0.7, 1.3)
    nelf_out_min: float = 0.7
    ema_alpha: float = 0.3
    warmup_epochs: int = 3


@dataclass
class HealthRecord:
    host: str
    epoch: int
    epoch_start: int
    role: Role
    nelf_in: Optional[float]
    nelf_out: Optional[float]
    lef_in: Optional[float]
    lef_out: Optional[float]
    qsri: Optional[float]
    qsro: Optional[float]
    qri: float
    rro: float
    qro: float
    rri: float
    baselines: dict[str, Optional[float]] = field(default_factory=dict)
    warmup: bool = False
    counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["role"] = self.role.value
        return out


@dataclass(frozen=True)
class AlertVector:
    high_nelf_in: bool = False
    high_lef_in: bool = False
    low_qsri: bool = False
    high_qsro: bool = False
    high_qri: bool = False
    high_rri: bool = False
    low_nelf_out: bool = False
    high_lef_out: bool = False
    high_qsri: bool = False
    low_qsro: bool = False
    high_rro: bool = False
    high_qro: bool = False

    @property
    def bits(self) -> int:
        return sum(1 << i for i, name in enumerate(ALERTS) if getattr(self, name))

    @classmethod
    def from_bits(cls, bits: int) -> "AlertVector":
        return cls(**{name: bool(bits >> i & 1) for i, name in enumerate(ALERTS)})

    @classmethod
    def from_names(cls, names: Iterable[str]) -> "AlertVector":
        return cls(**{n: True for n in names})

    def names(self) -> list[str]:
        return [n for n in ALERTS if getattr(self, n)]

    def __len__(self) -> int:
        return len(self.names())


def _frac(num: int, den: int) -> Optional[float]:
    return num / den if den else None


@dataclass
class _EpochCounts:
    q_in: int = 0
    r_out: int = 0
    q_out: int = 0
    r_in: int = 0
    served: int = 0
    served_nonent: int = 0
    served_err: int = 0
    initiated: int = 0
    initiated_nonent: int = 0
    initiated_err: int = 0


def compute_metrics(
    host: str,
    epoch: int,
    counts: _EpochCounts,
    role: Role,
    cfg: EnterpriseConfig,
    baselines: Optional[Mapping[str, Optional[float]]] = None,
    warmup: bool = False,
) -> HealthRecord:
    per_hour = 3600 / cfg.epoch_length
    return HealthRecord(
        host=host,
        epoch=epoch,
        epoch_start=cfg.epoch_start(epoch),
        role=role,
        nelf_in=_frac(counts.served_nonent, counts.served),
        nelf_out=_frac(counts.initiated_nonent, counts.initiated),
        lef_in=_frac(counts.served_err, counts.served),
        lef_out=_frac(counts.initiated_err, counts.initiated),
        qsri=_frac(counts.r_out, counts.q_in),
        qsro=_frac(counts.r_in, counts.q_out),
        qri=counts.q_in * per_hour,
        rro=counts.r_out * per_hour,
        qro=counts.q_out * per_hour,
        rri=counts.r_in * per_hour,
        baselines=dict(baselines or {}),
        warmup=warmup,
        counts=asdict(counts),
    )


def raise_alerts(rec: HealthRecord, th: Thresholds = Thresholds()) -> AlertVector:
    """Threshold a record into its 12 alert bits; absent metrics raise nothing."""
    lo, hi = th.band
    a: dict[str, bool] = {}
    ns_side = rec.role in (Role.NAME_SERVER, Role.MIXED_SERVER)
    res_side = rec.role in (Role.RECURSIVE_RESOLVER, Role.MIXED_SERVER)
    a["high_nelf_in"] = ns_side and rec.nelf_in is not None and rec.nelf_in > th.margin
    a["low_nelf_out"] = res_side and rec.nelf_out is not None and rec.nelf_out < th.nelf_out_min
    a["high_lef_in"] = rec.lef_in is not None and rec.lef_in > th.margin
    a["high_lef_out"] = rec.lef_out is not None and rec.lef_out > th.margin
    if rec.qsri is not None:
        a["low_qsri"] = rec.qsri < lo
        a["high_qsri"] = rec.qsri > hi
    if rec.qsro is not None:
        a["low_qsro"] = rec.qsro < lo
        a["high_qsro"] = rec.qsro > hi
    if not rec.warmup:
        for rate in RATES:
            base = rec.baselines.get(rate)
            if base is not None and base > 0:
                a[_RATE_ALERT[rate]] = (getattr(rec, rate) - base) / base > th.margin
    return AlertVector(**a)


# -- tracking over a run ----------------------------------------------------


def epoch_counts(
    events: Iterable[DnsEvent],
    paired: Iterable[PairedLookup],
    cfg: EnterpriseConfig,
    hosts: Optional[set[str]] = None,
) -> dict[str, dict[int, _EpochCounts]]:
    """Raw and paired tallies per monitored host and epoch."""
    table: dict[str, dict[int, _EpochCounts]] = defaultdict(lambda: defaultdict(_EpochCounts))
    internal = cfg.is_internal

    def wanted(addr: str) -> bool:
        return addr in hosts if hosts is not None else internal(addr)

    for ev in events:
        ep = None
        if wanted(ev.dst):
            ep = cfg.epoch_of(ev.ts_us)
            c = table[ev.dst][ep]
            if ev.kind is Kind.QUERY:
                c.q_in += 1
            else:
                c.r_in += 1
        if wanted(ev.src):
            c = table[ev.src][ep if ep is not None else cfg.epoch_of(ev.ts_us)]
            if ev.kind is Kind.QUERY:
                c.q_out += 1
            else:
                c.r_out += 1
    for lk in paired:
        q = lk.query
        rel = lk.relevance
        if rel is None:
            rel = Relevance.ENTERPRISE if cfg.is_enterprise_name(q.qname) else Relevance.NON_ENTERPRISE
        nonent = rel is Relevance.NON_ENTERPRISE
        ep = cfg.epoch_of(q.ts_us)
        if wanted(q.dst):
            c = table[q.dst][ep]
            c.served += 1
            c.served_nonent += nonent
            c.served_err += lk.error
        if wanted(q.src):
            c = table[q.src][ep]
            c.initiated += 1
            c.initiated_nonent += nonent
            c.initiated_err += lk.error
    return table


def _track_host(args) -> list[tuple[HealthRecord, AlertVector]]:
    """Walk one host's epochs in order, maintaining the gated EMA baselines.

    After warm-up a rate's baseline only absorbs epochs whose rate lies
    within the margin of it.  A sustained surge therefore keeps being
    measured against pre-surge traffic, and a dip does not drag the
    baseline down so that the return to normal looks like a surge.
    """
    host, epochs, roles_by_day, fallback, cfg, th = args
    out = []
    base: dict[str, Optional[float]] = {r: None for r in RATES}
    for i, ep in enumerate(sorted(epochs)):
        day = cfg.day_of(cfg.epoch_start(ep))
        role = roles_by_day.get(day, Role.UNKNOWN)
        if role is Role.UNKNOWN:
            role = fallback
        rec = compute_metrics(host, ep, epochs[ep], role, cfg, base, warmup=i < th.warmup_epochs)
        alerts = raise_alerts(rec, th)
        for rate in RATES:
            value = getattr(rec, rate)
            b = base[rate]
            if b is None:
                base[rate] = value
            elif rec.warmup or (b > 0 and abs(value - b) / b <= th.margin) or (b == 0 and value == 0):
                base[rate] = th.ema_alpha * value + (1 - th.ema_alpha) * b
        out.append((rec, alerts))
    return out


def track_health(
    events: Sequence[DnsEvent],
    paired: Sequence[PairedLookup],
    roles: Iterable[RoleAssignment],
    cfg: EnterpriseConfig,
    th: Thresholds = Thresholds(),
    jobs: int = 1,
    monitor_all: bool = False,
) -> list[tuple[HealthRecord, AlertVector]]:
    """Health records and alerts for every DNS asset, ordered by host then epoch.

    DNS assets are hosts whose modal role over the run is a server role;
    ``monitor_all`` includes every host that has a role.  The per-epoch role
    is that day's assignment, falling back to the modal role when the day's
    role is Unknown or missing.
    """
    roles = list(roles)
    modal = modal_roles(roles)
    by_day: dict[str, dict[int, Role]] = defaultdict(dict)
    for r in roles:
        by_day[r.host][r.day] = r.role
    hosts = {h for h, role in modal.items() if monitor_all or role in SERVER_ROLES}
    table = epoch_counts(events, paired, cfg, hosts)
    tasks = [
        (h, dict(table[h]), by_day[h], modal[h], cfg, th)
        for h in sorted(table, key=host_key)
    ]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_track_host, tasks))
    else:
        parts = [_track_host(t) for t in tasks]
    return [item for part in parts for item in part]


# -- statistics -------------------------------------------------------------


@dataclass
class AlertStatistics:
    coverage: dict[str, dict[str, float]]
    active_epochs: dict[str, int]
    network: dict[str, float]
    alerts_per_epoch: Counter


def alert_statistics(results: Iterable[tuple[HealthRecord, AlertVector]]) -> AlertStatistics:
    """Per-host temporal coverage (alerted / active epochs) of every alert,
    network-wide alerted share of host-epochs, and the distribution of
    alert counts per host-epoch."""
    hits: dict[str, Counter] = defaultdict(Counter)
    active: Counter = Counter()
    total: Counter = Counter()
    per_epoch: Counter = Counter()
    n = 0
    for rec, alerts in results:
        n += 1
        active[rec.host] += 1
        names = alerts.names()
        per_epoch[len(names)] += 1
        for name in names:
            hits[rec.host][name] += 1
            total[name] += 1
    coverage = {
        h: {a: hits[h][a] / active[h] for a in ALERTS} for h in sorted(active, key=host_key)
    }
    network = {a: (total[a] / n if n else 0.0) for a in ALERTS}
    return AlertStatistics(coverage, dict(active), network, per_epoch)


def write_health_jsonl(path, results: Iterable[tuple[HealthRecord, AlertVector]], meta: Optional[dict] = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if meta is not None:
            fh.write(json.dumps({"_meta": meta}, sort_keys=True) + "\n")
        for rec, alerts in results:
            row = rec.to_dict()
            row["alerts"] = alerts.names()
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_health_jsonl(path) -> list[tuple[HealthRecord, AlertVector]]:
    out = []
    names = {f.name for f in fields(HealthRecord)}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            row = json.loads(line)
            if "_meta" in row:
                continue
            alerts = AlertVector.from_names(row.pop("alerts"))
            row["role"] = Role(row["role"])
            out.append((HealthRecord(**{k: v for k, v in row.items() if k in names}), alerts))
    return out


def write_coverage_csv(path, stats: AlertStatistics, header_comment: Optional[str] = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["host", "active_epochs", *ALERTS])
        for host, cov in stats.coverage.items():
            w.writerow([host, stats.active_epochs[host], *(repr(cov[a]) for a in ALERTS)])
        w.writerow(["*network*", sum(stats.active_epochs.values()), *(repr(stats.network[a]) for a in ALERTS)])
