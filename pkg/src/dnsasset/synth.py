"""Seeded generator of labeled DNS traffic for tests and demos.

A scenario lists internal hosts (each with an archetype and a volume) and
optional anomalies.  ``generate`` turns it into a time-ordered event stream
plus a GroundTruth that records every emitted packet, so downstream
attributes and health metrics have exact expected values.

Randomness: one numpy SeedSequence per (seed, host, day, stream).  Packet
counts per hour are Poisson; categorical properties (answered, error,
enterprise name) are assigned by deterministic quota so per-hour fractions
are exact to within one packet.
"""

from __future__ import annotations

import enum
import ipaddress
import json
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from functools import lru_cache
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from .attributes import FEATURES, AttributeVector, _HostTally, _vectors
from .config import DAY_US, HOUR_US, EnterpriseConfig, ConfigError, load_document, parse_duration, sort_hosts
from .wire import DNS_PORT, Direction, DnsEvent, Kind, Transport, message_length

NOERROR, SERVFAIL, NXDOMAIN, REFUSED = 0, 2, 3, 5
QTYPE_A, QTYPE_AAAA, QTYPE_MX, QTYPE_TXT, QTYPE_ANY = 1, 28, 15, 16, 255

DEFAULT_START = "2019-06-03T00:00:00+00:00"
DEFAULT_EXTERNAL_SERVERS = 2000
DEFAULT_EXTERNAL_CLIENTS = 2000

# Healthy service profile shared by every host.
ANSWER_RATIO = 0.98
ERROR_FRACTION = 0.05
ENDHOST_ENTERPRISE_SHARE = 0.1

_EXT_SERVER_NET = ipaddress.ip_network("198.18.0.0/16")
_EXT_CLIENT_NET = ipaddress.ip_network("198.19.0.0/17")
_EXT_ATTACK_NET = ipaddress.ip_network("198.19.128.0/17")
_EXT_V6_NET = ipaddress.ip_network("3fff::/20")


class SpecError(ValueError):
    pass


class TemplateError(ValueError):
    pass


class Archetype(str, enum.Enum):
    NAME_SERVER = "NameServer"
    RECURSIVE_RESOLVER = "RecursiveResolver"
    MIXED_SERVER = "MixedServer"
    END_HOST = "EndHost"
    NAT_GATEWAY = "NatGateway"


class AnomalyKind(str, enum.Enum):
    MISCONFIGURATION = "Misconfiguration"
    QUERY_DDOS = "QueryDDoS"
    RESPONSE_DDOS = "ResponseDDoS"
    REFLECTOR = "Reflector"
    SCAN = "Scan"
    EXFILTRATION = "Exfiltration"


# Archetype defaults: (qry_frac_out, active hours or None for "draw").
_SERVES = {Archetype.NAME_SERVER, Archetype.MIXED_SERVER}
_QUERIES = {Archetype.RECURSIVE_RESOLVER, Archetype.MIXED_SERVER, Archetype.END_HOST, Archetype.NAT_GATEWAY}
_DEFAULT_Q = {
    Archetype.NAME_SERVER: 0.0,
    Archetype.RECURSIVE_RESOLVER: 1.0,
    Archetype.MIXED_SERVER: 0.5,
    Archetype.END_HOST: 1.0,
    Archetype.NAT_GATEWAY: 1.0,
}
_DRAWN_SERVERS = {Archetype.END_HOST: (1, 5), Archetype.NAT_GATEWAY: (10, 20)}
_DRAWN_HOURS = {Archetype.END_HOST: (1, 6), Archetype.NAT_GATEWAY: (18, 24)}


@dataclass(frozen=True)
class TargetAttributes:
    """Partial attribute targets; None means "use the archetype default"."""

    qry_frac_out: Optional[float] = None
    frac_ext_srv: Optional[float] = None
    frac_ext_client: Optional[float] = None
    actv_qry_out_time: Optional[float] = None

    def __post_init__(self) -> None:
        for name in FEATURES:
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise SpecError(f"target {name}={v} outside [0, 1]")


@dataclass(frozen=True)
class HostSpec:
    addr: str
    archetype: Archetype
    intensity: float
    target: TargetAttributes = TargetAttributes()
    servers: Optional[int] = None
    active_hours: Optional[int] = None


@dataclass(frozen=True)
class AnomalySpec:
    kind: AnomalyKind
    victim: str
    start_us: int
    end_us: int
    magnitude: float = 1.0
    qname_pattern: Optional[str] = None
    share: Optional[float] = None
    service_ratio: Optional[float] = None
    nelf: Optional[float] = None
    answer_ratio: Optional[float] = None
    error_fraction: Optional[float] = None
    sources: int = 974


@dataclass
class Scenario:
    seed: int
    duration: int
    hosts: list[HostSpec]
    anomalies: list[AnomalySpec] = field(default_factory=list)
    start_us: int = 0
    external_servers: int = DEFAULT_EXTERNAL_SERVERS
    external_clients: int = DEFAULT_EXTERNAL_CLIENTS


@dataclass
class GroundTruth:
    archetypes: dict[str, Archetype]
    nat: dict[str, bool]
    anomalies: list[dict[str, Any]]
    counts: Counter
    total_events: int
    attributes: dict[int, list[AttributeVector]]

    def anomaly_epochs(self) -> dict[tuple[str, int], set[str]]:
        """(host, epoch) -> anomaly kinds active there."""
        out: dict[tuple[str, int], set[str]] = defaultdict(set)
        for a in self.anomalies:
            for ep in a["epochs"]:
                out[(a["victim"], ep)].add(a["kind"])
        return out

    def count(self, **match) -> int:
        """Sum of emitted packets whose key fields equal ``match``."""
        names = ("host", "epoch", "direction", "kind", "rcode", "relevance")
        total = 0
        for key, n in self.counts.items():
            rec = dict(zip(names, key))
            if all(rec[k] == v for k, v in match.items()):
                total += n
        return total

    def to_dict(self) -> dict[str, Any]:
        return {
            "archetypes": {h: self.archetypes[h].value for h in sort_hosts(self.archetypes)},
            "nat": {h: self.nat[h] for h in sort_hosts(self.nat)},
            "anomalies": self.anomalies,
            "counts": [list(k) + [n] for k, n in sorted(self.counts.items(), key=_count_order)],
            "total_events": self.total_events,
            "attributes": {
                str(day): [_vec_dict(v) for v in vecs] for day, vecs in sorted(self.attributes.items())
            },
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "GroundTruth":
        counts = Counter({tuple(row[:-1]): row[-1] for row in data["counts"]})
        return cls(
            archetypes={h: Archetype(a) for h, a in data["archetypes"].items()},
            nat=dict(data["nat"]),
            anomalies=list(data["anomalies"]),
            counts=counts,
            total_events=int(data["total_events"]),
            attributes={
                int(day): [AttributeVector(**v) for v in vecs] for day, vecs in data["attributes"].items()
            },
        )

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path) -> "GroundTruth":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _count_order(item):
    key = item[0]
    return (key[0], key[1], key[2], key[3], -1 if key[4] is None else key[4], key[5])


def _vec_dict(v: AttributeVector) -> dict[str, Any]:
    return {name: getattr(v, name) for name in v.__dataclass_fields__}


# -- qname templates --------------------------------------------------------

_PLACEHOLDER = re.compile(r"\[(\d+)digits\]")


def exfil_pattern(template: str, seed: int) -> str:
    """Replace the single ``[Ndigits]`` placeholder with N seeded digits."""
    found = _PLACEHOLDER.findall(template)
    if len(found) != 1:
        raise TemplateError(f"expected exactly one [Ndigits] placeholder in {template!r}")
    width = int(found[0])
    if width < 1:
        raise TemplateError("placeholder width must be at least 1")
    digits = np.random.default_rng(seed).integers(0, 10, size=width)
    return _PLACEHOLDER.sub("".join(map(str, digits)), template, count=1)


def template_regex(template: str) -> re.Pattern:
    parts = _PLACEHOLDER.split(template)
    if len(parts) != 3:
        raise TemplateError(f"expected exactly one [Ndigits] placeholder in {template!r}")
    return re.compile("^" + re.escape(parts[0]) + rf"\d{{{parts[1]}}}" + re.escape(parts[2]) + "$")


# -- helpers ----------------------------------------------------------------


class _Quota:
    """Evenly spread hits: after n calls, floor(n * p + phase) hits."""

    __slots__ = ("p", "acc")

    def __init__(self, p: float, phase: float = 0.0) -> None:
        self.p = min(max(p, 0.0), 1.0)
        self.acc = phase

    def __call__(self) -> bool:
        self.acc += self.p
        if self.acc >= 1.0 - 1e-12:
            self.acc -= 1.0
            return True
        return False


def _rng(seed: int, addr: str, *stream: int) -> np.random.Generator:
    ip = ipaddress.ip_address(addr)
    words = [(int(ip) >> s) & 0xFFFFFFFF for s in range(0, ip.max_prefixlen, 32)]
    return np.random.default_rng(np.random.SeedSequence([seed, ip.version, *words, *stream]))


def _pool_addr(net, index: int) -> str:
    return str(net.network_address + 1 + index)


@lru_cache(maxsize=1 << 16)
def _ext(kind: str, index: int, version: int) -> str:
    if version == 6:
        offset = {"server": 0, "client": 1 << 40, "attack": 2 << 40}[kind]
        return _pool_addr(_EXT_V6_NET, offset + index)
    net = {"server": _EXT_SERVER_NET, "client": _EXT_CLIENT_NET, "attack": _EXT_ATTACK_NET}[kind]
    return _pool_addr(net, index % (net.num_addresses - 2))


def _coverage_sequence(rng: np.random.Generator, n_items: int, length: int) -> list[int]:
    """``length`` draws from ``range(n_items)`` in which every item appears
    (when length allows), shuffled."""
    if n_items <= 0 or length <= 0:
        return []
    head = np.arange(min(n_items, length))
    tail = rng.integers(0, n_items, size=length - len(head))
    return rng.permutation(np.concatenate([head, tail])).tolist()


_ENT_LABELS = ("www", "mail", "portal", "library", "vpn", "lms", "wiki", "git", "cal", "intranet")
_EXT_DOMAINS = (
    "example.com", "cdn.example.net", "news.example.org", "video.example.com", "shop.example.net",
    "api.example.io", "static.example.org", "mail.example.com", "search.example.net", "social.example.com",
)
_QTYPES = np.array([QTYPE_A, QTYPE_AAAA, QTYPE_MX, QTYPE_TXT])
_QTYPE_P = np.array([0.7, 0.22, 0.05, 0.03])


# -- scenario realization ---------------------------------------------------


@dataclass
class _Profile:
    spec: HostSpec
    q: float
    hours: int
    n_servers: int
    n_clients: int
    servers: list[int]
    clients: list[int]
    lam_in: float
    lam_out: float


def _allocate(specs, shares, fixed, total_default) -> dict[str, int]:
    """Distinct external peer counts per host realizing share targets.

    ``shares`` maps targeted hosts to absolute shares, ``fixed`` maps hosts to
    exact counts; every other host in ``specs`` splits the remainder evenly.
    """
    free = [s for s in specs if s not in shares and s not in fixed]
    s_t = sum(shares.values())
    f = sum(fixed.values())
    if s_t > 1.0 + 1e-9:
        raise SpecError("targeted shares add up to more than 1")
    if free:
        total = total_default
        remainder = total * (1.0 - s_t) - f
        if remainder < len(free):
            raise SpecError("not enough external peers left for untargeted hosts")
        each = remainder / len(free)
    else:
        if s_t >= 1.0 - 1e-9:
            if f > 0:
                raise SpecError("targeted shares leave no room for fixed peer counts")
            total = total_default
        else:
            total = f / (1.0 - s_t) if f else total_default
        each = 0.0
    out = dict(fixed)
    for h, s in shares.items():
        out[h] = max(1, int(round(s * total))) if s > 0 else 0
    for h in free:
        out[h] = max(1, int(round(each)))
    return out


def _profiles(sc: Scenario) -> dict[str, _Profile]:
    srv_specs, cli_specs = [], []
    srv_share, cli_share, srv_fixed = {}, {}, {}
    hours, qs = {}, {}
    for hs in sc.hosts:
        t = hs.target
        rng = _rng(sc.seed, hs.addr, 0)
        a = hs.archetype
        q = t.qry_frac_out if t.qry_frac_out is not None else _DEFAULT_Q[a]
        qs[hs.addr] = q
        if hs.active_hours is not None:
            h = hs.active_hours
        elif t.actv_qry_out_time is not None:
            h = int(round(t.actv_qry_out_time * 24))
        elif a in _DRAWN_HOURS:
            lo, hi = _DRAWN_HOURS[a]
            h = int(rng.integers(lo, hi + 1))
        else:
            h = 24 if q > 0 else 0
        if q > 0 and h == 0:
            raise SpecError(f"{hs.addr}: queries requested but zero active hours")
        hours[hs.addr] = h if q > 0 else 0
        if q > 0:
            srv_specs.append(hs.addr)
            if hs.servers is not None:
                srv_fixed[hs.addr] = hs.servers
            elif t.frac_ext_srv is not None:
                srv_share[hs.addr] = t.frac_ext_srv
            elif a in _DRAWN_SERVERS:
                lo, hi = _DRAWN_SERVERS[a]
                srv_fixed[hs.addr] = int(rng.integers(lo, hi + 1))
        if q < 1:
            cli_specs.append(hs.addr)
            if t.frac_ext_client is not None:
                cli_share[hs.addr] = t.frac_ext_client
    n_srv = _allocate(srv_specs, srv_share, srv_fixed, sc.external_servers)
    n_cli = _allocate(cli_specs, cli_share, {}, sc.external_clients)
    out = {}
    for hs in sc.hosts:
        rng = _rng(sc.seed, hs.addr, 1)
        ns, nc = n_srv.get(hs.addr, 0), n_cli.get(hs.addr, 0)
        servers = rng.choice(1 << 16, size=ns, replace=False).tolist() if ns else []
        clients = rng.choice(1 << 15, size=nc, replace=False).tolist() if nc else []
        q, h = qs[hs.addr], hours[hs.addr]
        outgoing = hs.intensity * 24
        out[hs.addr] = _Profile(
            spec=hs,
            q=q,
            hours=h,
            n_servers=ns,
            n_clients=nc,
            servers=servers,
            clients=clients,
            lam_in=(1 - q) * outgoing / 24 / ANSWER_RATIO,
            lam_out=q * outgoing / h if h else 0.0,
        )
    return out


@dataclass
class _Lookup:
    """One query, optionally answered, in host-centric terms."""

    ts: int
    outbound: bool
    peer: str
    peer_port: int  # 0: pick an ephemeral port
    qname: str
    qtype: int
    answered: bool
    rcode: int


class _Emitter:
    def __init__(self, cfg: EnterpriseConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.events: list[tuple[int, int, DnsEvent]] = []
        self.counts: Counter = Counter()
        self.tallies: dict[int, dict[str, _HostTally]] = defaultdict(lambda: defaultdict(_HostTally))
        self._relevance: dict[str, str] = {}
        self._seq = 0
        self._pool: list[tuple[int, int, int]] = []
        self._offset = cfg.day_offset_us
        self._epoch_us = cfg.epoch_us

    def _draw(self) -> tuple[int, int, int]:
        """(txid, ephemeral port, response delay) from a pre-drawn batch."""
        if not self._pool:
            n = 4096
            txid = self.rng.integers(0, 1 << 16, size=n).tolist()
            port = self.rng.integers(1024, 65536, size=n).tolist()
            delay = self.rng.integers(1_000, 80_000, size=n).tolist()
            self._pool = list(zip(txid, port, delay))[::-1]
        return self._pool.pop()

    def _rel(self, qname: str) -> str:
        r = self._relevance.get(qname)
        if r is None:
            r = self._relevance[qname] = (
                "enterprise" if self.cfg.is_enterprise_name(qname) else "non_enterprise"
            )
        return r

    def _push(self, host: str, ev: DnsEvent, direction: str, kind: str) -> None:
        ts = ev.ts_us
        self.events.append((ts, self._seq, ev))
        self._seq += 1
        epoch = (ts + self._offset) // self._epoch_us
        self.counts[(host, epoch, direction, kind, ev.rcode, self._rel(ev.qname))] += 1

    def lookup(self, host: str, version: int, lk: _Lookup) -> None:
        txid, eph, delay = self._draw()
        if lk.outbound:
            src, sport, dst, dport = host, eph, lk.peer, DNS_PORT
            qdir, rdir = Direction.OUTBOUND, Direction.INBOUND
        else:
            src, sport, dst, dport = lk.peer, lk.peer_port or eph, host, DNS_PORT
            qdir, rdir = Direction.INBOUND, Direction.OUTBOUND
        qname, qtype = lk.qname, lk.qtype
        self._push(host, DnsEvent(
            lk.ts, qdir, version, _UDP, src, sport, dst, dport, _QUERY, txid,
            qname, qtype, None, False, message_length(qname, qtype, False, None),
        ), _DIR[qdir], "query")
        if not lk.answered:
            return
        self._push(host, DnsEvent(
            lk.ts + delay, rdir, version, _UDP, dst, dport, src, sport, _RESPONSE, txid,
            qname, qtype, lk.rcode, False, message_length(qname, qtype, True, lk.rcode),
        ), _DIR[rdir], "response")
        local = lk.ts + self._offset
        tally = self.tallies[local // DAY_US][host]
        if lk.outbound:
            tally.out_q += 1
            tally.hours.add(local % DAY_US // HOUR_US)
            tally.servers.add(lk.peer)
        else:
            tally.out_r += 1
            tally.clients.add(lk.peer)

    def unsolicited(self, host: str, version: int, ts: int, peer: str, qname: str) -> None:
        txid, eph, _ = self._draw()
        self._push(host, DnsEvent(
            ts, Direction.INBOUND, version, Transport.UDP, peer, DNS_PORT, host,
            eph, Kind.RESPONSE, txid,
            qname, QTYPE_ANY, NOERROR, False, message_length(qname, QTYPE_ANY, True, NOERROR),
        ), "in", "response")


_UDP, _QUERY, _RESPONSE = Transport.UDP, Kind.QUERY, Kind.RESPONSE
_DIR = {Direction.INBOUND: "in", Direction.OUTBOUND: "out"}


def _uniform_ts(rng: np.random.Generator, start: int, n: int) -> list[int]:
    return np.sort(rng.integers(start, start + HOUR_US, size=n)).tolist()


def _anomaly_hours(an: AnomalySpec, hour_start: int) -> bool:
    return an.start_us <= hour_start < an.end_us


def generate(sc: Scenario, cfg: EnterpriseConfig) -> tuple[list[DnsEvent], GroundTruth]:
    """Realize ``sc`` as a time-ordered event list and its GroundTruth."""
    _validate(sc, cfg)
    profiles = _profiles(sc)
    first_day = cfg.day_of(sc.start_us)
    emit = _Emitter(cfg, np.random.default_rng(np.random.SeedSequence([sc.seed, 0xE])))
    by_victim: dict[str, list[tuple[int, AnomalySpec]]] = defaultdict(list)
    for i, an in enumerate(sc.anomalies):
        by_victim[an.victim].append((i, an))
    anomaly_epochs: dict[int, set[int]] = defaultdict(set)

    for addr in sort_hosts(profiles):
        prof = profiles[addr]
        version = ipaddress.ip_address(addr).version
        for d in range(sc.duration):
            day = first_day + d
            _host_day(sc, cfg, emit, prof, version, day, by_victim.get(addr, []), anomaly_epochs)

    emit.events.sort(key=lambda item: (item[0], item[1]))
    events = [ev for _, _, ev in emit.events]
    attributes = {day: _vectors(t, day) for day, t in sorted(emit.tallies.items())}
    truth = GroundTruth(
        archetypes={h.addr: h.archetype for h in sc.hosts},
        nat={h.addr: h.archetype is Archetype.NAT_GATEWAY for h in sc.hosts
             if h.archetype in (Archetype.END_HOST, Archetype.NAT_GATEWAY)},
        anomalies=[
            {"kind": an.kind.value, "victim": an.victim, "epochs": sorted(anomaly_epochs[i])}
            for i, an in enumerate(sc.anomalies)
        ],
        counts=emit.counts,
        total_events=len(events),
        attributes=attributes,
    )
    return events, truth


def _host_day(sc, cfg, emit: _Emitter, prof: _Profile, version: int, day: int, anomalies, anomaly_epochs) -> None:
    spec = prof.spec
    addr = spec.addr
    rng = _rng(sc.seed, addr, 2, day)
    arng = _rng(sc.seed, addr, 3, day)
    day_start = cfg.day_start(day)

    active = sorted(rng.choice(24, size=prof.hours, replace=False).tolist()) if prof.hours else []
    in_counts = rng.poisson(prof.lam_in, size=24) if prof.lam_in > 0 else np.zeros(24, int)
    out_counts = np.zeros(24, int)
    if prof.lam_out > 0:
        out_counts[active] = np.maximum(1, rng.poisson(prof.lam_out, size=len(active)))
    server_seq = _coverage_sequence(rng, prof.n_servers, int(out_counts.sum()))
    client_seq = _coverage_sequence(rng, prof.n_clients, int(in_counts.sum()))
    ent_out = ENDHOST_ENTERPRISE_SHARE if spec.archetype in (Archetype.END_HOST, Archetype.NAT_GATEWAY) else 0.0

    answered_q = _Quota(ANSWER_RATIO, rng.random())
    error_q = _Quota(ERROR_FRACTION, rng.random())
    ent_q = _Quota(ent_out, rng.random())
    seen_servers: set[int] = set()
    si = ci = 0

    for hour in range(24):
        h0 = day_start + hour * HOUR_US
        live = [(i, an) for i, an in anomalies if _anomaly_hours(an, h0)]
        for i, _ in live:
            anomaly_epochs[i].add(cfg.epoch_of(h0))
        kinds = {an.kind: an for _, an in live}
        misconf = kinds.get(AnomalyKind.MISCONFIGURATION)
        mis_q = _Quota(misconf.share if misconf and misconf.share is not None else 0.45) if misconf else None
        mis_err = _Quota(misconf.error_fraction if misconf and misconf.error_fraction is not None else 0.8) if misconf else None

        # Inbound (served) lookups.
        n_in = int(in_counts[hour])
        in_ts = _uniform_ts(rng, h0, n_in)
        qtypes = rng.choice(_QTYPES, size=n_in, p=_QTYPE_P).tolist()
        flood = kinds.get(AnomalyKind.QUERY_DDOS)
        flood_n = int(arng.poisson((flood.magnitude - 1) * prof.lam_in)) if flood else 0
        base_answer = None
        flood_answer = None
        if flood:
            s = flood.service_ratio if flood.service_ratio is not None else 0.6
            total_ans = s * (n_in + flood_n)
            if flood.nelf is not None:
                flood_ans = min(flood_n, flood.nelf * total_ans)
                base_ans = min(n_in, total_ans - flood_ans)
                base_answer = _Quota(base_ans / n_in if n_in else 0.0, 0.5)
                flood_answer = _Quota(flood_ans / flood_n if flood_n else 0.0, 0.5)
            else:
                base_answer = _Quota(s, 0.5)
                flood_answer = _Quota(s, 0.5)
        for k in range(n_in):
            cid = prof.clients[client_seq[ci]]
            ci += 1
            ans = base_answer() if base_answer else answered_q()
            if mis_q is not None and mis_q():
                qname = _EXT_DOMAINS[int(rng.integers(len(_EXT_DOMAINS)))]
                rcode = REFUSED if mis_err() else NOERROR
            else:
                qname = f"{_ENT_LABELS[int(rng.integers(len(_ENT_LABELS)))]}.{_zone(cfg)}"
                rcode = NXDOMAIN if (ans and error_q()) else NOERROR
            emit.lookup(addr, version, _Lookup(
                in_ts[k], False, _ext("client", cid, version), 0,
                qname, qtypes[k], ans, rcode,
            ))
        if flood_n:
            pattern = flood.qname_pattern or "aids.gov"
            err_q = _Quota(flood.error_fraction or 0.0, 0.5)
            for k, ts in enumerate(_uniform_ts(arng, h0, flood_n)):
                src = _ext("attack", int(arng.integers(flood.sources)), version)
                qname = exfil_pattern(pattern, int(arng.integers(1 << 31))) if "[" in pattern else pattern
                ans = flood_answer()
                emit.lookup(addr, version, _Lookup(
                    ts, False, src, 0, qname, QTYPE_A, ans,
                    REFUSED if (ans and err_q()) else NOERROR,
                ))
        refl = kinds.get(AnomalyKind.REFLECTOR)
        if refl and prof.lam_in > 0:
            n_ref = int(arng.poisson((refl.magnitude - 1) * prof.lam_in))
            ans_q = _Quota(refl.answer_ratio if refl.answer_ratio is not None else ANSWER_RATIO, 0.5)
            err_q = _Quota(refl.error_fraction or 0.0, 0.5)
            for ts in _uniform_ts(arng, h0, n_ref):
                victim = _ext("attack", 50_000 + int(arng.integers(8)), version)
                qname = refl.qname_pattern or f"{_ENT_LABELS[int(arng.integers(len(_ENT_LABELS)))]}.{_zone(cfg)}"
                ans = ans_q()
                emit.lookup(addr, version, _Lookup(
                    ts, False, victim, 0, qname, QTYPE_ANY, ans,
                    REFUSED if (ans and err_q()) else NOERROR,
                ))

        # Outbound (initiated) lookups.
        n_out = int(out_counts[hour])
        out_ts = _uniform_ts(rng, h0, n_out)
        qtypes = rng.choice(_QTYPES, size=n_out, p=_QTYPE_P).tolist()
        scan = kinds.get(AnomalyKind.SCAN)
        scan_q = _Quota(scan.share if scan.share is not None else 0.7, 0.5) if scan else None
        scan_ans = _Quota(scan.answer_ratio if scan.answer_ratio is not None else 0.3, 0.5) if scan else None
        for k in range(n_out):
            sid = prof.servers[server_seq[si]]
            si += 1
            first = sid not in seen_servers
            if scan_q is not None and scan_q():
                peer = _ext("attack", 60_000 + int(arng.integers(5000)), version)
                qname = f"probe{int(arng.integers(100000))}.example.net"
                ans = scan_ans()
                emit.lookup(addr, version, _Lookup(
                    out_ts[k], True, peer, DNS_PORT, qname, qtypes[k], ans,
                    REFUSED if ans else NOERROR,
                ))
                continue
            seen_servers.add(sid)
            ans = answered_q() or first
            if mis_q is not None and mis_q():
                qname = f"{_ENT_LABELS[int(rng.integers(len(_ENT_LABELS)))]}.{_zone(cfg)}"
                rcode = NXDOMAIN if mis_err() else NOERROR
            elif ent_q():
                qname = f"{_ENT_LABELS[int(rng.integers(len(_ENT_LABELS)))]}.{_zone(cfg)}"
                rcode = NXDOMAIN if (ans and error_q()) else NOERROR
            else:
                qname = _EXT_DOMAINS[int(rng.integers(len(_EXT_DOMAINS)))]
                rcode = NXDOMAIN if (ans and error_q()) else NOERROR
            emit.lookup(addr, version, _Lookup(
                out_ts[k], True, _ext("server", sid, version), DNS_PORT, qname, qtypes[k], ans, rcode,
            ))
        exfil = kinds.get(AnomalyKind.EXFILTRATION)
        if exfil and prof.lam_out > 0 and n_out:
            n_ex = int(arng.poisson((exfil.magnitude - 1) * prof.lam_out))
            ans_q = _Quota(exfil.answer_ratio if exfil.answer_ratio is not None else 0.35, 0.5)
            pattern = exfil.qname_pattern or "sarica[10digits].com"
            sink = _ext("attack", 40_000, version)
            for ts in _uniform_ts(arng, h0, n_ex):
                qname = exfil_pattern(pattern, int(arng.integers(1 << 31)))
                emit.lookup(addr, version, _Lookup(
                    ts, True, sink, DNS_PORT, qname, QTYPE_TXT, ans_q(), NXDOMAIN,
                ))
        rflood = kinds.get(AnomalyKind.RESPONSE_DDOS)
        if rflood and prof.lam_out > 0 and n_out:
            n_un = int(arng.poisson((rflood.magnitude - 1) * prof.lam_out * ANSWER_RATIO))
            qname = rflood.qname_pattern or "aids.gov"
            for ts in _uniform_ts(arng, h0, n_un):
                emit.unsolicited(addr, version, ts, _ext("attack", int(arng.integers(rflood.sources)), version), qname)


def _zone(cfg: EnterpriseConfig) -> str:
    return cfg.enterprise_zones[0]


def _validate(sc: Scenario, cfg: EnterpriseConfig) -> None:
    seen = set()
    for hs in sc.hosts:
        try:
            ip = ipaddress.ip_address(hs.addr)
        except ValueError as exc:
            raise SpecError(str(exc)) from exc
        if ip in seen:
            raise SpecError(f"host address {hs.addr} listed twice")
        seen.add(ip)
        if not cfg.is_internal(hs.addr):
            raise SpecError(f"host {hs.addr} is outside the internal prefixes")
        if hs.intensity < 0:
            raise SpecError(f"host {hs.addr}: negative intensity")
    archetype = {h.addr: h.archetype for h in sc.hosts}
    for an in sc.anomalies:
        if an.victim not in archetype:
            raise SpecError(f"anomaly victim {an.victim} is not a scenario host")
        if an.end_us <= an.start_us:
            raise SpecError(f"anomaly on {an.victim} ends before it starts")
        a = archetype[an.victim]
        needs_inbound = an.kind in (AnomalyKind.QUERY_DDOS, AnomalyKind.REFLECTOR)
        needs_outbound = an.kind in (AnomalyKind.RESPONSE_DDOS, AnomalyKind.SCAN, AnomalyKind.EXFILTRATION)
        if needs_inbound and a not in _SERVES:
            raise SpecError(f"{an.kind.value} needs a host that serves queries")
        if needs_outbound and a not in _QUERIES:
            raise SpecError(f"{an.kind.value} needs a host that sends queries")
        if an.magnitude < 1 and an.kind not in (AnomalyKind.MISCONFIGURATION, AnomalyKind.SCAN):
            raise SpecError("magnitude is a rate multiplier and must be >= 1")


# -- scenario files ---------------------------------------------------------


def _timestamp(value: Union[str, int, float], start_us: int) -> int:
    """Absolute ISO 8601 time, or an offset such as ``"36h"`` from the start."""
    if isinstance(value, (int, float)):
        return start_us + parse_duration(value, "h")
    try:
        return start_us + parse_duration(value, "h")
    except ConfigError:
        pass
    try:
        dt = datetime.fromisoformat(value.replace("Z", "+00:00"))
    except ValueError as exc:
        raise SpecError(f"bad timestamp {value!r}") from exc
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(round(dt.timestamp() * 1_000_000))


def _host_specs(entry: dict[str, Any]) -> list[HostSpec]:
    try:
        archetype = Archetype(entry["archetype"])
    except (KeyError, ValueError) as exc:
        raise SpecError(f"bad or missing archetype in {entry}") from exc
    target = TargetAttributes(**entry.get("target", {}))
    common = dict(
        archetype=archetype,
        intensity=float(entry.get("intensity", 10.0)),
        target=target,
        servers=entry.get("servers"),
        active_hours=entry.get("active_hours"),
    )
    if "count" in entry:
        first = ipaddress.ip_address(entry["addr_start"])
        return [HostSpec(addr=str(first + i), **common) for i in range(int(entry["count"]))]
    return [HostSpec(addr=entry["addr"], **common)]


def scenario_from_dict(data: dict[str, Any], cfg: EnterpriseConfig) -> Scenario:
    try:
        start = data.get("start", DEFAULT_START)
        start_us = cfg.day_start(cfg.day_of(_timestamp(start, 0)))
        hosts = [h for entry in data.get("hosts", []) for h in _host_specs(entry)]
        anomalies = []
        for a in data.get("anomalies", []):
            anomalies.append(AnomalySpec(
                kind=AnomalyKind(a["kind"]),
                victim=a["victim"],
                start_us=_timestamp(a["start"], start_us),
                end_us=_timestamp(a["end"], start_us),
                magnitude=float(a.get("magnitude", 1.0)),
                qname_pattern=a.get("qname_pattern"),
                share=a.get("share"),
                service_ratio=a.get("service_ratio"),
                nelf=a.get("nelf"),
                answer_ratio=a.get("answer_ratio"),
                error_fraction=a.get("error_fraction"),
                sources=int(a.get("sources", 974)),
            ))
        return Scenario(
            seed=int(data.get("seed", 0)),
            duration=int(data.get("duration", 1)),
            hosts=hosts,
            anomalies=anomalies,
            start_us=start_us,
            external_servers=int(data.get("external_servers", DEFAULT_EXTERNAL_SERVERS)),
            external_clients=int(data.get("external_clients", DEFAULT_EXTERNAL_CLIENTS)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, SpecError):
            raise
        raise SpecError(f"bad scenario: {exc}") from exc


def load_scenario(path, cfg: Optional[EnterpriseConfig] = None) -> tuple[Scenario, EnterpriseConfig]:
    """Read a scenario document; its ``enterprise`` section supplies the
    config unless one is passed in."""
    data = load_document(path)
    if cfg is None:
        if "enterprise" not in data:
            raise ConfigError(f"{path}: no enterprise section and no config given")
        cfg = EnterpriseConfig.from_dict(data["enterprise"])
    return scenario_from_dict(data, cfg), cfg


SCENARIO_DIR = Path(__file__).with_name("scenarios")


def bundled(name: str) -> Path:
    path = SCENARIO_DIR / f"{name}.json"
    if not path.exists():
        raise FileNotFoundError(f"no bundled scenario named {name!r}")
    return path
