"""Turning captures and event files into DnsEvent streams, and auditing them."""

from __future__ import annotations

import json
import socket
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Any, Iterable, Iterator, Optional, Union

import dpkt

from .config import EnterpriseConfig
from .wire import (
    DNS_PORT,
    DnsEvent,
    Direction,
    EnvelopeError,
    Envelope,
    Kind,
    Transport,
    classify_qtype,
    parse_message,
    rcode_class,
)

SCHEMA_VERSION = 1
PathLike = Union[str, Path]


class FileFormatError(ValueError):
    pass


class SchemaError(ValueError):
    pass


def direction_of(src: str, cfg: EnterpriseConfig) -> Direction:
    return Direction.OUTBOUND if cfg.is_internal(src) else Direction.INBOUND


# -- pcap -------------------------------------------------------------------

_PCAP_MAGICS = {
    b"\xd4\xc3\xb2\xa1",
    b"\xa1\xb2\xc3\xd4",
    b"\x4d\x3c\xb2\xa1",
    b"\xa1\xb2\x3c\x4d",
}
_PCAPNG_MAGIC = b"\x0a\x0d\x0d\x0a"


def _open_capture(fh: IO[bytes]):
    magic = fh.read(4)
    fh.seek(0)
    try:
        if magic in _PCAP_MAGICS:
            return dpkt.pcap.Reader(fh)
        if magic == _PCAPNG_MAGIC:
            return dpkt.pcapng.Reader(fh)
    except (ValueError, dpkt.dpkt.Error) as exc:
        raise FileFormatError(str(exc)) from exc
    raise FileFormatError(f"not a pcap/pcapng file (magic {magic.hex()})")


def _ip_layer(buf: bytes, linktype: int):
    if linktype == dpkt.pcap.DLT_EN10MB:
        eth = dpkt.ethernet.Ethernet(buf)
        return eth.data
    if linktype in (dpkt.pcap.DLT_RAW, 12, 14, 228, 229):
        version = buf[0] >> 4 if buf else 0
        return dpkt.ip.IP(buf) if version == 4 else dpkt.ip6.IP6(buf)
    if linktype == dpkt.pcap.DLT_LINUX_SLL:
        return dpkt.sll.SLL(buf).data
    if linktype == dpkt.pcap.DLT_NULL:
        return dpkt.loopback.Loopback(buf).data
    raise FileFormatError(f"unsupported link type {linktype}")


_SEQ_MASK = 0xFFFFFFFF


class _TcpStreams:
    """Per-direction TCP byte streams carved into length-prefixed messages."""

    def __init__(self) -> None:
        self._next_seq: dict[tuple, int] = {}
        self._buf: dict[tuple, bytearray] = {}

    def feed(self, key: tuple, seq: int, payload: bytes, syn: bool) -> list[bytes]:
        if syn:
            self._next_seq[key] = (seq + 1) & _SEQ_MASK
            self._buf[key] = bytearray()
        if not payload:
            return []
        expected = self._next_seq.get(key)
        if expected is None:
            # Stream picked up mid-flight: trust the first segment we see.
            expected = seq
            self._buf[key] = bytearray()
        delta = (seq - expected) & _SEQ_MASK
        if delta >= 0x80000000:
            # Retransmission or overlap; keep only unseen bytes.
            overlap = (expected - seq) & _SEQ_MASK
            if overlap >= len(payload):
                return []
            payload = payload[overlap:]
        elif delta:
            # Gap (lost segment): resynchronise on this one.
            self._buf[key] = bytearray()
            expected = seq
        self._next_seq[key] = (expected + len(payload)) & _SEQ_MASK
        buf = self._buf[key]
        buf += payload
        messages = []
        while len(buf) >= 2:
            size = (buf[0] << 8) | buf[1]
            if len(buf) < 2 + size:
                break
            messages.append(bytes(buf[2 : 2 + size]))
            del buf[: 2 + size]
        return messages


def _addr(raw: bytes, version: int) -> str:
    return socket.inet_ntop(socket.AF_INET if version == 4 else socket.AF_INET6, raw)


def read_pcap(
    path: PathLike, cfg: EnterpriseConfig, tally: Optional[Counter] = None
) -> Iterator[DnsEvent]:
    """Yield DNS events from a pcap/pcapng file in file order.

    Packets that carry no DNS message are counted in ``tally`` under a
    reason key rather than raised.
    """
    tally = tally if tally is not None else Counter()
    streams = _TcpStreams()
    with open(path, "rb") as fh:
        reader = _open_capture(fh)
        linktype = reader.datalink()
        try:
            for ts, buf in reader:
                yield from _packet_events(ts, buf, linktype, cfg, streams, tally)
        except (dpkt.dpkt.NeedData, dpkt.dpkt.UnpackError, ValueError) as exc:
            raise FileFormatError(f"{path}: {exc}") from exc


def _packet_events(ts, buf, linktype, cfg, streams, tally) -> Iterator[DnsEvent]:
    try:
        ip = _ip_layer(buf, linktype)
    except (dpkt.dpkt.UnpackError, IndexError):
        tally["undecodable"] += 1
        return
    if isinstance(ip, dpkt.ip.IP):
        version = 4
        if ip.offset & dpkt.ip.IP_OFFMASK or ip.mf:
            tally["ip_fragment"] += 1
            return
    elif isinstance(ip, dpkt.ip6.IP6):
        version = 6
    else:
        tally["non_ip"] += 1
        return
    l4 = ip.data
    if isinstance(l4, dpkt.udp.UDP):
        transport = Transport.UDP
    elif isinstance(l4, dpkt.tcp.TCP):
        transport = Transport.TCP
    else:
        tally["non_udp_tcp"] += 1
        return
    if l4.sport != DNS_PORT and l4.dport != DNS_PORT:
        tally["non_port53"] += 1
        return
    src, dst = _addr(ip.src, version), _addr(ip.dst, version)
    env = Envelope(
        ts_us=int(round(float(ts) * 1_000_000)),
        src=src,
        dst=dst,
        sport=l4.sport,
        dport=l4.dport,
        transport=transport,
        ip_version=version,
        direction=direction_of(src, cfg),
    )
    if transport is Transport.UDP:
        payloads = [bytes(l4.data)]
    else:
        key = (src, l4.sport, dst, l4.dport)
        payloads = streams.feed(key, l4.seq, bytes(l4.data), bool(l4.flags & dpkt.tcp.TH_SYN))
        if not l4.data:
            tally["tcp_no_payload"] += 1
            return
        if not payloads:
            tally["tcp_partial"] += 1
            return
    for payload in payloads:
        try:
            yield parse_message(payload, env)
        except EnvelopeError:
            tally["short_payload"] += 1


# -- event records ----------------------------------------------------------


def event_to_record(ev: DnsEvent) -> dict[str, Any]:
    return {
        "v": SCHEMA_VERSION,
        "ts_us": ev.ts_us,
        "dir": ev.direction.value,
        "ipv": ev.ip_version,
        "proto": ev.transport.value,
        "src": ev.src,
        "sport": ev.sport,
        "dst": ev.dst,
        "dport": ev.dport,
        "kind": ev.kind.value,
        "txid": ev.txid,
        "qname": ev.qname,
        "qtype": ev.qtype,
        "rcode": ev.rcode,
        "malformed": ev.malformed,
        "wire_len": ev.wire_len,
    }


def record_to_event(rec: dict[str, Any]) -> DnsEvent:
    version = rec.get("v")
    if version != SCHEMA_VERSION:
        raise SchemaError(f"unsupported event schema version {version!r}")
    try:
        return DnsEvent(
            ts_us=int(rec["ts_us"]),
            direction=Direction(rec["dir"]),
            ip_version=int(rec["ipv"]),
            transport=Transport(rec["proto"]),
            src=rec["src"],
            sport=int(rec["sport"]),
            dst=rec["dst"],
            dport=int(rec["dport"]),
            kind=Kind(rec["kind"]),
            txid=int(rec["txid"]),
            qname=rec["qname"],
            qtype=rec["qtype"],
            rcode=rec["rcode"],
            malformed=bool(rec["malformed"]),
            wire_len=int(rec["wire_len"]),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise SchemaError(f"bad event record: {exc}") from exc


def dump_jsonl_line(obj: Any) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False)


def write_events(
    path: PathLike, events: Iterable[DnsEvent], meta: Optional[dict[str, Any]] = None
) -> int:
    """Write one record per line, optionally preceded by a ``_meta`` line."""
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if meta is not None:
            fh.write(dump_jsonl_line({"_meta": meta}) + "\n")
        for ev in events:
            fh.write(dump_jsonl_line(event_to_record(ev)) + "\n")
            n += 1
    return n


def read_events(path: PathLike) -> Iterator[DnsEvent]:
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from exc
            if "_meta" in rec:
                continue
            yield record_to_event(rec)


def read_meta(path: PathLike) -> Optional[dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline().strip()
    if not first:
        return None
    rec = json.loads(first)
    return rec.get("_meta")


# -- summaries --------------------------------------------------------------


@dataclass
class TrafficSummary:
    """Packet counts along the network, functional and service axes.

    ``network`` keys are (direction, ip_version, transport, kind, malformed);
    ``rcodes`` keys are (direction, rcode class) over responses;
    ``qtypes`` keys are (direction, kind, qtype name) over well-formed
    packets with a question.
    """

    total: int = 0
    network: Counter = field(default_factory=Counter)
    rcodes: Counter = field(default_factory=Counter)
    qtypes: Counter = field(default_factory=Counter)
    dnssec: Counter = field(default_factory=Counter)
    deprecated: Counter = field(default_factory=Counter)

    def cell(self, direction, ip_version, transport, kind, malformed=None) -> int:
        if malformed is None:
            return sum(
                self.network[(direction, ip_version, transport, kind, m)] for m in (False, True)
            )
        return self.network[(direction, ip_version, transport, kind, malformed)]

    def rcode_fraction(self, name: str, direction: Optional[Direction] = None) -> float:
        keys = [k for k in self.rcodes if direction is None or k[0] is direction]
        total = sum(self.rcodes[k] for k in keys)
        hits = sum(self.rcodes[k] for k in keys if k[1] == name)
        return hits / total if total else 0.0

    @property
    def deprecated_total(self) -> int:
        return sum(self.deprecated.values())

    @property
    def dnssec_total(self) -> int:
        return sum(self.dnssec.values())

    def rows(self) -> list[tuple[str, str, int]]:
        """Flat (table, key, count) rows for reports."""
        out = []
        for name in ("network", "rcodes", "qtypes", "dnssec", "deprecated"):
            counter: Counter = getattr(self, name)
            for key in sorted(counter, key=lambda k: tuple(str(p) for p in k)):
                label = "/".join(_label(p) for p in key)
                out.append((name, label, counter[key]))
        return out


def _label(part: Any) -> str:
    if isinstance(part, (Direction, Transport, Kind)):
        return part.value
    if isinstance(part, bool):
        return "malformed" if part else "ok"
    if isinstance(part, int):
        return f"v{part}"
    return str(part)


def summarize_traffic(events: Iterable[DnsEvent]) -> TrafficSummary:
    s = TrafficSummary()
    qtype_cache: dict[int, Any] = {}
    for ev in events:
        s.total += 1
        s.network[(ev.direction, ev.ip_version, ev.transport, ev.kind, ev.malformed)] += 1
        if ev.kind is Kind.RESPONSE:
            s.rcodes[(ev.direction, rcode_class(ev.rcode))] += 1
        if ev.malformed or ev.qtype is None:
            continue
        info = qtype_cache.get(ev.qtype)
        if info is None:
            info = qtype_cache[ev.qtype] = classify_qtype(ev.qtype)
        key = (ev.direction, ev.kind)
        s.qtypes[key + (info.name,)] += 1
        if info.dnssec:
            s.dnssec[key] += 1
        if info.deprecated:
            s.deprecated[key] += 1
    return s
