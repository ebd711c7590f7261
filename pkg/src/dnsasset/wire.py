"""DNS wire-format decoding into flat per-packet events.

Only the header, the first question and the record framing are decoded;
answer RDATA is skipped by length.  A message is *malformed* when the
header counts disagree with the payload (short or trailing bytes) or when a
name cannot be resolved (reserved label types, pointer loops, overlong
names).  The last two checks go beyond plain count mismatch and are
reported as such.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Optional

DNS_PORT = 53
HEADER_LEN = 12
MAX_POINTER_JUMPS = 128
MAX_NAME_LEN = 255

_HEADER = struct.Struct("!6H")
_U16 = struct.Struct("!H")
_RR_FIXED = struct.Struct("!HHIH")


class EnvelopeError(ValueError):
    """The packet cannot carry a DNS message we account for."""


class Direction(str, enum.Enum):
    INBOUND = "in"
    OUTBOUND = "out"


class Transport(str, enum.Enum):
    UDP = "udp"
    TCP = "tcp"


class Kind(str, enum.Enum):
    QUERY = "query"
    RESPONSE = "response"


QTYPE_CODES = {
    "A": 1,
    "NS": 2,
    "CNAME": 5,
    "SOA": 6,
    "PTR": 12,
    "MX": 15,
    "TXT": 16,
    "AAAA": 28,
    "SRV": 33,
    "NAPTR": 35,
    "A6": 38,
    "DS": 43,
    "RRSIG": 46,
    "NSEC": 47,
    "DNSKEY": 48,
    "NSEC3": 50,
    "SPF": 99,
    "ANY": 255,
    "DLV": 32769,
}
QTYPE_NAMES = {code: name for name, code in QTYPE_CODES.items()}
DNSSEC_QTYPES = frozenset({"DNSKEY", "DS", "RRSIG", "NSEC", "NSEC3", "DLV"})
DEPRECATED_QTYPES = frozenset({"ANY", "A6", "NAPTR"})

RCODE_NAMES = {0: "NoError", 2: "ServFail", 3: "NXDOMAIN", 5: "Refused"}
NOERROR, SERVFAIL, NXDOMAIN, REFUSED = 0, 2, 3, 5


@dataclass(frozen=True)
class QType:
    code: int
    name: str
    dnssec: bool = False
    deprecated: bool = False

    @property
    def known(self) -> bool:
        return self.name != "Other"


def classify_qtype(code: int) -> QType:
    """Map a numeric qtype to its name and service-group flags."""
    if not 0 <= code <= 0xFFFF:
        raise ValueError(f"qtype out of range: {code}")
    name = QTYPE_NAMES.get(code)
    if name is None:
        return QType(code, "Other")
    return QType(code, name, name in DNSSEC_QTYPES, name in DEPRECATED_QTYPES)


def rcode_class(rcode: Optional[int]) -> str:
    if rcode is None:
        return "None"
    return RCODE_NAMES.get(rcode, "Other")


@dataclass(frozen=True)
class Envelope:
    """Transport metadata captured alongside a DNS payload."""

    ts_us: int
    src: str
    dst: str
    sport: int
    dport: int
    transport: Transport = Transport.UDP
    ip_version: int = 4
    direction: Direction = Direction.OUTBOUND


@dataclass(frozen=True, slots=True)
class DnsEvent:
    ts_us: int
    direction: Direction
    ip_version: int
    transport: Transport
    src: str
    sport: int
    dst: str
    dport: int
    kind: Kind
    txid: int
    qname: str
    qtype: Optional[int]
    rcode: Optional[int]
    malformed: bool
    wire_len: int

    @property
    def is_query(self) -> bool:
        return self.kind is Kind.QUERY

    @property
    def is_error(self) -> bool:
        return self.rcode is not None and self.rcode != NOERROR


class _Malformed(Exception):
    pass


def _read_name(raw: bytes, off: int, n: int) -> tuple[str, int]:
    """Decode a possibly compressed name; return (name, offset after it)."""
    labels: list[str] = []
    end = -1
    jumps = 0
    total = 1
    while True:
        if off >= n:
            raise _Malformed("name runs past payload")
        length = raw[off]
        if length == 0:
            off += 1
            break
        tag = length & 0xC0
        if tag == 0xC0:
            if off + 1 >= n:
                raise _Malformed("truncated pointer")
            jumps += 1
            if jumps > MAX_POINTER_JUMPS:
                raise _Malformed("pointer budget exhausted")
            if end < 0:
                end = off + 2
            off = ((length & 0x3F) << 8) | raw[off + 1]
            continue
        if tag:
            raise _Malformed("reserved label type")
        off += 1
        stop = off + length
        if stop > n:
            raise _Malformed("label runs past payload")
        total += length + 1
        if total > MAX_NAME_LEN:
            raise _Malformed("name too long")
        labels.append(raw[off:stop].lower().decode("latin-1"))
        off = stop
    return ".".join(labels), (end if end >= 0 else off)


def _skip_name(raw: bytes, off: int, n: int) -> int:
    # RR owner names are validated the same way as question names.
    return _read_name(raw, off, n)[1]


def parse_message(raw: bytes, env: Envelope) -> DnsEvent:
    """Decode one DNS payload (UDP data or a de-framed TCP message).

    Raises EnvelopeError when neither port is 53 or the payload cannot hold
    a header.  Every other defect yields an event with ``malformed=True``
    and whatever fields were recovered before the defect.
    """
    if env.sport != DNS_PORT and env.dport != DNS_PORT:
        raise EnvelopeError("neither port is 53")
    n = len(raw)
    if n < HEADER_LEN:
        raise EnvelopeError(f"payload of {n} bytes is shorter than a DNS header")
    txid, flags, qdcount, ancount, nscount, arcount = _HEADER.unpack_from(raw)
    response = bool(flags & 0x8000)
    qname = ""
    qtype = None
    malformed = False
    try:
        off = HEADER_LEN
        for i in range(qdcount):
            name, off = _read_name(raw, off, n)
            if i == 0:
                qname = name
            if off + 4 > n:
                raise _Malformed("truncated question")
            if i == 0:
                qtype = _U16.unpack_from(raw, off)[0]
            off += 4
        for _ in range(ancount + nscount + arcount):
            off = _skip_name(raw, off, n)
            if off + 10 > n:
                raise _Malformed("truncated record header")
            rdlen = _RR_FIXED.unpack_from(raw, off)[3]
            off += 10 + rdlen
            if off > n:
                raise _Malformed("rdata runs past payload")
        if off != n:
            raise _Malformed("trailing bytes after last record")
    except _Malformed:
        malformed = True
    return DnsEvent(
        ts_us=env.ts_us,
        direction=env.direction,
        ip_version=env.ip_version,
        transport=env.transport,
        src=env.src,
        sport=env.sport,
        dst=env.dst,
        dport=env.dport,
        kind=Kind.RESPONSE if response else Kind.QUERY,
        txid=txid,
        qname=qname,
        qtype=qtype,
        rcode=(flags & 0x000F) if response else None,
        malformed=malformed,
        wire_len=n,
    )


# -- encoding ---------------------------------------------------------------

_A_RDATA = b"\xc0\x00\x02\x01"


def encode_name(name: str) -> bytes:
    if not name:
        return b"\x00"
    out = bytearray()
    for label in name.split("."):
        raw = label.encode("latin-1")
        if not 0 < len(raw) < 64:
            raise ValueError(f"bad label in {name!r}")
        out.append(len(raw))
        out += raw
    out.append(0)
    return bytes(out)


def encode_message(
    txid: int,
    qname: str,
    qtype: Optional[int],
    response: bool = False,
    rcode: int = NOERROR,
) -> bytes:
    """Build a minimal message: one question, plus one compressed answer
    record for successful responses."""
    flags = 0x0100
    answers = 0
    body = b""
    if qtype is not None:
        body = encode_name(qname) + struct.pack("!HH", qtype, 1)
    if response:
        flags |= 0x8080 | (rcode & 0xF)
        if rcode == NOERROR and qtype is not None:
            answers = 1
            body += struct.pack("!HHHIH", 0xC00C, qtype, 1, 300, len(_A_RDATA)) + _A_RDATA
    header = _HEADER.pack(txid, flags, 1 if qtype is not None else 0, answers, 0, 0)
    return header + body


def message_length(qname: str, qtype: Optional[int], response: bool, rcode: Optional[int]) -> int:
    """Length of ``encode_message`` output without building it."""
    if qtype is None:
        return HEADER_LEN
    size = HEADER_LEN + (len(qname) + 2 if qname else 1) + 4
    if response and rcode == NOERROR:
        size += 12 + len(_A_RDATA)
    return size


def encode_event(ev: DnsEvent) -> bytes:
    return encode_message(
        ev.txid, ev.qname, ev.qtype, ev.kind is Kind.RESPONSE, ev.rcode or NOERROR
    )


def envelope_of(ev: DnsEvent) -> Envelope:
    return Envelope(
        ev.ts_us, ev.src, ev.dst, ev.sport, ev.dport, ev.transport, ev.ip_version, ev.direction
    )
