"""Shared fixtures: bundled scenarios run once per session, pcap writer."""

from __future__ import annotations

import functools
import socket
from dataclasses import dataclass, field
from typing import Optional

import dpkt
import pytest

from dnsasset.attributes import extract_days
from dnsasset.clustering import DayClassification, RoleAssignment, classify_day
from dnsasset.config import EnterpriseConfig
from dnsasset.health import track_health
from dnsasset.inference import build_codebook, diagnose
from dnsasset.pairing import PairingResult, pair
from dnsasset.synth import GroundTruth, bundled, generate, load_scenario
from dnsasset.wire import DnsEvent, Transport, encode_event

CFG = EnterpriseConfig(
    internal_prefixes=["10.20.0.0/16", "2001:db8:20::/48"],
    enterprise_zones=["example.edu"],
)


@dataclass
class Run:
    cfg: EnterpriseConfig
    events: list[DnsEvent]
    truth: GroundTruth
    pairing: PairingResult
    days: dict
    classified: dict[int, DayClassification] = field(default_factory=dict)
    roles: list[RoleAssignment] = field(default_factory=list)
    health: Optional[list] = None
    diagnoses: Optional[list] = None


@functools.lru_cache(maxsize=None)
def run_scenario(name: str, classify: bool = True, health: bool = True) -> Run:
    sc, cfg = load_scenario(bundled(name))
    events, truth = generate(sc, cfg)
    pr = pair(events, cfg=cfg)
    run = Run(cfg, events, truth, pr, extract_days(pr.paired, cfg))
    if classify:
        for day, vecs in run.days.items():
            run.classified[day] = classify_day(vecs, with_elbow=False)
            run.roles.extend(run.classified[day].roles)
    if health:
        run.health = track_health(events, pr.paired, run.roles, cfg)
        run.diagnoses = diagnose(run.health, build_codebook())
    return run


@pytest.fixture(scope="session")
def cfg() -> EnterpriseConfig:
    return CFG


@pytest.fixture(scope="session")
def four_archetypes() -> Run:
    return run_scenario("four_archetypes", health=False)


@pytest.fixture(scope="session")
def tiny() -> Run:
    return run_scenario("tiny")


@pytest.fixture(scope="session")
def flood() -> Run:
    return run_scenario("flood")


@pytest.fixture(scope="session")
def anomalies() -> Run:
    return run_scenario("anomalies")


# -- pcap construction --------------------------------------------------------


def _ip_bytes(addr: str) -> tuple[int, bytes]:
    if ":" in addr:
        return 6, socket.inet_pton(socket.AF_INET6, addr)
    return 4, socket.inet_pton(socket.AF_INET, addr)


def frame(src: str, dst: str, sport: int, dport: int, payload: bytes, *,
          tcp: bool = False, seq: int = 1000, flags: Optional[int] = None) -> bytes:
    """An Ethernet frame carrying ``payload`` over UDP or TCP."""
    version, s = _ip_bytes(src)
    _, d = _ip_bytes(dst)
    if tcp:
        l4 = dpkt.tcp.TCP(sport=sport, dport=dport, seq=seq,
                          flags=dpkt.tcp.TH_ACK | dpkt.tcp.TH_PUSH if flags is None else flags,
                          data=payload)
        proto = dpkt.ip.IP_PROTO_TCP
    else:
        l4 = dpkt.udp.UDP(sport=sport, dport=dport, data=payload)
        l4.ulen = len(l4)
        proto = dpkt.ip.IP_PROTO_UDP
    if version == 4:
        ip = dpkt.ip.IP(src=s, dst=d, p=proto, data=l4)
        ip.len = len(ip)
        eth_type = dpkt.ethernet.ETH_TYPE_IP
    else:
        ip = dpkt.ip6.IP6(src=s, dst=d, nxt=proto, hlim=64, data=l4)
        ip.plen = len(l4)
        eth_type = dpkt.ethernet.ETH_TYPE_IP6
    eth = dpkt.ethernet.Ethernet(src=b"\x02" * 6, dst=b"\x04" * 6, type=eth_type, data=ip)
    return bytes(eth)


def write_pcap(path, packets, ng: bool = False) -> None:
    """``packets`` is an iterable of (ts_us, frame bytes)."""
    with open(path, "wb") as fh:
        writer = dpkt.pcapng.Writer(fh) if ng else dpkt.pcap.Writer(fh, nano=False)
        for ts_us, buf in packets:
            writer.writepkt(buf, ts=ts_us / 1e6)


def event_frame(ev: DnsEvent) -> bytes:
    payload = encode_event(ev)
    if ev.transport is Transport.TCP:
        payload = len(payload).to_bytes(2, "big") + payload
    return frame(ev.src, ev.dst, ev.sport, ev.dport, payload, tcp=ev.transport is Transport.TCP)
