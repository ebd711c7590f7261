"""Query/response correlation (data cleansing)."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Optional

from .config import EnterpriseConfig
from .wire import DnsEvent, Kind

DEFAULT_WINDOW_US = 5_000_000


class OrderingError(ValueError):
    """Timestamps regressed by more than the tolerated skew."""


class Relevance(str, enum.Enum):
    ENTERPRISE = "enterprise"
    NON_ENTERPRISE = "non_enterprise"


class UnpairedClass(str, enum.Enum):
    UNANSWERED_QUERY = "unanswered_query"
    UNSOLICITED_RESPONSE = "unsolicited_response"


@dataclass(frozen=True, slots=True)
class PairedLookup:
    query: DnsEvent
    response: DnsEvent
    rtt_us: int
    relevance: Optional[Relevance]
    error: bool


@dataclass(frozen=True, slots=True)
class UnpairedEvent:
    event: DnsEvent
    cls: UnpairedClass


@dataclass
class PairingResult:
    paired: list[PairedLookup]
    unpaired: list[UnpairedEvent]
    window_us: int
    # Our own defaults, not taken from any measured deployment.
    policy: str = "earliest-pending; duplicates unsolicited"

    @property
    def event_count(self) -> int:
        return 2 * len(self.paired) + len(self.unpaired)

    def unanswered(self) -> list[DnsEvent]:
        return [u.event for u in self.unpaired if u.cls is UnpairedClass.UNANSWERED_QUERY]

    def unsolicited(self) -> list[DnsEvent]:
        return [u.event for u in self.unpaired if u.cls is UnpairedClass.UNSOLICITED_RESPONSE]


def classify_relevance(qname: str, cfg: EnterpriseConfig) -> Relevance:
    if cfg.is_enterprise_name(qname):
        return Relevance.ENTERPRISE
    return Relevance.NON_ENTERPRISE


def query_key(ev: DnsEvent) -> tuple:
    return (ev.txid, ev.src, ev.sport, ev.dst, ev.dport, ev.transport)


def response_key(ev: DnsEvent) -> tuple:
    """Key of the query this response would answer (endpoints mirrored)."""
    return (ev.txid, ev.dst, ev.dport, ev.src, ev.sport, ev.transport)


def pair(
    events: Iterable[DnsEvent],
    window_us: int = DEFAULT_WINDOW_US,
    cfg: Optional[EnterpriseConfig] = None,
) -> PairingResult:
    """Match responses to the earliest pending query with the same key.

    A query is eligible for a response when it appeared earlier in the
    stream and ``0 <= response.ts - query.ts <= window_us``.  Input may be
    out of timestamp order by at most ``window_us``.  Paired lookups are
    returned in response order, unpaired events in stream order.
    """
    pending: dict[tuple, list[tuple[int, DnsEvent]]] = {}
    paired: list[tuple[int, PairedLookup]] = []
    unpaired: list[tuple[int, UnpairedEvent]] = []
    relevance_cache: dict[str, Relevance] = {}
    high_water = None
    # Queries older than this can no longer match any admissible response.
    horizon = 2 * window_us
    next_gc = None

    def expire(limit: int) -> None:
        for key in list(pending):
            queue = pending[key]
            keep = []
            for idx, q in queue:
                if q.ts_us < limit:
                    unpaired.append((idx, UnpairedEvent(q, UnpairedClass.UNANSWERED_QUERY)))
                else:
                    keep.append((idx, q))
            if keep:
                pending[key] = keep
            else:
                del pending[key]

    for idx, ev in enumerate(events):
        ts = ev.ts_us
        if high_water is None or ts > high_water:
            high_water = ts
            if next_gc is None:
                next_gc = ts + horizon
            elif ts >= next_gc:
                expire(ts - horizon)
                next_gc = ts + horizon
        elif high_water - ts > window_us:
            raise OrderingError(
                f"event {idx} at {ts} is {high_water - ts}us behind the stream"
            )
        if ev.kind is Kind.QUERY:
            if ev.malformed:
                unpaired.append((idx, UnpairedEvent(ev, UnpairedClass.UNANSWERED_QUERY)))
            else:
                pending.setdefault(query_key(ev), []).append((idx, ev))
            continue
        match = None
        if not ev.malformed:
            queue = pending.get(response_key(ev))
            if queue:
                for pos, (_, q) in enumerate(queue):
                    if 0 <= ts - q.ts_us <= window_us:
                        match = queue.pop(pos)[1]
                        break
        if match is None:
            unpaired.append((idx, UnpairedEvent(ev, UnpairedClass.UNSOLICITED_RESPONSE)))
            continue
        rel = None
        if cfg is not None:
            rel = relevance_cache.get(match.qname)
            if rel is None:
                rel = relevance_cache[match.qname] = classify_relevance(match.qname, cfg)
        paired.append(
            (idx, PairedLookup(match, ev, ts - match.ts_us, rel, ev.is_error))
        )
    for queue in pending.values():
        for idx, q in queue:
            unpaired.append((idx, UnpairedEvent(q, UnpairedClass.UNANSWERED_QUERY)))
    unpaired.sort(key=lambda item: item[0])
    return PairingResult(
        paired=[p for _, p in paired],
        unpaired=[u for _, u in unpaired],
        window_us=window_us,
    )
