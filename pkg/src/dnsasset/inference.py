"""Codebook decoding of per-epoch alert vectors into anomaly diagnoses."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Optional, Sequence

from .clustering import Role
from .config import host_key
from .health import ALERTS, AlertVector

ANOMALIES = ("A1", "A2", "A3", "A4", "A5", "A6")
SEVERITY_COLUMNS = ANOMALIES + ("A4'",)
_BIT = {name: i for i, name in enumerate(ALERTS)}
# Side-agnostic tokens: satisfied by whichever of the pair is set.
EITHER = {"qsri": ("low_qsri", "high_qsri"), "qsro": ("low_qsro", "high_qsro")}

ALL_ROLES = (Role.NAME_SERVER, Role.RECURSIVE_RESOLVER, Role.MIXED_SERVER, Role.END_HOST, Role.UNKNOWN)
_NS = ["NameServer", "MixedServer"]
_RES = ["RecursiveResolver", "MixedServer"]

# anomaly -> list of (roles or None for all, alert slots)
DEFAULT_CAUSALITY: dict[str, dict[str, Any]] = {
    "A1": {"name": "Misconfiguration", "variants": [
        {"roles": _NS, "alerts": ["high_nelf_in", "high_lef_in"]},
        {"roles": _NS, "alerts": ["high_nelf_in", "high_lef_out"]},
        {"roles": _RES, "alerts": ["low_nelf_out", "high_lef_out"]},
    ]},
    "A2": {"name": "Query DDoS", "variants": [{"alerts": ["qsri", "high_qri"]}]},
    "A3": {"name": "Response DDoS", "variants": [{"alerts": ["high_qsro", "high_rri"]}]},
    "A4": {"name": "Attack reflector", "variants": [{"alerts": ["high_qri", "high_rro"]}]},
    "A5": {"name": "Generating scan", "variants": [{"alerts": ["high_lef_out", "low_qsro"]}]},
    "A6": {"name": "Data exfiltration", "variants": [{"alerts": ["high_lef_out", "high_qro", "low_qsro"]}]},
}


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class Signature:
    anomaly: str
    slots: tuple[str, ...]
    roles: frozenset[Role]
    # Each slot as a bit mask of the alerts that satisfy it.
    masks: tuple[int, ...] = ()


@dataclass
class Codebook:
    rows: list[Signature]
    names: dict[str, str] = field(default_factory=dict)

    def for_role(self, role: Role) -> list[Signature]:
        return [s for s in self.rows if role in s.roles]

    def signatures(self, anomaly: str) -> list[Signature]:
        return [s for s in self.rows if s.anomaly == anomaly]

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for sig in self.rows:
            entry = out.setdefault(sig.anomaly, {"name": self.names.get(sig.anomaly, sig.anomaly), "variants": []})
            variant: dict[str, Any] = {"alerts": list(sig.slots)}
            if sig.roles != frozenset(ALL_ROLES):
                variant["roles"] = sorted(r.value for r in sig.roles)
            entry["variants"].append(variant)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def _slot_mask(slot: str) -> int:
    if slot in EITHER:
        return sum(1 << _BIT[a] for a in EITHER[slot])
    if slot not in _BIT:
        raise GraphError(f"unknown alert {slot!r}")
    return 1 << _BIT[slot]


def build_codebook(causality: Optional[Mapping[str, Any]] = None) -> Codebook:
    """Compile anomaly -> alert edges into signature rows.

    ``causality`` maps an anomaly code to ``{"name": ..., "variants": [{"alerts":
    [...], "roles": [...]}]}``; roles default to all.  An alert slot is an
    alert name or a side-agnostic ratio token (``"qsri"``, ``"qsro"``).
    Pass ``{}`` for an empty codebook.  Keys starting with ``_`` are
    annotations and are skipped.
    """
    if causality is None:
        causality = DEFAULT_CAUSALITY
    rows, names = [], {}
    codes = [c for c in causality if not c.startswith("_")]
    for code in sorted(codes, key=_anomaly_order):
        entry = causality[code]
        if isinstance(entry, (list, tuple)):
            entry = {"variants": [{"alerts": list(entry)}]}
        names[code] = entry.get("name", code)
        for v in entry.get("variants", []):
            slots = tuple(v.get("alerts", ()))
            if len(slots) < 2:
                raise GraphError(f"{code}: a signature needs at least two alerts")
            masks = tuple(_slot_mask(s) for s in slots)
            try:
                roles = frozenset(Role(r) for r in v["roles"]) if "roles" in v else frozenset(ALL_ROLES)
            except ValueError as exc:
                raise GraphError(f"{code}: {exc}") from exc
            rows.append(Signature(code, slots, roles, masks))
    return Codebook(rows, names)


def _anomaly_order(code: str):
    return (ANOMALIES.index(code), code) if code in ANOMALIES else (len(ANOMALIES), code)


def load_codebook(path) -> Codebook:
    with open(path, encoding="utf-8") as fh:
        try:
            return build_codebook(json.load(fh))
        except json.JSONDecodeError as exc:
            raise GraphError(f"{path}: {exc}") from exc


@dataclass(frozen=True)
class Diagnosis:
    host: str
    epoch: int
    role: Role
    anomalies: tuple[str, ...]
    distances: dict[str, int]
    residual_alerts: tuple[str, ...]

    def to_dict(self) -> dict[str, Any]:
        return {
            "host": self.host,
            "epoch": self.epoch,
            "role": self.role.value,
            "anomalies": list(self.anomalies),
            "distances": self.distances,
            "residual_alerts": list(self.residual_alerts),
        }


def _covered(sig: Signature, bits: int) -> Optional[int]:
    """Bits of ``bits`` that satisfy ``sig``, or None if some slot is unmet."""
    cover = 0
    for m in sig.masks:
        hit = bits & m
        if not hit:
            return None
        cover |= hit
    return cover


def decode_bits(bits: int, role: Role, book: Codebook) -> tuple[list[str], dict[str, int], int]:
    """Greedy set cover over ``bits``.

    Repeatedly take the applicable signature fully contained in the set bits
    that covers the most still-unexplained bits (at least one); ties go to
    the codebook order.  Returns anomalies in selection order, the distance
    of each (set bits outside its signature), and the residual bit mask.
    """
    candidates = []
    for sig in book.for_role(role):
        cover = _covered(sig, bits)
        if cover is not None:
            candidates.append((sig, cover))
    unexplained = bits
    chosen: list[str] = []
    distances: dict[str, int] = {}
    while True:
        best, best_gain = None, 0
        for sig, cover in candidates:
            gain = bin(cover & unexplained).count("1")
            if gain > best_gain:
                best, best_gain = (sig, cover), gain
        if best is None:
            break
        sig, cover = best
        unexplained &= ~cover
        if sig.anomaly not in distances:
            chosen.append(sig.anomaly)
        outside = bin(bits & ~cover).count("1")
        distances[sig.anomaly] = min(distances.get(sig.anomaly, outside), outside)
    return chosen, distances, unexplained


def decode(alerts: AlertVector, role: Role, book: Codebook, host: str = "", epoch: int = 0) -> Diagnosis:
    chosen, distances, residual = decode_bits(alerts.bits, role, book)
    return Diagnosis(
        host=host,
        epoch=epoch,
        role=role,
        anomalies=tuple(sorted(chosen, key=_anomaly_order)),
        distances=distances,
        residual_alerts=tuple(a for i, a in enumerate(ALERTS) if residual >> i & 1),
    )


def diagnose(results: Iterable, book: Codebook) -> list[Diagnosis]:
    """Decode every (HealthRecord, AlertVector) pair."""
    return [decode(alerts, rec.role, book, rec.host, rec.epoch) for rec, alerts in results]


@dataclass
class SeverityReport:
    assets: int
    fractions: dict[str, float]
    hosts: dict[str, list[str]]

    def rows(self) -> list[tuple[str, float, int]]:
        return [(code, self.fractions[code], len(self.hosts[code])) for code in SEVERITY_COLUMNS]


def severity_report(diagnoses: Iterable[Diagnosis], assets: Optional[Sequence[str]] = None) -> SeverityReport:
    """Share of DNS assets diagnosed with each anomaly in at least one epoch.

    The A4' column is the reflector share once misconfiguration is fixed:
    only A4 epochs without a concurrent A1 diagnosis count.
    """
    diagnoses = list(diagnoses)
    universe = set(assets) if assets is not None else {d.host for d in diagnoses}
    seen: dict[str, set[str]] = defaultdict(set)
    for d in diagnoses:
        for code in d.anomalies:
            seen[code].add(d.host)
        if "A4" in d.anomalies and "A1" not in d.anomalies:
            seen["A4'"].add(d.host)
    n = len(universe)
    fractions = {code: (len(seen[code] & universe) / n if n else 0.0) for code in SEVERITY_COLUMNS}
    hosts = {code: sorted(seen[code] & universe, key=host_key) for code in SEVERITY_COLUMNS}
    return SeverityReport(n, fractions, hosts)


def write_severity_csv(path, report: SeverityReport, header_comment: Optional[str] = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["anomaly", "asset_fraction", "assets_affected", "assets_total"])
        for code, frac, count in report.rows():
            w.writerow([code, repr(frac), count, report.assets])


def write_diagnoses_jsonl(path, diagnoses: Iterable[Diagnosis], meta: Optional[dict] = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if meta is not None:
            fh.write(json.dumps({"_meta": meta}, sort_keys=True) + "\n")
        for d in diagnoses:
            fh.write(json.dumps(d.to_dict(), sort_keys=True) + "\n")
