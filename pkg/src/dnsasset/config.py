"""Enterprise configuration: address space, zones, epoch and day alignment."""

from __future__ import annotations

import hashlib
import ipaddress
import json
import re
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, Union

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

IPNetwork = Union[ipaddress.IPv4Network, ipaddress.IPv6Network]

HOUR_US = 3_600_000_000
DAY_US = 24 * HOUR_US


class ConfigError(ValueError):
    pass


_DURATION = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*(us|ms|s|m|h|d)?\s*$")
_UNIT_US = {"us": 1, "ms": 1_000, "s": 1_000_000, "m": 60_000_000, "h": HOUR_US, "d": DAY_US}


def parse_duration(value: Union[str, int, float], default_unit: str = "s") -> int:
    """Parse ``"5s"``, ``"1h"``, ``"250ms"`` or a bare number into microseconds."""
    if isinstance(value, (int, float)):
        return int(round(value * _UNIT_US[default_unit]))
    m = _DURATION.match(value)
    if not m:
        raise ConfigError(f"bad duration: {value!r}")
    return int(round(float(m.group(1)) * _UNIT_US[m.group(2) or default_unit]))


def parse_utc_offset(value: Union[str, int, float]) -> float:
    """Hours east of UTC from ``10``, ``"+10:00"`` or ``"-03:30"``."""
    if isinstance(value, (int, float)):
        return float(value)
    m = re.match(r"^\s*(?:UTC)?([+-]?)(\d{1,2})(?::?(\d{2}))?\s*$", value)
    if not m:
        raise ConfigError(f"bad timezone offset: {value!r}")
    hours = int(m.group(2)) + int(m.group(3) or 0) / 60
    return -hours if m.group(1) == "-" else hours


def reverse_zones_for(net: IPNetwork) -> list[str]:
    """Reverse-DNS zones exactly covering ``net``.

    Prefixes not on an octet (IPv4) or nibble (IPv6) boundary expand into
    the aligned sub-zones, e.g. a /22 becomes four /24 zones.
    """
    step = 8 if net.version == 4 else 4
    aligned = -(-net.prefixlen // step) * step
    subnets = [net] if aligned == net.prefixlen else list(net.subnets(new_prefix=aligned))
    zones = []
    for sub in subnets:
        # reverse_pointer lists every octet/nibble; drop the host part.
        labels = sub.network_address.reverse_pointer.split(".")
        host_labels = (sub.max_prefixlen - aligned) // step
        zones.append(".".join(labels[host_labels:]))
    return zones


@dataclass
class EnterpriseConfig:
    internal_prefixes: list[str]
    enterprise_zones: list[str]
    epoch_length: int = 3600
    day_boundary: float = 0.0
    extra: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.internal_prefixes:
            raise ConfigError("internal_prefixes must not be empty")
        if not self.enterprise_zones:
            raise ConfigError("enterprise_zones must not be empty")
        try:
            self.networks  # noqa: B018 - validate eagerly
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        self.enterprise_zones = [canonical_name(z) for z in self.enterprise_zones]
        if self.epoch_length <= 0:
            raise ConfigError("epoch_length must be positive")

    @cached_property
    def networks(self) -> list[IPNetwork]:
        return [ipaddress.ip_network(p, strict=False) for p in self.internal_prefixes]

    @cached_property
    def reverse_zones(self) -> list[str]:
        zones: list[str] = []
        for net in self.networks:
            zones.extend(reverse_zones_for(net))
        return zones

    @cached_property
    def _zone_set(self) -> frozenset[str]:
        return frozenset(self.enterprise_zones) | frozenset(self.reverse_zones)

    @cached_property
    def _internal_cache(self) -> dict[str, bool]:
        return {}

    def is_internal(self, addr: str) -> bool:
        cache = self._internal_cache
        hit = cache.get(addr)
        if hit is None:
            ip = ipaddress.ip_address(addr)
            hit = any(ip in net for net in self.networks if net.version == ip.version)
            cache[addr] = hit
        return hit

    def is_enterprise_name(self, qname: str) -> bool:
        if not qname:
            return False
        zones = self._zone_set
        labels = qname.split(".")
        return any(".".join(labels[i:]) in zones for i in range(len(labels)))

    @property
    def epoch_us(self) -> int:
        return self.epoch_length * 1_000_000

    @cached_property
    def day_offset_us(self) -> int:
        return int(round(self.day_boundary * HOUR_US))

    def day_of(self, ts_us: int) -> int:
        """Index of the local day containing ``ts_us`` (days since 1970-01-01)."""
        return (ts_us + self.day_offset_us) // DAY_US

    def day_start(self, day: int) -> int:
        return day * DAY_US - self.day_offset_us

    def hour_of_day(self, ts_us: int) -> int:
        return ((ts_us + self.day_offset_us) % DAY_US) // HOUR_US

    def epoch_of(self, ts_us: int) -> int:
        return (ts_us + self.day_offset_us) // self.epoch_us

    def epoch_start(self, epoch: int) -> int:
        return epoch * self.epoch_us - self.day_offset_us

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        if not out["extra"]:
            out.pop("extra")
        return out

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "EnterpriseConfig":
        data = dict(data)
        if "enterprise" in data and isinstance(data["enterprise"], dict):
            data = dict(data["enterprise"])
        known = {"internal_prefixes", "enterprise_zones", "epoch_length", "day_boundary"}
        missing = {"internal_prefixes", "enterprise_zones"} - data.keys()
        if missing:
            raise ConfigError(f"missing config fields: {sorted(missing)}")
        kwargs = {k: data[k] for k in known if k in data}
        if "epoch_length" in kwargs:
            kwargs["epoch_length"] = parse_duration(kwargs["epoch_length"]) // 1_000_000
        if "day_boundary" in kwargs:
            kwargs["day_boundary"] = parse_utc_offset(kwargs["day_boundary"])
        # Underscore keys are artifact annotations (e.g. a manifest hash).
        kwargs["extra"] = {
            k: v for k, v in data.items()
            if k not in known and k != "reverse_zones" and not k.startswith("_")
        }
        cfg = cls(**kwargs)
        listed = data.get("reverse_zones")
        if listed is not None and sorted(map(canonical_name, listed)) != sorted(cfg.reverse_zones):
            raise ConfigError("reverse_zones do not match internal_prefixes")
        return cfg


def canonical_name(name: str) -> str:
    return name.strip().rstrip(".").lower()


def load_document(path: Union[str, Path]) -> dict[str, Any]:
    """Read a JSON or TOML document, chosen by file suffix."""
    path = Path(path)
    try:
        if path.suffix.lower() == ".toml":
            with path.open("rb") as fh:
                return tomllib.load(fh)
        with path.open("r", encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def load_config(path: Union[str, Path]) -> EnterpriseConfig:
    return EnterpriseConfig.from_dict(load_document(path))


def sort_hosts(addrs: Iterable[str]) -> list[str]:
    """Order addresses numerically, IPv4 before IPv6."""
    return sorted(addrs, key=host_key)


def host_key(addr: str) -> tuple[int, int]:
    ip = ipaddress.ip_address(addr)
    return (ip.version, int(ip))
