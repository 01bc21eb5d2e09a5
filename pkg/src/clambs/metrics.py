"""Metric namespace: OID paths, the built-in metric registry and sample types."""
from __future__ import annotations

import enum
import re
import time
from dataclasses import dataclass
from typing import Iterable

from .errors import MalformedOid, UnknownOid

_SEGMENT = re.compile(r"[0-9]+\Z")


@dataclass(frozen=True, order=True)
class OidPath:
    segments: tuple[int, ...]

    def __post_init__(self):
        segs = tuple(self.segments)
        if len(segs) < 2:
            raise MalformedOid(f"an OID needs at least two segments, got {segs!r}")
        for s in segs:
            if not isinstance(s, int) or isinstance(s, bool) or s < 0:
                raise MalformedOid(f"bad OID segment {s!r}")
        object.__setattr__(self, "segments", segs)

    def __str__(self):
        return ".".join(str(s) for s in self.segments)

    def child(self, *more: int) -> OidPath:
        return OidPath(self.segments + tuple(more))


def parse_oid(text: str) -> OidPath:
    """Parse ``.1.3.6.1`` or ``1.3.6.1``; the leading dot is optional."""
    if not isinstance(text, str) or not text:
        raise MalformedOid("empty OID")
    body = text[1:] if text.startswith(".") else text
    parts = body.split(".")
    if not all(_SEGMENT.match(p) for p in parts):
        raise MalformedOid(f"malformed OID {text!r}")
    return OidPath(tuple(int(p) for p in parts))


def format_oid(oid: OidPath) -> str:
    return str(oid)


def as_oid(value) -> OidPath:
    if isinstance(value, OidPath):
        return value
    if isinstance(value, str):
        return parse_oid(value)
    return OidPath(tuple(value))


class Units(enum.Enum):
    Percent = "Percent"
    Bytes = "Bytes"
    Count = "Count"
    BytesPerSecond = "BytesPerSecond"
    Milliseconds = "Milliseconds"


class Classification(enum.Enum):
    SystemResource = "SystemResource"
    UserApplication = "UserApplication"


class MetricKind(enum.Enum):
    # declaration order fixes the consecutive OID assignment below
    VmCpuPercent = "VmCpuPercent"
    VmMemUsedBytes = "VmMemUsedBytes"
    VmMemFreeBytes = "VmMemFreeBytes"
    VmMemTotalBytes = "VmMemTotalBytes"
    ProcCpuPercent = "ProcCpuPercent"
    ProcMemBytes = "ProcMemBytes"
    NetPacketsIn = "NetPacketsIn"
    NetPacketsOut = "NetPacketsOut"
    NetInterfaceCount = "NetInterfaceCount"
    BenchDownloadBytesPerSecond = "BenchDownloadBytesPerSecond"
    BenchUploadBytesPerSecond = "BenchUploadBytesPerSecond"
    BenchDownloadLatencyMs = "BenchDownloadLatencyMs"
    BenchUploadLatencyMs = "BenchUploadLatencyMs"

    @property
    def is_process(self) -> bool:
        return self in (MetricKind.ProcCpuPercent, MetricKind.ProcMemBytes)

    @property
    def is_bench(self) -> bool:
        return self.name.startswith("Bench")

    @property
    def units(self) -> Units:
        return _UNITS[self]


_UNITS = {
    MetricKind.VmCpuPercent: Units.Percent,
    MetricKind.VmMemUsedBytes: Units.Bytes,
    MetricKind.VmMemFreeBytes: Units.Bytes,
    MetricKind.VmMemTotalBytes: Units.Bytes,
    MetricKind.ProcCpuPercent: Units.Percent,
    MetricKind.ProcMemBytes: Units.Bytes,
    MetricKind.NetPacketsIn: Units.Count,
    MetricKind.NetPacketsOut: Units.Count,
    MetricKind.NetInterfaceCount: Units.Count,
    MetricKind.BenchDownloadBytesPerSecond: Units.BytesPerSecond,
    MetricKind.BenchUploadBytesPerSecond: Units.BytesPerSecond,
    MetricKind.BenchDownloadLatencyMs: Units.Milliseconds,
    MetricKind.BenchUploadLatencyMs: Units.Milliseconds,
}

OID_PREFIX = OidPath((1, 3, 6, 1, 9, 1, 1))


class MetricRegistry:
    """Immutable two-way map between metric kinds and OIDs."""

    def __init__(self, bindings: dict[MetricKind, OidPath]):
        self._by_kind = dict(bindings)
        self._by_oid = {oid: kind for kind, oid in bindings.items()}
        if len(self._by_oid) != len(self._by_kind):
            raise ValueError("registry bindings must be one-to-one")

    @classmethod
    def builtin(cls) -> MetricRegistry:
        fixed = {
            MetricKind.ProcCpuPercent: OID_PREFIX.child(0, 0),
            MetricKind.ProcMemBytes: OID_PREFIX.child(0, 1),
        }
        bindings = {}
        nxt = len(fixed)
        for kind in MetricKind:
            if kind in fixed:
                bindings[kind] = fixed[kind]
            else:
                bindings[kind] = OID_PREFIX.child(0, nxt)
                nxt += 1
        return cls(bindings)

    def lookup(self, oid) -> MetricKind:
        try:
            return self._by_oid[as_oid(oid)]
        except KeyError:
            raise UnknownOid(f"no metric bound to {as_oid(oid)}") from None

    def oid_of(self, kind: MetricKind) -> OidPath:
        return self._by_kind[kind]

    def __contains__(self, oid) -> bool:
        return as_oid(oid) in self._by_oid

    def __iter__(self):
        return iter(self._by_kind.items())

    def __len__(self):
        return len(self._by_kind)


REGISTRY = MetricRegistry.builtin()


def registry_lookup(oid) -> MetricKind:
    return REGISTRY.lookup(oid)


def oid_of(kind: MetricKind) -> OidPath:
    return REGISTRY.oid_of(kind)


SYSTEM_KINDS = tuple(k for k in MetricKind if not k.is_process and not k.is_bench)
PROCESS_KINDS = (MetricKind.ProcCpuPercent, MetricKind.ProcMemBytes)


def now_ms() -> int:
    return time.time_ns() // 1_000_000


@dataclass(frozen=True)
class QoSSample:
    agent_id: str
    oid: OidPath
    value: float
    units: Units
    timestamp_utc_ms: int
    # which monitored process a Proc* reading belongs to
    process: str | None = None

    def to_dict(self) -> dict:
        d = {
            "agent_id": self.agent_id,
            "oid": str(self.oid),
            "value": float(self.value),
            "units": self.units.value,
            "timestamp_utc_ms": int(self.timestamp_utc_ms),
        }
        if self.process is not None:
            d["process"] = self.process
        return d

    @classmethod
    def from_dict(cls, d: dict) -> QoSSample:
        return cls(
            agent_id=str(d["agent_id"]),
            oid=parse_oid(d["oid"]),
            value=float(d["value"]),
            units=Units(d["units"]),
            timestamp_utc_ms=_as_int(d["timestamp_utc_ms"]),
            process=d.get("process"),
        )


class AgentKind(enum.Enum):
    Monitoring = "Monitoring"
    Benchmarking = "Benchmarking"


@dataclass(frozen=True)
class AgentDescriptor:
    agent_id: str
    host: str
    port: int
    kind: AgentKind
    oids: tuple[OidPath, ...] = ()
    # user-owned processes the agent watches; their Proc* samples are UserApplication
    processes: tuple[str, ...] = ()
    system_processes: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "oids", tuple(as_oid(o) for o in self.oids))
        object.__setattr__(self, "processes", tuple(self.processes))
        object.__setattr__(self, "system_processes", tuple(self.system_processes))
        if not (1 <= int(self.port) <= 65535) or isinstance(self.port, bool):
            raise ValueError(f"port out of range: {self.port}")
        if self.kind is AgentKind.Monitoring and not self.oids:
            raise ValueError("a monitoring agent must advertise at least one OID")

    @property
    def address(self) -> tuple[str, int]:
        return (self.host, self.port)

    def to_dict(self) -> dict:
        return {
            "agent_id": self.agent_id,
            "host": self.host,
            "port": int(self.port),
            "kind": self.kind.value,
            "oids": [str(o) for o in self.oids],
            "processes": list(self.processes),
            "system_processes": list(self.system_processes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> AgentDescriptor:
        return cls(
            agent_id=str(d["agent_id"]),
            host=str(d["host"]),
            port=_as_int(d["port"]),
            kind=AgentKind(d["kind"]),
            oids=tuple(parse_oid(o) for o in d.get("oids", ())),
            processes=tuple(str(p) for p in d.get("processes", ())),
            system_processes=tuple(str(p) for p in d.get("system_processes", ())),
        )


def default_agent_id(host: str, port: int) -> str:
    return f"{host}:{port}"


def classify(kind: MetricKind, process: str | None,
             user_processes: Iterable[str] = ()) -> Classification:
    """User-owned processes map to UserApplication; VM-level and OS processes do not."""
    if kind.is_process and process is not None and process in set(user_processes):
        return Classification.UserApplication
    return Classification.SystemResource


def _as_int(v) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ValueError(f"expected an integer, got {v!r}")
    return v


__all__ = [
    "OidPath", "parse_oid", "format_oid", "as_oid", "Units", "Classification",
    "MetricKind", "MetricRegistry", "REGISTRY", "registry_lookup", "oid_of",
    "QoSSample", "AgentKind", "AgentDescriptor", "default_agent_id", "classify",
    "SYSTEM_KINDS", "PROCESS_KINDS", "OID_PREFIX", "now_ms",
]
