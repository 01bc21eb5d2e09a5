"""Manager/agent wire protocol.

Every message is one frame::

    u32 big-endian payload length | u8 tag | payload (UTF-8 JSON object)

The length counts payload bytes only. Payloads are serialised with sorted
keys and compact separators so encoding is deterministic.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import ClassVar, Optional, Union

from .errors import MalformedFrame
from .metrics import (
    AgentDescriptor, OidPath, QoSSample, REGISTRY, as_oid, parse_oid,
)
from .workload import BenchmarkReport, LoadReport, TransferSpec, WorkloadSpec

HEADER = struct.Struct("!IB")
HEADER_SIZE = HEADER.size
MAX_PAYLOAD = 16 * 1024 * 1024
MAX_DATAGRAM_PAYLOAD = 1400

TAG_PROBE = 1
TAG_ANNOUNCE = 2
TAG_QOS_REQUEST = 3
TAG_QOS_RESPONSE = 4
TAG_PUSH_REPORT = 5
TAG_BENCH_REQUEST = 6
TAG_BENCH_RESPONSE = 7
TAG_LOAD_START = 8
TAG_LOAD_STOP = 9
TAG_ERROR = 10


@dataclass(frozen=True)
class Probe:
    TAG: ClassVar[int] = TAG_PROBE
    manager_addr: str
    manager_port: int

    def __post_init__(self):
        _check_port(self.manager_port)

    def payload(self):
        return {"manager_addr": self.manager_addr, "manager_port": self.manager_port}

    @classmethod
    def from_payload(cls, d):
        return cls(_str(d["manager_addr"]), _int(d["manager_port"]))


@dataclass(frozen=True)
class Announce:
    TAG: ClassVar[int] = TAG_ANNOUNCE
    descriptor: AgentDescriptor

    def payload(self):
        return {"descriptor": self.descriptor.to_dict()}

    @classmethod
    def from_payload(cls, d):
        return cls(AgentDescriptor.from_dict(d["descriptor"]))


@dataclass(frozen=True)
class QoSRequest:
    TAG: ClassVar[int] = TAG_QOS_REQUEST
    oids: tuple[OidPath, ...]
    process_name: Optional[str] = None

    def __post_init__(self):
        oids = tuple(as_oid(o) for o in self.oids)
        object.__setattr__(self, "oids", oids)
        if not oids:
            raise ValueError("a QoSRequest needs at least one OID")
        wants_process = any(
            o in REGISTRY and REGISTRY.lookup(o).is_process for o in oids
        )
        if wants_process and not self.process_name:
            raise ValueError("process_name is required for per-process OIDs")
        if self.process_name is not None and not wants_process:
            raise ValueError("process_name given but no per-process OID requested")

    def payload(self):
        d = {"oids": [str(o) for o in self.oids]}
        if self.process_name is not None:
            d["process_name"] = self.process_name
        return d

    @classmethod
    def from_payload(cls, d):
        pn = d.get("process_name")
        if pn is not None:
            pn = _str(pn)
        return cls(tuple(parse_oid(_str(o)) for o in _list(d["oids"])), pn)


@dataclass(frozen=True)
class QoSResponse:
    TAG: ClassVar[int] = TAG_QOS_RESPONSE
    agent_id: str
    samples: tuple[QoSSample, ...]

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))

    def payload(self):
        return {"agent_id": self.agent_id, "samples": [s.to_dict() for s in self.samples]}

    @classmethod
    def from_payload(cls, d):
        return cls(_str(d["agent_id"]),
                   tuple(QoSSample.from_dict(s) for s in _list(d["samples"])))


@dataclass(frozen=True)
class PushReport:
    TAG: ClassVar[int] = TAG_PUSH_REPORT
    report_id: str
    agent_id: str
    samples: tuple[QoSSample, ...]
    descriptor: Optional[AgentDescriptor] = None

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))

    def payload(self):
        d = {"report_id": self.report_id, "agent_id": self.agent_id,
             "samples": [s.to_dict() for s in self.samples]}
        if self.descriptor is not None:
            d["descriptor"] = self.descriptor.to_dict()
        return d

    @classmethod
    def from_payload(cls, d):
        desc = d.get("descriptor")
        return cls(
            _str(d["report_id"]), _str(d["agent_id"]),
            tuple(QoSSample.from_dict(s) for s in _list(d["samples"])),
            AgentDescriptor.from_dict(desc) if desc is not None else None,
        )


@dataclass(frozen=True)
class BenchRequest:
    TAG: ClassVar[int] = TAG_BENCH_REQUEST
    spec: TransferSpec

    def payload(self):
        return {"spec": self.spec.to_dict()}

    @classmethod
    def from_payload(cls, d):
        return cls(TransferSpec.from_dict(d["spec"]))


@dataclass(frozen=True)
class BenchResponse:
    TAG: ClassVar[int] = TAG_BENCH_RESPONSE
    report: BenchmarkReport

    def payload(self):
        return {"report": self.report.to_dict()}

    @classmethod
    def from_payload(cls, d):
        return cls(BenchmarkReport.from_dict(d["report"]))


@dataclass(frozen=True)
class LoadStart:
    TAG: ClassVar[int] = TAG_LOAD_START
    run_id: str
    workload: WorkloadSpec

    def payload(self):
        return {"run_id": self.run_id, "workload": self.workload.to_dict()}

    @classmethod
    def from_payload(cls, d):
        return cls(_str(d["run_id"]), WorkloadSpec.from_dict(d["workload"]))


@dataclass(frozen=True)
class LoadStop:
    """Request: stop (or, with ``wait``, await) a run. Reply: same id plus its report."""

    TAG: ClassVar[int] = TAG_LOAD_STOP
    run_id: str
    wait: bool = True
    report: Optional[LoadReport] = None

    def payload(self):
        d = {"run_id": self.run_id, "wait": self.wait}
        if self.report is not None:
            d["report"] = self.report.to_dict()
        return d

    @classmethod
    def from_payload(cls, d):
        wait = d.get("wait", True)
        if not isinstance(wait, bool):
            raise ValueError("wait must be a boolean")
        rep = d.get("report")
        return cls(_str(d["run_id"]), wait,
                   LoadReport.from_dict(rep) if rep is not None else None)


@dataclass(frozen=True)
class Error:
    TAG: ClassVar[int] = TAG_ERROR
    code: str
    message: str = ""

    def payload(self):
        return {"code": self.code, "message": self.message}

    @classmethod
    def from_payload(cls, d):
        return cls(_str(d["code"]), _str(d.get("message", "")))


Message = Union[Probe, Announce, QoSRequest, QoSResponse, PushReport,
                BenchRequest, BenchResponse, LoadStart, LoadStop, Error]

MESSAGE_TYPES = {cls.TAG: cls for cls in (
    Probe, Announce, QoSRequest, QoSResponse, PushReport,
    BenchRequest, BenchResponse, LoadStart, LoadStop, Error,
)}


def encode_payload(msg) -> bytes:
    return json.dumps(msg.payload(), sort_keys=True, separators=(",", ":"),
                      ensure_ascii=False, allow_nan=False).encode("utf-8")


def encode_message(msg) -> bytes:
    if type(msg) not in MESSAGE_TYPES.values():
        raise TypeError(f"not a protocol message: {type(msg).__name__}")
    body = encode_payload(msg)
    return HEADER.pack(len(body), msg.TAG) + body


def decode_payload(tag: int, body: bytes):
    cls = MESSAGE_TYPES.get(tag)
    if cls is None:
        raise MalformedFrame(f"unknown message tag {tag}")
    try:
        d = json.loads(body.decode("utf-8"))
        if not isinstance(d, dict):
            raise ValueError("payload is not an object")
        return cls.from_payload(d)
    except MalformedFrame:
        raise
    except (ValueError, KeyError, TypeError, AttributeError, RecursionError) as exc:
        raise MalformedFrame(f"bad {cls.__name__} payload: {exc}") from None


def parse_header(header: bytes, max_payload: int = MAX_PAYLOAD) -> tuple[int, int]:
    """Return ``(payload_length, tag)``; rejects oversized frames before any read."""
    if len(header) != HEADER_SIZE:
        raise MalformedFrame("truncated frame header")
    length, tag = HEADER.unpack(header)
    if length > max_payload:
        raise MalformedFrame(f"declared payload of {length} bytes exceeds {max_payload}")
    return length, tag


def decode_message(data: bytes, max_payload: int = MAX_PAYLOAD):
    """Decode exactly one frame; truncated or trailing bytes are errors."""
    data = bytes(data)
    if len(data) < HEADER_SIZE:
        raise MalformedFrame("truncated frame header")
    length, tag = parse_header(data[:HEADER_SIZE], max_payload)
    end = HEADER_SIZE + length
    if len(data) < end:
        raise MalformedFrame("truncated frame payload")
    if len(data) > end:
        raise MalformedFrame("trailing bytes after frame")
    return decode_payload(tag, data[HEADER_SIZE:end])


def encode_datagram(msg) -> bytes:
    if not isinstance(msg, (Probe, Announce)):
        raise TypeError("discovery datagrams carry Probe or Announce only")
    data = encode_message(msg)
    if len(data) - HEADER_SIZE > MAX_DATAGRAM_PAYLOAD:
        raise ValueError("discovery payload exceeds datagram budget")
    return data


def decode_datagram(data: bytes):
    msg = decode_message(data, MAX_DATAGRAM_PAYLOAD)
    if not isinstance(msg, (Probe, Announce)):
        raise MalformedFrame("non-discovery message in datagram")
    return msg


def _check_port(p):
    if isinstance(p, bool) or not isinstance(p, int) or not 0 < p < 65536:
        raise ValueError(f"bad port {p!r}")


def _str(v) -> str:
    if not isinstance(v, str):
        raise ValueError(f"expected a string, got {type(v).__name__}")
    return v


def _int(v) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ValueError(f"expected an integer, got {type(v).__name__}")
    return v


def _list(v) -> list:
    if not isinstance(v, list):
        raise ValueError(f"expected a list, got {type(v).__name__}")
    return v
