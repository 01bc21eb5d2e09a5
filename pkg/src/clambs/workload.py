"""Benchmark and load-generation value types carried on the wire."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass


class Direction(enum.Enum):
    Download = "Download"
    Upload = "Upload"


@dataclass(frozen=True)
class TransferSpec:
    direction: Direction
    size_bytes: int

    def __post_init__(self):
        if not isinstance(self.direction, Direction):
            object.__setattr__(self, "direction", Direction(self.direction))
        if isinstance(self.size_bytes, bool) or not isinstance(self.size_bytes, int):
            raise ValueError("size_bytes must be an integer")
        if self.size_bytes < 1:
            raise ValueError("size_bytes must be at least 1")

    def to_dict(self):
        return {"direction": self.direction.value, "size_bytes": self.size_bytes}

    @classmethod
    def from_dict(cls, d):
        return cls(Direction(d["direction"]), d["size_bytes"])


@dataclass(frozen=True)
class BenchmarkReport:
    spec: TransferSpec
    elapsed_ms: float
    bandwidth_bytes_per_s: float
    peer: str
    timestamp_utc_ms: int

    def __post_init__(self):
        if not (self.elapsed_ms > 0 and math.isfinite(self.elapsed_ms)):
            raise ValueError("elapsed_ms must be positive")
        expected = self.spec.size_bytes / (self.elapsed_ms / 1000.0)
        if not math.isclose(self.bandwidth_bytes_per_s, expected, rel_tol=1e-9):
            raise ValueError(f"bandwidth {self.bandwidth_bytes_per_s} does not match "
                             f"size/elapsed = {expected}")

    @classmethod
    def measured(cls, spec: TransferSpec, elapsed_ms: float, peer: str,
                 timestamp_utc_ms: int) -> BenchmarkReport:
        # clock granularity can make a 1-byte loopback transfer read as 0
        elapsed_ms = max(float(elapsed_ms), 1e-6)
        return cls(spec, elapsed_ms, spec.size_bytes / (elapsed_ms / 1000.0),
                   peer, timestamp_utc_ms)

    def to_dict(self):
        return {
            "spec": self.spec.to_dict(),
            "elapsed_ms": float(self.elapsed_ms),
            "bandwidth_bytes_per_s": float(self.bandwidth_bytes_per_s),
            "peer": self.peer,
            "timestamp_utc_ms": self.timestamp_utc_ms,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            TransferSpec.from_dict(d["spec"]),
            float(d["elapsed_ms"]),
            float(d["bandwidth_bytes_per_s"]),
            str(d["peer"]),
            _int(d["timestamp_utc_ms"]),
        )


@dataclass(frozen=True)
class WorkloadSpec:
    """HTTP sampler plus thread-group/loop-controller settings."""

    target_host: str
    target_port: int
    path: str = "/"
    method: str = "GET"
    threads: int = 1
    loops: int = 1
    think_time_ms: int = 0

    def __post_init__(self):
        if self.method not in ("GET", "POST"):
            raise ValueError(f"unsupported method {self.method!r}")
        for name in ("threads", "loops"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ValueError(f"{name} must be a positive integer")
        if isinstance(self.think_time_ms, bool) or not isinstance(self.think_time_ms, int) \
                or self.think_time_ms < 0:
            raise ValueError("think_time_ms must be a non-negative integer")
        if not self.path.startswith("/"):
            object.__setattr__(self, "path", "/" + self.path)

    @property
    def total_requests(self) -> int:
        return self.threads * self.loops

    def to_dict(self):
        return {
            "target_host": self.target_host,
            "target_port": self.target_port,
            "path": self.path,
            "method": self.method,
            "threads": self.threads,
            "loops": self.loops,
            "think_time_ms": self.think_time_ms,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            str(d["target_host"]), _int(d["target_port"]), str(d["path"]),
            str(d["method"]), _int(d["threads"]), _int(d["loops"]),
            _int(d["think_time_ms"]),
        )


@dataclass(frozen=True)
class LoadReport:
    sent: int
    ok: int
    failed: int
    elapsed_ms: float

    def to_dict(self):
        return {"sent": self.sent, "ok": self.ok, "failed": self.failed,
                "elapsed_ms": float(self.elapsed_ms)}

    @classmethod
    def from_dict(cls, d):
        return cls(_int(d["sent"]), _int(d["ok"]), _int(d["failed"]),
                   float(d["elapsed_ms"]))


def _int(v):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ValueError(f"expected an integer, got {v!r}")
    return v
