"""Metric collector backends: live OS probe, scripted synthetic values, trace replay."""
from __future__ import annotations

import csv
import math
import threading
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from .errors import BackendUnavailable, ProcessNotFound
from .metrics import MetricKind

CPU_WINDOW_S = 0.2


class CollectorBackend:
    name = "backend"

    def read(self, kind: MetricKind, process: Optional[str] = None) -> float:
        raise NotImplementedError

    def kinds(self) -> Optional[set[MetricKind]]:
        """Kinds this backend can serve, or None for 'all'."""
        return None


class OsProbe(CollectorBackend):
    """Best-effort live readings through psutil."""

    name = "osprobe"

    def __init__(self, cpu_window_s: float = CPU_WINDOW_S):
        try:
            import psutil
        except ImportError as exc:  # pragma: no cover
            raise BackendUnavailable(f"psutil is not installed: {exc}") from None
        self._ps = psutil
        self.cpu_window_s = cpu_window_s

    def resolve_process(self, name: str) -> int:
        return resolve_process(name)

    def read(self, kind, process=None):
        ps = self._ps
        try:
            if kind is MetricKind.VmCpuPercent:
                return _clamp_pct(ps.cpu_percent(interval=self.cpu_window_s))
            if kind in (MetricKind.VmMemUsedBytes, MetricKind.VmMemFreeBytes,
                        MetricKind.VmMemTotalBytes):
                vm = ps.virtual_memory()
                return float({
                    MetricKind.VmMemUsedBytes: vm.total - vm.available,
                    MetricKind.VmMemFreeBytes: vm.available,
                    MetricKind.VmMemTotalBytes: vm.total,
                }[kind])
            if kind in (MetricKind.NetPacketsIn, MetricKind.NetPacketsOut):
                io = ps.net_io_counters()
                return float(io.packets_recv if kind is MetricKind.NetPacketsIn
                             else io.packets_sent)
            if kind is MetricKind.NetInterfaceCount:
                return float(len(ps.net_if_stats()))
            if kind.is_process:
                if not process:
                    raise ProcessNotFound("no process name given")
                pid = self.resolve_process(process)
                try:
                    p = ps.Process(pid)
                    if kind is MetricKind.ProcMemBytes:
                        return float(p.memory_info().rss)
                    raw = p.cpu_percent(interval=self.cpu_window_s)
                except ps.NoSuchProcess:
                    raise ProcessNotFound(f"{process} (pid {pid}) exited") from None
                return _clamp_pct(raw / (ps.cpu_count() or 1))
        except (ProcessNotFound, BackendUnavailable):
            raise
        except (ps.Error, OSError) as exc:
            raise BackendUnavailable(f"probe failed for {kind.name}: {exc}") from None
        raise BackendUnavailable(f"{kind.name} is not an OS-level metric")


def resolve_process(name: str) -> int:
    """Lowest pid among live processes whose executable name is ``name``."""
    import psutil

    pids = []
    for p in psutil.process_iter(["name"]):
        try:
            if p.info.get("name") == name:
                pids.append(p.pid)
        except psutil.Error:
            continue
    if not pids:
        raise ProcessNotFound(f"no live process named {name!r}")
    return min(pids)


class Synthetic(CollectorBackend):
    """Returns scripted values verbatim, wrapping to the start when exhausted.

    Each (kind, process) stream keeps its own cursor.
    """

    name = "synthetic"

    def __init__(self, script: Mapping[MetricKind, Sequence[float]],
                 processes: Optional[Iterable[str]] = None):
        self.script = {MetricKind(k) if not isinstance(k, MetricKind) else k: list(v)
                       for k, v in script.items()}
        for k, vals in self.script.items():
            if not vals:
                raise ValueError(f"empty script for {k.name}")
        self.processes = set(processes) if processes is not None else None
        self._cursors: dict = {}
        self._lock = threading.Lock()

    def kinds(self):
        return set(self.script)

    def read(self, kind, process=None):
        if kind.is_process:
            if not process:
                raise ProcessNotFound("no process name given")
            if self.processes is not None and process not in self.processes:
                raise ProcessNotFound(f"no scripted process named {process!r}")
        vals = self.script.get(kind)
        if vals is None:
            raise BackendUnavailable(f"no script for {kind.name}")
        key = (kind, process if kind.is_process else None)
        with self._lock:
            i = self._cursors.get(key, 0)
            self._cursors[key] = i + 1
        return float(vals[i % len(vals)])


class Replay(Synthetic):
    """Synthetic backend loaded from a ``kind,value[,process]`` CSV trace."""

    name = "replay"

    def __init__(self, path):
        self.path = Path(path)
        script: dict[MetricKind, list[float]] = {}
        per_proc: dict[tuple, list[float]] = {}
        try:
            fh = self.path.open(newline="", encoding="utf-8")
        except OSError as exc:
            raise BackendUnavailable(f"cannot open trace {path}: {exc}") from None
        with fh:
            for row in csv.reader(fh):
                if not row or row[0].lstrip().startswith("#") or row[0].strip() == "kind":
                    continue
                kind = MetricKind(row[0].strip())
                value = float(row[1])
                proc = row[2].strip() if len(row) > 2 and row[2].strip() else None
                if proc is None:
                    script.setdefault(kind, []).append(value)
                else:
                    per_proc.setdefault((kind, proc), []).append(value)
        for (kind, _), vals in per_proc.items():
            script.setdefault(kind, vals)
        if not script:
            raise BackendUnavailable(f"trace {path} holds no samples")
        self._per_proc = per_proc
        procs = {p for _, p in per_proc} or None
        super().__init__(script, processes=procs)

    def read(self, kind, process=None):
        vals = self._per_proc.get((kind, process))
        if vals is None:
            return super().read(kind, process)
        key = (kind, process)
        with self._lock:
            i = self._cursors.get(key, 0)
            self._cursors[key] = i + 1
        return float(vals[i % len(vals)])


def default_synthetic_script(seed: int = 0, length: int = 60) -> dict[MetricKind, list[float]]:
    """Deterministic smooth waveforms for every OS-level and per-process kind."""
    phase = (seed * 0.618) % 1.0
    ts = [2 * math.pi * (i / length + phase) for i in range(length)]
    total = 649068544.0  # 619 MiB
    used = [total * (0.45 + 0.1 * math.sin(t)) for t in ts]
    return {
        MetricKind.VmCpuPercent: [round(6.25 + 4.0 * (1 + math.sin(t)), 6) for t in ts],
        MetricKind.VmMemUsedBytes: [float(int(u)) for u in used],
        MetricKind.VmMemFreeBytes: [float(int(total - u)) for u in used],
        MetricKind.VmMemTotalBytes: [total],
        MetricKind.ProcCpuPercent: [round(1.0 + 0.5 * (1 + math.cos(t)), 6) for t in ts],
        MetricKind.ProcMemBytes: [float(120_000_000 + int(5e6 * math.sin(t))) for t in ts],
        MetricKind.NetPacketsIn: [float(1000 + 17 * i) for i in range(length)],
        MetricKind.NetPacketsOut: [float(800 + 11 * i) for i in range(length)],
        MetricKind.NetInterfaceCount: [2.0],
    }


def make_backend(spec: str) -> CollectorBackend:
    """``osprobe`` | ``synthetic`` | ``synthetic:<seed>`` | ``replay:<path>``."""
    name, _, arg = (spec or "osprobe").partition(":")
    name = name.strip().lower()
    if name == "osprobe":
        return OsProbe()
    if name == "synthetic":
        return Synthetic(default_synthetic_script(int(arg) if arg else 0))
    if name == "replay":
        if not arg:
            raise ValueError("replay backend needs a trace path: replay:<path>")
        return Replay(arg)
    raise ValueError(f"unknown backend {spec!r}")


def _clamp_pct(v: float) -> float:
    return min(100.0, max(0.0, float(v)))


