"""Closed-form deployment cost model for agent/manager layouts.

Covers per-round communication overhead between data centers, the time for a
round of simultaneous sends, and the CPU load / response time / search time
trade-off between a flat single-manager layout and a hierarchical manager
tree. Counts are exact integers; only times (and logs) become floats.

The tree layout is the level-filled one: nodes are numbered breadth first,
node ``k`` (1-based, root is 1) hangs under ``(k - 2) // n + 1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Iterable, Mapping, Optional, Sequence

from ..errors import DomainError


@dataclass(frozen=True)
class DataCenter:
    vm_count: int
    bandwidth: float  # bytes per second
    message_sizes: Optional[tuple[int, ...]] = None
    # 1-based VM indices that report this round; None means every VM
    reporting_subset: Optional[frozenset[int]] = None

    def __post_init__(self):
        if self.vm_count < 0:
            raise DomainError("vm_count must be non-negative")
        if not self.bandwidth > 0:
            raise DomainError("bandwidth must be positive")
        if self.message_sizes is not None:
            sizes = tuple(self.message_sizes)
            if len(sizes) != self.vm_count:
                raise DomainError("need one message size per VM")
            object.__setattr__(self, "message_sizes", sizes)
        if self.reporting_subset is not None:
            subset = frozenset(self.reporting_subset)
            if not subset <= set(range(1, self.vm_count + 1)):
                raise DomainError("reporting subset must index existing VMs")
            object.__setattr__(self, "reporting_subset", subset)

    def reporters(self) -> list[int]:
        if self.reporting_subset is None:
            return list(range(1, self.vm_count + 1))
        return sorted(self.reporting_subset)


@dataclass(frozen=True)
class TopologySpec:
    centers: tuple[DataCenter, ...]
    manager_center: int  # 1-based
    message_size: Optional[int] = None  # used where a center gives no per-VM sizes

    def __post_init__(self):
        object.__setattr__(self, "centers", tuple(self.centers))
        if not 1 <= self.manager_center <= len(self.centers):
            raise DomainError("manager_center must index an existing center")

    def size_of(self, i: int, j: int) -> int:
        c = self.centers[i - 1]
        if c.message_sizes is not None:
            return c.message_sizes[j - 1]
        if self.message_size is None:
            raise DomainError(f"no message size for agent ({i}, {j})")
        return self.message_size

    def remote_messages(self):
        """``(i, j, size)`` for every reporting agent outside the manager's center."""
        for i, c in enumerate(self.centers, 1):
            if i == self.manager_center:
                continue
            for j in c.reporters():
                yield i, j, self.size_of(i, j)

    @classmethod
    def uniform(cls, vm_counts: Sequence[int], manager_center: int, message_size: int,
                bandwidth: float = 1.0) -> TopologySpec:
        return cls(tuple(DataCenter(m, bandwidth) for m in vm_counts), manager_center,
                   message_size)

    @classmethod
    def from_dict(cls, d: Mapping) -> TopologySpec:
        centers = []
        for c in d["centers"]:
            sizes = c.get("message_sizes")
            subset = c.get("reporting_subset")
            centers.append(DataCenter(
                vm_count=int(c["vm_count"]),
                bandwidth=float(c.get("bandwidth", 1.0)),
                message_sizes=tuple(int(s) for s in sizes) if sizes is not None else None,
                reporting_subset=frozenset(int(s) for s in subset)
                if subset is not None else None,
            ))
        return cls(tuple(centers), int(d["manager_center"]),
                   int(d["message_size"]) if d.get("message_size") is not None else None)


def comm_overhead_variable(topo: TopologySpec) -> int:
    """Bytes per report round from all agents outside the manager's center."""
    return sum(size for _, _, size in topo.remote_messages())


def comm_overhead_fixed(topo: TopologySpec, message_size: int) -> int:
    total_vms = sum(c.vm_count for c in topo.centers)
    return message_size * (total_vms - topo.centers[topo.manager_center - 1].vm_count)


def comm_time(topo: TopologySpec) -> float:
    """Seconds for one round when every remote message is sent at once.

    The slowest single message (size over its center's bandwidth) dominates.
    """
    worst = Fraction(0)
    for i, _, size in topo.remote_messages():
        worst = max(worst, Fraction(size) / Fraction(topo.centers[i - 1].bandwidth))
    return float(worst)


def distributed_manager_overhead(manager_msg_sizes: Sequence[int],
                                 super_center: Optional[int] = None) -> int:
    """Inter-center bytes when each center runs a sub-manager.

    Sub-manager ``i`` sends ``M_i`` to the super manager (default: the last
    center); the super manager's own contribution never leaves its center.
    """
    n = len(manager_msg_sizes)
    if n == 0:
        return 0
    sc = n if super_center is None else super_center
    if not 1 <= sc <= n:
        raise DomainError("super_center must index an existing center")
    return sum(m for i, m in enumerate(manager_msg_sizes, 1) if i != sc)


def should_report(last: Optional[float], current: float, rel_threshold: float) -> bool:
    """Change-triggered reporting: send when the relative change exceeds the threshold."""
    if last is None or rel_threshold <= 0:
        return True
    if last == 0:
        return current != 0
    return abs(current - last) > rel_threshold * abs(last)


def select_reporting_subset(last: Mapping[int, Optional[float]], current: Mapping[int, float],
                            rel_threshold: float = 0.01) -> frozenset[int]:
    return frozenset(j for j, v in current.items()
                     if should_report(last.get(j), v, rel_threshold))


def with_reporting_subsets(topo: TopologySpec,
                           subsets: Mapping[int, Iterable[int]]) -> TopologySpec:
    centers = list(topo.centers)
    for i, s in subsets.items():
        centers[i - 1] = replace(centers[i - 1], reporting_subset=frozenset(s))
    return replace(topo, centers=tuple(centers))


# manager tree


FLAT = "flat"
TREE = "tree"


@dataclass(frozen=True)
class TreeModel:
    N: int  # nodes including the super manager
    n: int = 2  # max children per node
    C: float = 1  # CPU cost of handling one message
    t: float = 1  # per-hop time
    shape: str = TREE

    def __post_init__(self):
        if self.shape not in (FLAT, TREE):
            raise DomainError(f"shape must be {FLAT!r} or {TREE!r}")
        if self.N < 1:
            raise DomainError("N must be at least 1")
        if self.n < 2:
            raise DomainError("fanout n must be at least 2")


@dataclass(frozen=True)
class CpuLoad:
    super_manager_load: float
    max_other_manager_load: float
    participating_managers: int
    total_load: float


def tree_levels(N: int, n: int) -> int:
    """Smallest l with n**l >= N*(n-1) + 1, i.e. the ceil-log level count."""
    if n < 2 or N < 1:
        raise DomainError("need N >= 1 and n >= 2")
    target = N * (n - 1) + 1
    levels, power = 0, 1
    while power < target:
        power *= n
        levels += 1
    return levels


def depth_sum(N: int, n: int) -> int:
    """Sum of node depths (root at depth 0) of the level-filled tree."""
    if N < 1 or n < 2:
        raise DomainError("need N >= 1 and n >= 2")
    l = tree_levels(N, n)
    numer = n ** l - l * n + l - 1
    # numer = (n-1) * sum_{k<l}(n^k - 1), always divisible by (n-1)^2
    q, r = divmod(numer, (n - 1) ** 2)
    assert r == 0
    return (l - 1) * N - q


def cpu_load(model: TreeModel) -> CpuLoad:
    N, n, C = model.N, model.n, model.C
    total = (N - 1) * C
    if model.shape == FLAT or N == 1:
        return CpuLoad((N - 1) * C, 0 * C, 1, total)
    # root takes the first n nodes; node 2 takes the next n, and so on
    root_children = min(n, N - 1)
    max_other = min(n, max(0, N - 1 - n))
    busy = -(-(N - 1) // n)  # nodes with at least one child
    return CpuLoad(root_children * C, max_other * C, busy, total)


def response_time_total(model: TreeModel):
    if model.N < 2:
        raise DomainError("response time needs N >= 2")
    if model.shape == FLAT:
        return (model.N - 1) * model.t
    return depth_sum(model.N, model.n) * model.t


def response_time_avg(model: TreeModel):
    if model.N < 2:
        raise DomainError("response time needs N >= 2")
    if model.shape == FLAT:
        return model.t
    return Fraction(depth_sum(model.N, model.n), model.N - 1) * model.t


def search_time_avg(model: TreeModel):
    if model.shape == FLAT:
        return Fraction(model.N - 1, 2) * model.t
    return log_base(model.N, model.n) * model.t


def log_base(x: int, base: int) -> float:
    """log_base(x), exact when x is an integer power of base."""
    k, p = 0, 1
    while p < x:
        p *= base
        k += 1
    if p == x:
        return float(k)
    return math.log(x) / math.log(base)


def summary(model: TreeModel) -> dict:
    """Every tree metric for one model, as plain numbers."""
    load = cpu_load(model)
    out = {
        "levels": tree_levels(model.N, model.n) if model.shape == TREE else (
            1 if model.N == 1 else 2),
        "super_manager_load": load.super_manager_load,
        "max_other_manager_load": load.max_other_manager_load,
        "participating_managers": load.participating_managers,
        "total_cpu_load": load.total_load,
        "search_time_avg": float(search_time_avg(model)),
    }
    if model.N >= 2:
        out["response_time_total"] = float(response_time_total(model))
        out["response_time_avg"] = float(response_time_avg(model))
    return out
