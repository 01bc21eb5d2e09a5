"""Independent reference computations for the overhead model.

Nothing here imports the closed forms. Message accounting runs through a
small discrete-event simulation; tree metrics come from explicit trees.
"""
from __future__ import annotations

import heapq
import random
from fractions import Fraction

import mpmath


def simulate_round(centers, manager_center):
    """Discrete-event run of one report round.

    ``centers`` is a list of ``(bandwidth, [sizes of reporting agents])``.
    Every agent starts sending at t=0 on its own link; returns
    ``(bytes that crossed a center boundary, time the last one arrived)``.
    """
    events = []
    seq = 0
    for i, (bw, sizes) in enumerate(centers, 1):
        for size in sizes:
            delay = Fraction(0) if i == manager_center else Fraction(size) / Fraction(bw)
            heapq.heappush(events, (delay, seq, i, size))
            seq += 1
    crossed, last = 0, Fraction(0)
    while events:
        at, _, origin, size = heapq.heappop(events)
        if origin != manager_center:
            crossed += size
            last = at
    return crossed, last


def simulate_manager_hierarchy(manager_msg_sizes, super_center):
    """Sub-manager i ships M_i to the super manager; count inter-center bytes."""
    return sum(m for center, m in enumerate(manager_msg_sizes, 1)
               if center != super_center)


def levels_by_layers(N, n):
    """Grow a complete n-ary tree one layer at a time until it holds N nodes."""
    held, layer, levels = 0, 1, 0
    while held < N:
        held += layer
        layer *= n
        levels += 1
    return levels


def level_filled_parents(N, n):
    """parents[k] for nodes 0..N-1 placed breadth first, left to right (root: -1)."""
    parents, kids = [-1], [0] * N
    slot = 0
    for _ in range(1, N):
        while kids[slot] == n:
            slot += 1
        parents.append(slot)
        kids[slot] += 1
    return parents


def star_parents(N):
    return [-1] + [0] * (N - 1)


def random_parents(N, n, rng: random.Random):
    """A random rooted tree of N nodes in which no node has more than n children."""
    parents, kids = [-1], [0]
    open_nodes = [0]
    for k in range(1, N):
        p = rng.choice(open_nodes)
        parents.append(p)
        kids[p] += 1
        kids.append(0)
        if kids[p] == n:
            open_nodes.remove(p)
        open_nodes.append(k)
    return parents


def depths(parents):
    d = [0] * len(parents)
    for k in range(1, len(parents)):
        d[k] = d[parents[k]] + 1  # parents always precede children
    return d


def tree_walk_total(parents):
    return sum(depths(parents))


def simulate_response(parents, t=1):
    """Every non-root node reports at t=0; each hop toward the root takes t."""
    events = [(Fraction(0), k, k) for k in range(1, len(parents))]
    heapq.heapify(events)
    total = Fraction(0)
    while events:
        at, origin, node = heapq.heappop(events)
        if node == 0:
            total += at
        else:
            heapq.heappush(events, (at + t, origin, parents[node]))
    return total


def cpu_from_tree(parents, C=1):
    """Per-manager load = messages received from direct children."""
    load = [0] * len(parents)
    for p in parents[1:]:
        load[p] += 1
    busy = sum(1 for x in load if x) or 1
    others = max(load[1:], default=0)
    return load[0] * C, others * C, busy, sum(load) * C


def linear_search_avg(N, t=1):
    """Flat layout: scan N positions; reaching position k costs k hops."""
    return Fraction(sum(range(N)), N) * t


def leaf_depths(parents):
    has_child = set(parents[1:])
    d = depths(parents)
    return [d[k] for k in range(len(parents)) if k not in has_child]


def precise_log(x, base, digits=50):
    with mpmath.workdps(digits):
        return mpmath.log(x) / mpmath.log(base)
