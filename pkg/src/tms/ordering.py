"""Deterministic topological ordering shared by listener and module ordering."""

from __future__ import annotations

import heapq
from typing import Iterable, Mapping

from .errors import CycleError


def topological_order(deps: Mapping[str, Iterable[str]]) -> list[str]:
    """Order the keys of ``deps`` so every node comes after its dependencies.

    Dependencies naming nodes absent from ``deps`` are ignored. Among nodes
    that are ready at the same time the lexicographically smallest goes first.
    Raises CycleError naming one actual cycle if the graph is not a DAG.
    """
    present = {n: sorted(set(d) & deps.keys()) for n, d in deps.items()}
    waiting = {n: len(d) for n, d in present.items()}
    dependents: dict[str, list[str]] = {n: [] for n in present}
    for n, ds in present.items():
        for d in ds:
            dependents[d].append(n)

    ready = [n for n, k in waiting.items() if k == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        n = heapq.heappop(ready)
        order.append(n)
        for m in dependents[n]:
            waiting[m] -= 1
            if waiting[m] == 0:
                heapq.heappush(ready, m)

    if len(order) != len(present):
        raise CycleError(_find_cycle(present, set(order)))
    return order


def _find_cycle(present, done):
    # every unfinished node still has at least one unfinished dependency,
    # so following those links from any unfinished node must revisit one
    node = min(n for n in present if n not in done)
    seen: dict[str, int] = {}
    path = []
    while node not in seen:
        seen[node] = len(path)
        path.append(node)
        node = next(d for d in present[node] if d not in done)
    return path[seen[node]:]
