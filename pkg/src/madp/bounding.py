"""Contribution bounding: choose which examples to train on.

All greedy variants scan edges in increasing arity (ties by edge id, or by a
seeded shuffle) and add an edge whenever doing so keeps every incident user
within budget:

* `greedy_no_dup`      one pass, each edge at most once;
* `greedy_dup`         repeated passes with duplicates until a pass adds nothing;
* `greedy_min_sep`     builds a batch schedule in which a user never appears
                       twice within `b` consecutive batches;
* `greedy_interleaved` alternates runs of low- and high-arity edges to trade
                       dataset size against arity bias.

`random_baseline` and `pareto_filter` support the bias ablations.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Sequence

import numpy as np

from .hypergraph import Hypergraph, Schedule, Selection, check_min_sep


class NoSolutionFound(RuntimeError):
    """The min-sep greedy made a full pass without adding an edge."""


@dataclasses.dataclass
class BoundingResult:
    selection: Selection
    achieved_k: int
    distinct_count: int
    total_count: int
    avg_arity: float
    schedule: Schedule | None = None
    # Candidate edge ids in the order they were tried (interleaved only, on request).
    attempts: list[int] | None = None

    def summary(self) -> str:
        return (f'total={self.total_count} distinct={self.distinct_count} '
                f'k={self.achieved_k} avg_arity={self.avg_arity:.6g}')


@dataclasses.dataclass(frozen=True)
class InterleaveSpec:
    threshold_u: float
    c1: int = 1
    c2: int = 1
    allow_dup: bool = True

    def __post_init__(self):
        if self.c1 < 1 or self.c2 < 1:
            raise ValueError('c1 and c2 must be >= 1')
        if self.threshold_u < 1:
            raise ValueError('threshold_u must be >= 1')


def sort_order(h: Hypergraph, tie: str = 'id', seed: int = 0) -> np.ndarray:
    """Edge ids by increasing arity; ties by id or by a seeded shuffle."""
    if tie == 'id':
        return np.argsort(h.arity, kind='stable')
    if tie == 'seeded-shuffle':
        perm = np.random.default_rng(seed).permutation(h.num_edges)
        return perm[np.argsort(h.arity[perm], kind='stable')]
    raise ValueError(f'unknown tie-break {tie!r}')


def make_result(h: Hypergraph, added: Sequence[int], schedule: Schedule | None = None) -> BoundingResult:
    """Summarizes a list of added edge ids (duplicates allowed)."""
    sel = Selection.from_ids(added)
    load = sel.user_loads(h)
    total = len(added)
    arity_sum = sum(len(h.edges[e]) * c for e, c in sel.counts.items())
    return BoundingResult(
        selection=sel,
        achieved_k=int(load.max(initial=0)),
        distinct_count=sel.distinct,
        total_count=total,
        avg_arity=arity_sum / total if total else 0.0,
        schedule=schedule,
    )


def _check_k(k: int):
    if k < 1:
        raise ValueError(f'k must be >= 1, got {k}')


def _scan(h: Hypergraph, order, load: list[int], k: int, added: list[int]) -> list[int]:
    """One greedy pass; returns the edges added during the pass."""
    edges = h.edges
    taken = []
    for e in order:
        users = edges[e]
        if all(load[u] < k for u in users):
            for u in users:
                load[u] += 1
            taken.append(e)
    added.extend(taken)
    return taken


def greedy_no_dup(h: Hypergraph, k: int, tie: str = 'id', seed: int = 0) -> BoundingResult:
    """Single pass; each edge is kept iff all of its users have < k kept edges."""
    _check_k(k)
    load = [0] * h.num_users
    added: list[int] = []
    _scan(h, sort_order(h, tie, seed).tolist(), load, k, added)
    return make_result(h, added)


def greedy_dup(h: Hypergraph, k: int, tie: str = 'id', seed: int = 0) -> BoundingResult:
    """Repeated passes with duplicates until a pass adds nothing.

    Loads only grow, so an edge rejected in one pass is rejected in every
    later pass; pass p+1 therefore only needs to revisit the edges that pass p
    accepted, in the same relative order.
    """
    _check_k(k)
    load = [0] * h.num_users
    added: list[int] = []
    candidates = sort_order(h, tie, seed).tolist()
    while candidates:
        candidates = _scan(h, candidates, load, k, added)
    return make_result(h, added)


def greedy_min_sep(h: Hypergraph, T: int, B: int, b: int, tie: str = 'id', seed: int = 0) -> BoundingResult:
    """Greedy (k, b)-min-sep schedule of T batches of size B.

    Raises:
      NoSolutionFound: if a full pass over the edges adds nothing before the
        schedule holds T*B entries.
    """
    if min(T, B, b) < 1:
        raise ValueError('T, B and b must be >= 1')
    order = sort_order(h, tie, seed).tolist()
    if not order:
        raise NoSolutionFound('empty hypergraph')
    edges = h.edges
    last = [-b] * h.num_users  # batch index of each user's latest occurrence
    flat: list[int] = []
    target = T * B
    n = len(order)
    idle = 0
    pos = 0
    while len(flat) < target:
        e = order[pos]
        pos = pos + 1 if pos + 1 < n else 0
        t = len(flat) // B
        users = edges[e]
        if all(t - last[u] >= b for u in users):
            for u in users:
                last[u] = t
            flat.append(e)
            idle = 0
        else:
            idle += 1
            if idle >= n:
                raise NoSolutionFound(
                    f'no edge fits after {len(flat)} of {target} slots (T={T}, B={B}, b={b})')
    sch = Schedule.from_flat(flat, B)
    res = make_result(h, flat, schedule=sch)
    # Post-hoc bound from the construction: at most one occurrence per b batches.
    assert res.achieved_k <= math.ceil(T / b)
    return res


def max_feasible_b(h: Hypergraph, T: int, B: int, start: int = 2, limit: int | None = None,
                   tie: str = 'id', seed: int = 0) -> int:
    """Largest b in start, start+1, ... before greedy_min_sep first fails.

    Returns start - 1 if `start` itself fails.
    """
    b = start
    limit = T if limit is None else limit
    while b <= limit:
        try:
            greedy_min_sep(h, T, B, b, tie, seed)
        except NoSolutionFound:
            break
        b += 1
    return b - 1


def greedy_interleaved(h: Hypergraph, k: int, spec: InterleaveSpec, tie: str = 'id', seed: int = 0,
                       record_attempts: bool = False) -> BoundingResult:
    """Greedy over a stream alternating c1 low-arity and c2 high-arity candidates.

    Low edges have arity <= u, high edges arity > u; each group is scanned in
    sorted order with its own wrap-around cursor.  Without duplicates a group
    is exhausted once its cursor reaches the end; with duplicates, once a full
    cycle of the group added nothing.  When one group is exhausted the other
    is drained on its own.
    """
    _check_k(k)
    order = sort_order(h, tie, seed)
    low_mask = h.arity[order] <= spec.threshold_u
    groups = [order[low_mask].tolist(), order[~low_mask].tolist()]
    run_length = [spec.c1, spec.c2]
    cursor = [0, 0]
    added_this_cycle = [0, 0]
    alive = [bool(g) for g in groups]
    load = [0] * h.num_users
    edges = h.edges
    added: list[int] = []
    attempts: list[int] | None = [] if record_attempts else None
    g = 0 if alive[0] else 1
    while any(alive):
        if not alive[g]:
            g = 1 - g
        group = groups[g]
        for _ in range(run_length[g]):
            e = group[cursor[g]]
            if attempts is not None:
                attempts.append(e)
            users = edges[e]
            if all(load[u] < k for u in users):
                for u in users:
                    load[u] += 1
                added.append(e)
                added_this_cycle[g] += 1
            cursor[g] += 1
            if cursor[g] == len(group):
                if not spec.allow_dup or added_this_cycle[g] == 0:
                    alive[g] = False
                    break
                cursor[g] = 0
                added_this_cycle[g] = 0
        g = 1 - g
    res = make_result(h, added)
    res.attempts = attempts
    return res


def median_arity(h: Hypergraph) -> float:
    return float(np.median(h.arity)) if h.num_edges else 0.0


def random_baseline(h: Hypergraph, target_size: int, mode: str = 'all', seed: int = 0) -> Selection:
    """Uniform sample of edges with no contribution bound (ablation only).

    mode 'low' / 'high' restricts the pool to arity <= / > the median arity.
    """
    u = median_arity(h)
    if mode == 'all':
        pool = np.arange(h.num_edges)
    elif mode == 'low':
        pool = np.flatnonzero(h.arity <= u)
    elif mode == 'high':
        pool = np.flatnonzero(h.arity > u)
    else:
        raise ValueError(f'unknown mode {mode!r}')
    if target_size > len(pool):
        raise ValueError(f'pool of {len(pool)} edges is smaller than target size {target_size}')
    picked = np.random.default_rng(seed).choice(pool, size=target_size, replace=False)
    return Selection.from_ids(np.sort(picked).tolist())


def pareto_filter(points: Sequence[tuple[float, float]]) -> list[int]:
    """Indices of points not strictly dominated when maximizing both coordinates."""
    pts = [(float(a), float(b)) for a, b in points]
    # Sweep by decreasing first coordinate; equal first coordinates form one group.
    order = sorted(range(len(pts)), key=lambda i: (-pts[i][0], -pts[i][1]))
    keep = []
    best_y = -math.inf  # best second coordinate among strictly larger x
    i = 0
    while i < len(order):
        j = i
        x = pts[order[i]][0]
        while j < len(order) and pts[order[j]][0] == x:
            j += 1
        group = order[i:j]
        top_y = pts[group[0]][1]
        if top_y > best_y:
            keep.extend(idx for idx in group if pts[idx][1] == top_y)
        best_y = max(best_y, top_y)
        i = j
    return sorted(keep)


def verify_feasible(h: Hypergraph, res: BoundingResult, k: int | None = None, b: int | None = None) -> bool:
    """Hard gate used before training."""
    from .hypergraph import check_contribution_bound
    if res.schedule is not None:
        return b is not None and check_min_sep(h, res.schedule, b)
    return check_contribution_bound(h, res.selection, res.achieved_k if k is None else k)
