"""Exact formulations of contribution bounding.

`export_cb_ilp` and `export_minsep_ilp` write the integer programs in CPLEX
LP text format for external solvers.  `exact_solve_cb` is a small
branch-and-bound used as an optimality oracle for the greedy algorithms.

Naming: edge variables ``x<i>`` (``x<i>_<t>`` per batch t = 1..T), user
capacity rows ``u<j>``, window rows ``w<j>_<t>``, batch-size rows ``B<t>``.
"""

from __future__ import annotations

import dataclasses
import time

from .bounding import BoundingResult, greedy_dup, greedy_no_dup, make_result
from .hypergraph import Hypergraph

MAX_EXACT_EDGES = 64
MAX_MINSEP_VARIABLES = 10**6
_TERMS_PER_LINE = 8


class InstanceTooLarge(ValueError):
    pass


def _incidence(h: Hypergraph) -> dict[int, list[int]]:
    """user -> sorted edge ids containing that user (users with degree > 0)."""
    inc: dict[int, list[int]] = {}
    for i, e in enumerate(h.edges):
        for u in e:
            inc.setdefault(u, []).append(i)
    return dict(sorted(inc.items()))


def _sum(terms: list[str]) -> list[str]:
    """Renders `a + b + ...`, wrapped to a few terms per line."""
    if not terms:
        return ['0 x_empty']
    lines = []
    for i in range(0, len(terms), _TERMS_PER_LINE):
        chunk = ' + '.join(terms[i:i + _TERMS_PER_LINE])
        lines.append(chunk if i == 0 else '   + ' + chunk)
    return lines


def _row(name: str, terms: list[str], rhs: str) -> list[str]:
    body = _sum(terms)
    body[0] = f' {name}: {body[0]}'
    body[-1] = f'{body[-1]} {rhs}'
    return body


def _var_block(title: str, names: list[str]) -> list[str]:
    if not names:
        return []
    out = [title]
    for i in range(0, len(names), _TERMS_PER_LINE):
        out.append(' ' + ' '.join(names[i:i + _TERMS_PER_LINE]))
    return out


def format_cb_ilp(h: Hypergraph, k: int, allow_dup: bool) -> str:
    """max sum_i x_i  s.t.  sum_{i : j in e_i} x_i <= k for every user j."""
    if k < 1:
        raise ValueError(f'k must be >= 1, got {k}')
    xs = [f'x{i}' for i in range(h.num_edges)]
    lines = ['\\ contribution bounding', 'Maximize']
    if xs:
        lines += _row('obj', xs, '')
    else:
        # An LP file needs at least one variable; a dummy fixed at zero keeps
        # the empty instance well formed.
        lines.append(' obj: 0 x_empty')
    lines.append('Subject To')
    for j, ids in _incidence(h).items():
        lines += _row(f'u{j}', [f'x{i}' for i in ids], f'<= {k}')
    if not xs:
        lines.append(' empty: x_empty = 0')
    if allow_dup:
        lines += ['Bounds'] + [f' {x} >= 0' for x in xs]
        lines += _var_block('Generals', xs)
    else:
        lines += _var_block('Binaries', xs)
    lines.append('End')
    return '\n'.join(line.rstrip() for line in lines) + '\n'


def export_cb_ilp(h: Hypergraph, k: int, allow_dup: bool, path):
    text = format_cb_ilp(h, k, allow_dup)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(text)


def minsep_windows(T: int, b: int) -> list[int]:
    """Start batches (1-based) of the length-b windows inside 1..T."""
    return list(range(1, max(T - b + 1, 0) + 1)) or [1]


def format_minsep_ilp(h: Hypergraph, T: int, B: int, b: int) -> str:
    """min k over binary x_{i,t}: windows of b batches hold a user at most once,
    every user at most k times overall, and every batch exactly B examples.

    When b > T the single (truncated) window 1..T is used.
    """
    if min(T, B, b) < 1:
        raise ValueError('T, B and b must be >= 1')
    nvars = h.num_edges * T + 1
    if nvars > MAX_MINSEP_VARIABLES:
        raise InstanceTooLarge(f'{nvars} variables exceeds the limit of {MAX_MINSEP_VARIABLES}')
    steps = range(1, T + 1)
    lines = ['\\ min-sep contribution bounding', 'Minimize', ' obj: k', 'Subject To']
    inc = _incidence(h)
    for j, ids in inc.items():
        for t in minsep_windows(T, b):
            window = range(t, min(t + b - 1, T) + 1)
            lines += _row(f'w{j}_{t}', [f'x{i}_{s}' for i in ids for s in window], '<= 1')
    for j, ids in inc.items():
        lines += _row(f'u{j}', [f'x{i}_{s}' for i in ids for s in steps] + ['- k'], '<= 0')
    for t in steps:
        lines += _row(f'B{t}', [f'x{i}_{t}' for i in range(h.num_edges)], f'= {B}')
    lines += ['Bounds', ' k >= 0', 'Generals', ' k']
    lines += _var_block('Binaries', [f'x{i}_{t}' for i in range(h.num_edges) for t in steps])
    lines.append('End')
    # '+ - k' is not valid LP syntax; fold it into a subtraction.
    return '\n'.join(line.rstrip().replace('+ - k', '- k') for line in lines) + '\n'


def export_minsep_ilp(h: Hypergraph, T: int, B: int, b: int, path):
    text = format_minsep_ilp(h, T, B, b)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(text)


@dataclasses.dataclass(frozen=True)
class SolveLimits:
    max_nodes: int = 2_000_000
    max_seconds: float = 60.0


def exact_solve_cb(h: Hypergraph, k: int, allow_dup: bool = False,
                   limits: SolveLimits = SolveLimits()) -> tuple[BoundingResult, bool]:
    """Maximum-size selection under contribution bound k, by branch and bound.

    Edges are branched in order of decreasing multiplicity (0/1 without
    duplicates, up to k with duplicates).  A node is pruned when its count
    plus an upper bound on what the undecided edges can still add does not
    beat the incumbent.  The bound is min(#undecided capacity, remaining
    user slack), where each remaining edge consumes at least one unit of
    slack from some user.

    Returns:
      (result, optimal): `optimal` is False if a node or time cap stopped
      the search, in which case the result is the best found.
    """
    if k < 1:
        raise ValueError(f'k must be >= 1, got {k}')
    if h.num_edges > MAX_EXACT_EDGES:
        raise InstanceTooLarge(f'exact solver supports at most {MAX_EXACT_EDGES} edges, got {h.num_edges}')
    greedy = (greedy_dup if allow_dup else greedy_no_dup)(h, k)
    best_count = greedy.total_count
    best = greedy.selection.counts.copy()
    cap = k if allow_dup else 1
    # Branch on the most constrained (highest arity) edges first.
    order = sorted(range(h.num_edges), key=lambda i: (-len(h.edges[i]), i))
    edges = [h.edges[i] for i in order]
    load = [0] * h.num_users
    # Users whose capacity remaining edges could use, for the slack bound.
    rest_users: list[set[int]] = [set() for _ in range(len(order) + 1)]
    for pos in range(len(order) - 1, -1, -1):
        rest_users[pos] = rest_users[pos + 1] | set(edges[pos])
    chosen = [0] * len(order)
    nodes = 0
    deadline = time.monotonic() + limits.max_seconds
    stopped = False

    def bound(pos: int) -> int:
        slack = sum(k - load[u] for u in rest_users[pos])
        return min((len(order) - pos) * cap, slack)

    def dfs(pos: int, count: int):
        nonlocal best_count, best, nodes, stopped
        if stopped:
            return
        nodes += 1
        if nodes > limits.max_nodes or (nodes & 1023 == 0 and time.monotonic() > deadline):
            stopped = True
            return
        if count > best_count:
            best_count = count
            best = {order[p]: c for p, c in enumerate(chosen) if c}
        if pos == len(order) or count + bound(pos) <= best_count:
            return
        users = edges[pos]
        room = min(k - load[u] for u in users)
        for m in range(min(room, cap), -1, -1):
            for u in users:
                load[u] += m
            chosen[pos] = m
            dfs(pos + 1, count + m)
            for u in users:
                load[u] -= m
            chosen[pos] = 0
            if stopped:
                return

    dfs(0, 0)
    ids = [e for e, c in sorted(best.items()) for _ in range(c)]
    return make_result(h, ids), not stopped
