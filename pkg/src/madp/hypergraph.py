"""User/example attribution hypergraphs.

Users are dense integer ids in [0, num_users); every example (edge) is a
non-empty set of users.  Selections are multisets of edge ids, schedules are
ordered batches of edge ids.

File formats (UTF-8, LF):

    edge list   first line ``users=<m>``, then ``<edge_id>\\t<u>,<u>,...``
                with edge ids 0, 1, 2, ... in order
    selection   ``<edge_id>\\t<multiplicity>``
    schedule    ``<batch_index>\\t<edge_id>`` in flattening order
"""

from __future__ import annotations

import dataclasses
import functools
from collections import Counter
from typing import Iterable, Sequence

import numpy as np


class HypergraphFormatError(ValueError):
    """A hypergraph, selection or schedule file could not be parsed."""

    def __init__(self, path, lineno: int, message: str):
        super().__init__(f'{path}:{lineno}: {message}')
        self.lineno = lineno


@dataclasses.dataclass(frozen=True, eq=False)
class Hypergraph:
    """Immutable hypergraph; edge ``i`` is ``edges[i]``."""

    num_users: int
    edges: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if self.num_users < 0:
            raise ValueError('num_users must be non-negative')
        for i, e in enumerate(self.edges):
            if not e:
                raise ValueError(f'edge {i} has no users')
            if len(set(e)) != len(e):
                raise ValueError(f'edge {i} repeats a user: {e}')
            if min(e) < 0 or max(e) >= self.num_users:
                raise ValueError(f'edge {i} has a user outside [0, {self.num_users})')

    @classmethod
    def from_edges(cls, num_users: int, edges: Iterable[Iterable[int]]) -> 'Hypergraph':
        return cls(num_users, tuple(tuple(int(u) for u in e) for e in edges))

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def __len__(self):
        return len(self.edges)

    def __eq__(self, other):
        if not isinstance(other, Hypergraph):
            return NotImplemented
        return self.num_users == other.num_users and self.edges == other.edges

    __hash__ = None

    @functools.cached_property
    def arity(self) -> np.ndarray:
        return np.fromiter((len(e) for e in self.edges), dtype=np.int64, count=len(self.edges))

    @functools.cached_property
    def degree_index(self) -> np.ndarray:
        """Number of edges containing each user."""
        deg = np.zeros(self.num_users, dtype=np.int64)
        if self.edges:
            np.add.at(deg, np.fromiter((u for e in self.edges for u in e), dtype=np.int64), 1)
        return deg

    def subgraph(self, edge_ids: Sequence[int]) -> tuple['Hypergraph', np.ndarray]:
        """Restriction to `edge_ids` (renumbered 0..n-1) and the id map back."""
        ids = np.asarray(edge_ids, dtype=np.int64)
        return Hypergraph(self.num_users, tuple(self.edges[i] for i in ids)), ids


def degrees(h: Hypergraph) -> dict[int, int]:
    """Per-user incidence counts, for users that appear in at least one edge."""
    deg = h.degree_index
    return {int(u): int(deg[u]) for u in np.flatnonzero(deg)}


@dataclasses.dataclass
class Selection:
    """A multiset of edge ids, stored as edge_id -> multiplicity."""

    counts: dict[int, int] = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        for e, c in self.counts.items():
            if c < 1:
                raise ValueError(f'multiplicity of edge {e} must be >= 1, got {c}')

    @classmethod
    def from_ids(cls, ids: Iterable[int]) -> 'Selection':
        return cls(dict(Counter(int(i) for i in ids)))

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def distinct(self) -> int:
        return len(self.counts)

    def expanded(self) -> np.ndarray:
        """Edge ids with each id repeated by its multiplicity."""
        if not self.counts:
            return np.zeros(0, dtype=np.int64)
        ids = np.fromiter(self.counts.keys(), dtype=np.int64, count=len(self.counts))
        reps = np.fromiter(self.counts.values(), dtype=np.int64, count=len(self.counts))
        return np.repeat(ids, reps)

    def user_loads(self, h: Hypergraph) -> np.ndarray:
        load = np.zeros(h.num_users, dtype=np.int64)
        for e, c in self.counts.items():
            for u in h.edges[e]:
                load[u] += c
        return load


@dataclasses.dataclass
class Schedule:
    """Ordered batches of edge ids; all but the last have `batch_size` entries."""

    batches: list[list[int]]
    batch_size: int

    @property
    def num_batches(self) -> int:
        return len(self.batches)

    @classmethod
    def from_flat(cls, order: Sequence[int], batch_size: int) -> 'Schedule':
        if batch_size < 1:
            raise ValueError('batch_size must be >= 1')
        order = [int(i) for i in order]
        batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
        return cls(batches, batch_size)

    def flat(self) -> list[int]:
        return [e for b in self.batches for e in b]

    def to_selection(self) -> Selection:
        return Selection.from_ids(self.flat())


def _check_refs(h: Hypergraph, ids: Iterable[int]):
    for e in ids:
        if not 0 <= e < h.num_edges:
            raise ValueError(f'edge id {e} not in hypergraph with {h.num_edges} edges')


def check_contribution_bound(h: Hypergraph, s: Selection, k: int) -> bool:
    """True iff every user's selected edges, counted with multiplicity, number <= k."""
    _check_refs(h, s.counts)
    if not s.counts:
        return True
    return int(s.user_loads(h).max(initial=0)) <= k


def check_min_sep(h: Hypergraph, sch: Schedule, b: int) -> bool:
    """True iff no user occurs twice within any `b` consecutive batches.

    Windows at the tail are truncated, so two occurrences in batches t1 < t2
    conflict exactly when t2 - t1 < b (and any two in the same batch conflict).
    """
    if b < 1:
        raise ValueError('b must be >= 1')
    last: dict[int, int] = {}
    for t, batch in enumerate(sch.batches):
        _check_refs(h, batch)
        for e in batch:
            for u in h.edges[e]:
                prev = last.get(u)
                if prev is not None and t - prev < b:
                    return False
                last[u] = t
    return True


def post_hoc_k(h: Hypergraph, s: Selection) -> int:
    """Largest per-user load of a selection (0 when empty)."""
    if not s.counts:
        return 0
    return int(s.user_loads(h).max(initial=0))


# ---------------------------------------------------------------------------
# Serialization.


def _parse_int(token: str, path, lineno: int, what: str) -> int:
    token = token.strip()
    if not token or not (token.isdigit()):
        raise HypergraphFormatError(path, lineno, f'bad {what} {token!r}')
    return int(token)


def parse_hypergraph(text: str, path='<string>') -> Hypergraph:
    lines = text.split('\n')
    if lines and lines[-1] == '':
        lines.pop()
    if not lines or not lines[0].startswith('users='):
        raise HypergraphFormatError(path, 1, 'expected header users=<m>')
    num_users = _parse_int(lines[0][len('users='):], path, 1, 'user count')
    edges = []
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split('\t')
        if len(fields) != 2:
            raise HypergraphFormatError(path, lineno, 'expected <edge_id>\\t<users>')
        edge_id = _parse_int(fields[0], path, lineno, 'edge id')
        if edge_id != len(edges):
            raise HypergraphFormatError(path, lineno, f'edge id {edge_id} out of order, expected {len(edges)}')
        if not fields[1].strip():
            raise HypergraphFormatError(path, lineno, 'empty user set')
        users = tuple(_parse_int(u, path, lineno, 'user id') for u in fields[1].split(','))
        if len(set(users)) != len(users):
            raise HypergraphFormatError(path, lineno, f'repeated user in edge {edge_id}')
        bad = [u for u in users if u >= num_users]
        if bad:
            raise HypergraphFormatError(path, lineno, f'user id {bad[0]} >= users={num_users}')
        edges.append(users)
    return Hypergraph(num_users, tuple(edges))


def load_hypergraph(path) -> Hypergraph:
    with open(path, encoding='utf-8', newline='') as f:
        return parse_hypergraph(f.read(), path)


def format_hypergraph(h: Hypergraph) -> str:
    parts = [f'users={h.num_users}\n']
    parts.extend(f'{i}\t{",".join(map(str, e))}\n' for i, e in enumerate(h.edges))
    return ''.join(parts)


def save_hypergraph(h: Hypergraph, path):
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(format_hypergraph(h))


def load_user_names(path) -> list[str]:
    """Optional sidecar: line i holds the external name of user i."""
    with open(path, encoding='utf-8') as f:
        return [line.rstrip('\n') for line in f]


def save_selection(s: Selection, path):
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        for e, c in s.counts.items():
            f.write(f'{e}\t{c}\n')


def load_selection(path) -> Selection:
    counts: dict[int, int] = {}
    with open(path, encoding='utf-8') as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip('\n')
            if not line:
                continue
            fields = line.split('\t')
            if len(fields) != 2:
                raise HypergraphFormatError(path, lineno, 'expected <edge_id>\\t<multiplicity>')
            e = _parse_int(fields[0], path, lineno, 'edge id')
            c = _parse_int(fields[1], path, lineno, 'multiplicity')
            if c < 1 or e in counts:
                raise HypergraphFormatError(path, lineno, f'bad entry for edge {e}')
            counts[e] = c
    return Selection(counts)


def save_schedule(sch: Schedule, path):
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        for t, batch in enumerate(sch.batches):
            for e in batch:
                f.write(f'{t}\t{e}\n')


def load_schedule(path, batch_size: int | None = None) -> Schedule:
    """Reads a schedule file; batch size defaults to the size of batch 0."""
    batches: list[list[int]] = []
    with open(path, encoding='utf-8') as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip('\n')
            if not line:
                continue
            fields = line.split('\t')
            if len(fields) != 2:
                raise HypergraphFormatError(path, lineno, 'expected <batch_index>\\t<edge_id>')
            t = _parse_int(fields[0], path, lineno, 'batch index')
            e = _parse_int(fields[1], path, lineno, 'edge id')
            if t < len(batches) - 1 or t > len(batches):
                raise HypergraphFormatError(path, lineno, f'batch index {t} out of order')
            if t == len(batches):
                batches.append([])
            batches[t].append(e)
    if batch_size is None:
        batch_size = len(batches[0]) if batches else 1
    return Schedule(batches, batch_size)

