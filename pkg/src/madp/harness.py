"""Config-driven experiments: bound -> calibrate -> train -> evaluate.

A config is a TOML file; see `ExperimentConfig` for the keys.  Each seed
regenerates the graph (unless a graph file is given) and the dataset, and
bounding runs on the training split only.  One CSV row is written per
(seed, epsilon, hyperparameter point); rows are flushed as they complete.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import itertools
import json
import math
import os
from typing import Any, Iterable, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import accounting, bounding, datagen, dptrain, graphgen
from .hypergraph import Hypergraph, Schedule, Selection, check_contribution_bound, check_min_sep, load_hypergraph

RESULT_HEADER = (
    'config_hash', 'seed', 'epsilon', 'delta', 'mechanism', 'algo', 'k', 'b',
    'batch_size', 'steps', 'learning_rate', 'clip_norm', 'hypothetical_batch', 'sampling_prob',
    'achieved_k', 'selected_total', 'selected_distinct', 'avg_arity',
    'sigma', 'accountant', 'status',
    'val_loss', 'val_accuracy', 'test_loss', 'test_accuracy',
)

BIAS_HEADER = ('config_hash', 'seed', 'u', 'c1', 'c2', 'selected_total', 'selected_distinct',
               'avg_arity', 'pareto')

RETENTION_HEADER = ('num_edges', 'k', 'expected_degree', 'regular_total', 'skewed_total',
                    'retention_ratio', 'regular_max_b_times_B', 'skewed_max_b_times_B')


@dataclasses.dataclass
class GraphConfig:
    model: str = 'regular'
    num_edges: int = 125_000
    expected_arity: float = 2.0
    expected_degree: float = 2.0
    skew_alpha: float = 1.5
    path: str | None = None

    def build(self, seed: int) -> Hypergraph:
        if self.path:
            return load_hypergraph(self.path)
        spec = graphgen.GraphGenSpec(self.num_edges, self.expected_arity, self.expected_degree,
                                     self.skew_alpha, seed)
        return graphgen.generate(spec, self.model)


@dataclasses.dataclass
class DataConfig:
    dim: int = 100
    steepness: float = 20.0
    bias_scale: float = 1.0
    cov: str = 'inv'


@dataclasses.dataclass
class BoundingConfig:
    algo: str = 'dup'  # nodup | dup | interleaved | minsep
    k: int = 2
    b: int | str = 'auto'  # minsep only; 'auto' probes the largest feasible b
    u: float = 2
    c1: int = 1
    c2: int = 1
    allow_dup: bool = True
    tie: str = 'id'


@dataclasses.dataclass
class TrainGrid:
    learning_rates: list[float] = dataclasses.field(default_factory=lambda: [1e-3])
    clip_norms: list[float] = dataclasses.field(default_factory=lambda: [1.0])
    # (batch_size, steps) pairs; the product should be the same for all pairs.
    batch_steps: list[tuple[int, int]] = dataclasses.field(default_factory=lambda: [(1024, 1000)])
    optimizer: str = 'adam'
    strategy: str = 'optimized'  # DP-MF strategy: optimized | identity

    def points(self):
        return list(itertools.product(self.batch_steps, self.learning_rates, self.clip_norms))


@dataclasses.dataclass
class ExperimentConfig:
    """Experiment description.

    Top-level TOML keys: name, mechanism ('dpsgd' or 'dpmf'), epsilons,
    delta, seeds, hypothetical_batch (0 = off), noise_table (optional CSV),
    bias_us, bias_k, retention_* keys; sections [graph], [data],
    [bounding] and [train].
    """

    name: str = 'experiment'
    mechanism: str = 'dpsgd'
    epsilons: list[float] = dataclasses.field(default_factory=lambda: [2.0 ** e for e in range(-1, 7)])
    delta: float = 1e-10
    seeds: list[int] = dataclasses.field(default_factory=lambda: [0, 1, 2, 3, 4])
    hypothetical_batch: int = 0
    noise_table: str | None = None
    graph: GraphConfig = dataclasses.field(default_factory=GraphConfig)
    data: DataConfig = dataclasses.field(default_factory=DataConfig)
    bounding: BoundingConfig = dataclasses.field(default_factory=BoundingConfig)
    train: TrainGrid = dataclasses.field(default_factory=TrainGrid)
    # Bias sweep.
    bias_us: list[float] = dataclasses.field(default_factory=lambda: [1, 2, 3, 4])
    bias_k: int = 3
    # Retention comparison.
    retention_ks: list[int] = dataclasses.field(default_factory=lambda: [2, 4, 8])
    retention_degrees: list[float] = dataclasses.field(default_factory=lambda: [2, 4, 8])
    retention_minsep: tuple[int, int] | None = None  # (T, B) for the max-b probe

    def __post_init__(self):
        if not self.epsilons:
            raise ValueError('epsilon grid must be nonempty')
        if self.mechanism not in ('dpsgd', 'dpmf'):
            raise ValueError(f'unknown mechanism {self.mechanism!r}')
        products = {b * t for b, t in self.train.batch_steps}
        if len(products) > 1:
            raise ValueError(f'batch_size * steps must be constant across the grid, got {sorted(products)}')
        if self.mechanism == 'dpmf' and self.bounding.algo != 'minsep':
            raise ValueError("dpmf requires bounding algo 'minsep'")
        if self.mechanism == 'dpsgd' and self.bounding.algo == 'minsep':
            raise ValueError("bounding algo 'minsep' produces a schedule; use mechanism 'dpmf'")

    def config_hash(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _section(cls, raw: dict | None):
    raw = dict(raw or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ValueError(f'unknown keys for {cls.__name__}: {sorted(unknown)}')
    return cls(**raw)


def config_from_dict(raw: dict[str, Any]) -> ExperimentConfig:
    raw = dict(raw)
    sections = {
        'graph': _section(GraphConfig, raw.pop('graph', None)),
        'data': _section(DataConfig, raw.pop('data', None)),
        'bounding': _section(BoundingConfig, raw.pop('bounding', None)),
    }
    train = dict(raw.pop('train', None) or {})
    if 'batch_steps' in train:
        train['batch_steps'] = [tuple(int(v) for v in pair) for pair in train['batch_steps']]
    sections['train'] = _section(TrainGrid, train)
    if raw.get('retention_minsep') is not None:
        raw['retention_minsep'] = tuple(raw['retention_minsep'])
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(raw) - names
    if unknown:
        raise ValueError(f'unknown config keys: {sorted(unknown)}')
    return ExperimentConfig(**raw, **sections)


def load_config(path) -> ExperimentConfig:
    with open(path, 'rb') as f:
        return config_from_dict(tomllib.load(f))


# ---------------------------------------------------------------------------
# Per-seed setup.


@dataclasses.dataclass
class SeedData:
    graph: Hypergraph
    dataset: datagen.RegressionDataset
    train_graph: Hypergraph
    train_ids: np.ndarray  # train-graph edge id -> dataset row

    def to_rows(self, sel: Selection) -> Selection:
        return Selection({int(self.train_ids[e]): c for e, c in sel.counts.items()})


def prepare_seed(cfg: ExperimentConfig, seed: int) -> SeedData:
    h = cfg.graph.build(seed)
    spec = datagen.RegressionSpec(cfg.data.dim, cfg.data.steepness, cfg.data.bias_scale, seed, cfg.data.cov)
    ds = datagen.gen_regression(h, spec)
    train_graph, ids = h.subgraph(ds.indices(datagen.TRAIN))
    return SeedData(h, ds, train_graph, ids)


def run_bounding(cfg: BoundingConfig, h: Hypergraph, T: int | None = None, B: int | None = None,
                 seed: int = 0) -> tuple[bounding.BoundingResult, int]:
    """Runs the configured algorithm; returns (result, b) with b = 1 unless min-sep."""
    algo = cfg.algo
    if algo == 'nodup':
        return bounding.greedy_no_dup(h, cfg.k, cfg.tie, seed), 1
    if algo == 'dup':
        return bounding.greedy_dup(h, cfg.k, cfg.tie, seed), 1
    if algo == 'interleaved':
        spec = bounding.InterleaveSpec(cfg.u, cfg.c1, cfg.c2, cfg.allow_dup)
        return bounding.greedy_interleaved(h, cfg.k, spec, cfg.tie, seed), 1
    if algo == 'minsep':
        if T is None or B is None:
            raise ValueError('minsep needs T and B')
        b = cfg.b
        if b == 'auto':
            b = max_b_probe(h, T, B, tie=cfg.tie, seed=seed)
            if b < 1:
                raise bounding.NoSolutionFound(f'no feasible min-sep schedule for T={T}, B={B}')
        return bounding.greedy_min_sep(h, T, B, int(b), cfg.tie, seed), int(b)
    raise ValueError(f'unknown bounding algo {algo!r}')


def max_b_probe(h: Hypergraph, T: int, B: int, tie: str = 'id', seed: int = 0) -> int:
    """Escalating probe: b = 2, 3, ... until the greedy fails; returns the last success.

    Falls back to b = 1 when b = 2 already fails (and 0 if even b = 1 does).
    """
    b = bounding.max_feasible_b(h, T, B, start=2, tie=tie, seed=seed)
    if b >= 2:
        return b
    try:
        bounding.greedy_min_sep(h, T, B, 1, tie, seed)
        return 1
    except bounding.NoSolutionFound:
        return 0


# ---------------------------------------------------------------------------
# Main experiment.


class _RowWriter:
    """Appends CSV rows and flushes after each one."""

    def __init__(self, path, header: Sequence[str]):
        self.header = tuple(header)
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        self._f = open(path, 'w', newline='')
        self._w = csv.DictWriter(self._f, fieldnames=self.header, lineterminator='\n')
        self._w.writeheader()
        self._f.flush()

    def write(self, row: dict):
        self._w.writerow({k: _fmt(row.get(k, '')) for k in self.header})
        self._f.flush()

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (np.floating, np.integer)):
        return repr(v.item())
    return v


def _calibrate(cfg: ExperimentConfig, table, budget, k: int, p: float, steps: int) -> tuple[float, str]:
    if cfg.mechanism == 'dpmf':
        return accounting.calibrate_sigma_dpmf(budget, k), accounting.accountant_name(False, 'dpmf_minsep')
    if table is not None:
        hit = table.lookup(budget.epsilon, budget.delta, k, p, steps)
        if hit is not None:
            return hit, accounting.accountant_name(True, 'dpsgd_poisson')
    sigma = accounting.calibrate_sigma_dpsgd(budget, k, p, steps)
    return sigma, accounting.accountant_name(False, 'dpsgd_poisson')


def train_and_evaluate(cfg: ExperimentConfig, sd: SeedData, res: bounding.BoundingResult, b: int,
                       epsilons: Iterable[float], seed: int, config_hash: str,
                       table=None, algo: str | None = None) -> list[dict]:
    """All (epsilon, hyperparameter) runs for one bounded dataset."""
    rows = []
    sigma_cache: dict[tuple, tuple] = {}
    selection_rows = sd.to_rows(res.selection)
    is_mf = cfg.mechanism == 'dpmf'
    # Hard gate: never train on an infeasible selection.
    if is_mf:
        if not check_min_sep(sd.train_graph, res.schedule, b):
            raise AssertionError('min-sep schedule failed its feasibility check')
    elif not check_contribution_bound(sd.train_graph, res.selection, res.achieved_k):
        raise AssertionError('selection failed its contribution-bound check')
    k_account = res.achieved_k
    if is_mf:
        schedule_rows = Schedule([[int(sd.train_ids[e]) for e in batch] for batch in res.schedule.batches],
                                 res.schedule.batch_size)
    for eps in epsilons:
        budget = accounting.PrivacyBudget(eps, cfg.delta)
        for (B, T), lr, clip_norm in cfg.train.points():
            acct_B = cfg.hypothetical_batch or B
            p = 1.0 if is_mf else min(1.0, acct_B / res.total_count)
            row = {
                'config_hash': config_hash, 'seed': seed, 'epsilon': float(eps), 'delta': cfg.delta,
                'mechanism': cfg.mechanism, 'algo': algo or cfg.bounding.algo, 'k': cfg.bounding.k, 'b': b,
                'batch_size': B, 'steps': T, 'learning_rate': lr, 'clip_norm': clip_norm,
                'hypothetical_batch': cfg.hypothetical_batch, 'sampling_prob': p,
                'achieved_k': res.achieved_k, 'selected_total': res.total_count,
                'selected_distinct': res.distinct_count, 'avg_arity': res.avg_arity,
            }
            key = (eps, p, T)
            if key not in sigma_cache:
                try:
                    sigma_cache[key] = _calibrate(cfg, table, budget, k_account, p, T)
                except accounting.InfeasibleCalibration:
                    sigma_cache[key] = (math.inf, '')
            sigma, accountant = sigma_cache[key]
            row['sigma'] = sigma
            row['accountant'] = accountant
            if not math.isfinite(sigma):
                row['status'] = 'infeasible'
                rows.append(row)
                continue
            tc = dptrain.TrainConfig(steps=T, batch_size=B, clip_norm=clip_norm, noise_multiplier=sigma,
                                     learning_rate=lr, optimizer=cfg.train.optimizer, seed=seed)
            try:
                if is_mf:
                    C = dptrain.build_strategy(res.schedule.num_batches, min(b, res.schedule.num_batches),
                                               cfg.train.strategy)
                    out = dptrain.dpmf_train(sd.dataset, schedule_rows, tc, C, min_sep=b)
                else:
                    out = dptrain.dpsgd_train(sd.dataset, selection_rows, tc)
            except FloatingPointError:
                row['status'] = 'diverged'
                rows.append(row)
                continue
            row['val_loss'], row['val_accuracy'] = dptrain.evaluate(out.model, sd.dataset, datagen.VALIDATION)
            row['test_loss'], row['test_accuracy'] = dptrain.evaluate(out.model, sd.dataset, datagen.TEST)
            row['status'] = 'ok'
            rows.append(row)
    return rows


def run_experiment(cfg: ExperimentConfig, out_dir) -> list[dict]:
    """Runs the full grid; writes results.csv and best.csv to `out_dir`."""
    os.makedirs(out_dir, exist_ok=True)
    h = cfg.config_hash()
    table = accounting.load_external_noise_table(cfg.noise_table) if cfg.noise_table else None
    rows: list[dict] = []
    with _RowWriter(os.path.join(out_dir, 'results.csv'), RESULT_HEADER) as w:
        for seed in cfg.seeds:
            sd = prepare_seed(cfg, seed)
            if cfg.mechanism == 'dpmf':
                # The schedule depends on (B, T), so bound per grid point.
                for (B, T) in cfg.train.batch_steps:
                    sub = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, batch_steps=[(B, T)]))
                    res, b = run_bounding(cfg.bounding, sd.train_graph, T, B, seed)
                    for row in train_and_evaluate(sub, sd, res, b, cfg.epsilons, seed, h, table):
                        w.write(row)
                        rows.append(row)
            else:
                res, b = run_bounding(cfg.bounding, sd.train_graph, seed=seed)
                for row in train_and_evaluate(cfg, sd, res, b, cfg.epsilons, seed, h, table):
                    w.write(row)
                    rows.append(row)
    best = best_per_epsilon(rows)
    with _RowWriter(os.path.join(out_dir, 'best.csv'), RESULT_HEADER) as w:
        for row in best:
            w.write(row)
    return rows


def best_per_epsilon(rows: Sequence[dict], by: Sequence[str] = ('seed', 'epsilon')) -> list[dict]:
    """Best ok row per group by validation accuracy; ties go to smaller sigma."""
    groups: dict[tuple, dict] = {}
    for row in rows:
        if row.get('status') != 'ok':
            continue
        key = tuple(row[k] for k in by)
        cur = groups.get(key)
        rank = (-row['val_accuracy'], row['sigma'])
        if cur is None or rank < (-cur['val_accuracy'], cur['sigma']):
            groups[key] = row
    return [groups[k] for k in sorted(groups)]


def mean_test_accuracy(rows: Sequence[dict]) -> dict[float, float]:
    """epsilon -> mean over seeds of the validation-selected test accuracy."""
    acc: dict[float, list[float]] = {}
    for row in best_per_epsilon(rows):
        acc.setdefault(row['epsilon'], []).append(row['test_accuracy'])
    return {e: float(np.mean(v)) for e, v in sorted(acc.items())}


# ---------------------------------------------------------------------------
# Bias study.


def interleave_grid(us: Sequence[float]) -> list[tuple[float, int, int]]:
    """(u, c1, c2): c1 = 1 with c2 = 1..10, then c1 = 1..10 with c2 = 1, for each u.

    (u, 1, 1) therefore occurs twice per u, giving 4 * 20 = 80 settings for
    four thresholds.
    """
    grid = []
    for u in us:
        grid += [(u, 1, c2) for c2 in range(1, 11)]
        grid += [(u, c1, 1) for c1 in range(1, 11)]
    return grid


def sweep_bias_tradeoff(cfg: ExperimentConfig, out_dir) -> dict:
    """Interleaved bounding over the 80-setting grid; trains only Pareto-optimal datasets.

    Writes bounding.csv (one row per setting and seed), results.csv (training
    runs) and best.csv (best validation accuracy per seed and epsilon, with
    the winner's average arity).
    """
    os.makedirs(out_dir, exist_ok=True)
    chash = cfg.config_hash()
    grid = interleave_grid(cfg.bias_us)
    bound_rows: list[dict] = []
    train_rows: list[dict] = []
    trained: list[tuple] = []
    with _RowWriter(os.path.join(out_dir, 'bounding.csv'), BIAS_HEADER) as wb, \
            _RowWriter(os.path.join(out_dir, 'results.csv'), RESULT_HEADER + ('u', 'c1', 'c2')) as wr:
        for seed in cfg.seeds:
            sd = prepare_seed(cfg, seed)
            results = []
            for u, c1, c2 in grid:
                spec = bounding.InterleaveSpec(u, c1, c2, cfg.bounding.allow_dup)
                results.append(bounding.greedy_interleaved(sd.train_graph, cfg.bias_k, spec, cfg.bounding.tie, seed))
            points = [(r.total_count, r.avg_arity) for r in results]
            keep = set(bounding.pareto_filter(points))
            seen = set()
            for i, ((u, c1, c2), r) in enumerate(zip(grid, results)):
                row = {'config_hash': chash, 'seed': seed, 'u': u, 'c1': c1, 'c2': c2,
                       'selected_total': r.total_count, 'selected_distinct': r.distinct_count,
                       'avg_arity': r.avg_arity, 'pareto': int(i in keep)}
                wb.write(row)
                bound_rows.append(row)
                sig = tuple(sorted(r.selection.counts.items()))
                if i not in keep or sig in seen:
                    continue
                seen.add(sig)
                trained.append((seed, u, c1, c2))
                sub = dataclasses.replace(cfg, bounding=dataclasses.replace(cfg.bounding, algo='interleaved',
                                                                            k=cfg.bias_k, u=u, c1=c1, c2=c2))
                for tr in train_and_evaluate(sub, sd, r, 1, cfg.epsilons, seed, chash, algo='interleaved'):
                    tr.update(u=u, c1=c1, c2=c2)
                    wr.write(tr)
                    train_rows.append(tr)
    best = best_per_epsilon(train_rows)
    with _RowWriter(os.path.join(out_dir, 'best.csv'), RESULT_HEADER + ('u', 'c1', 'c2')) as w:
        for row in best:
            w.write(row)
    return {'bounding': bound_rows, 'results': train_rows, 'best': best, 'trained': trained}


def winner_arity(best_rows: Sequence[dict]) -> dict[float, float]:
    """epsilon -> seed-averaged average arity of the best dataset."""
    out: dict[float, list[float]] = {}
    for row in best_rows:
        out.setdefault(row['epsilon'], []).append(row['avg_arity'])
    return {e: float(np.mean(v)) for e, v in sorted(out.items())}


# ---------------------------------------------------------------------------
# Retention comparison.


def compare_retention(cfg: ExperimentConfig, out_dir=None, seed: int | None = None) -> list[dict]:
    """Greedy-with-duplicates retention on regular vs skewed graphs.

    For every (k, d_u) cell reports |S| on both graphs and their ratio;
    if `retention_minsep = [T, B]` is set, also the largest feasible min-sep
    b (times B) for each graph.
    """
    seed = cfg.seeds[0] if seed is None else seed
    g = cfg.graph
    rows = []
    for du in cfg.retention_degrees:
        graphs = {}
        for model in ('regular', 'skewed'):
            spec = graphgen.GraphGenSpec(g.num_edges, g.expected_arity, du, g.skew_alpha, seed)
            graphs[model] = graphgen.generate(spec, model)
        max_b = {}
        if cfg.retention_minsep:
            T, B = cfg.retention_minsep
            for model, h in graphs.items():
                max_b[model] = max_b_probe(h, T, B, cfg.bounding.tie, seed) * B
        for k in cfg.retention_ks:
            reg = bounding.greedy_dup(graphs['regular'], k, cfg.bounding.tie, seed).total_count
            skw = bounding.greedy_dup(graphs['skewed'], k, cfg.bounding.tie, seed).total_count
            rows.append({'num_edges': g.num_edges, 'k': k, 'expected_degree': du,
                         'regular_total': reg, 'skewed_total': skw,
                         'retention_ratio': skw / reg if reg else math.nan,
                         'regular_max_b_times_B': max_b.get('regular', ''),
                         'skewed_max_b_times_B': max_b.get('skewed', '')})
    rows.sort(key=lambda r: (r['k'], r['expected_degree']))
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with _RowWriter(os.path.join(out_dir, 'retention.csv'), RETENTION_HEADER) as w:
            for row in rows:
                w.write(row)
    return rows
