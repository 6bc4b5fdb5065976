"""Command-line entry point (`madp`)."""

from __future__ import annotations

import argparse
import sys

from . import accounting, bounding, datagen, graphgen, harness, ilp
from .hypergraph import load_hypergraph, save_hypergraph, save_schedule, save_selection


def _gen_graph(a):
    spec = graphgen.GraphGenSpec(a.edges, a.arity, a.degree, a.alpha, a.seed, a.zero_policy)
    h = graphgen.generate(spec, a.model)
    save_hypergraph(h, a.out)
    print(f'users={h.num_users} edges={h.num_edges} mean_arity={h.arity.mean() if h.num_edges else 0:.6g}')


def _gen_data(a):
    h = load_hypergraph(a.graph)
    spec = datagen.RegressionSpec(a.dim, a.steepness, a.beta, a.seed, a.cov)
    ds = datagen.gen_regression(h, spec)
    datagen.save_dataset(ds, a.out)
    print(f'examples={len(ds)} dim={ds.dim} positive_rate={ds.labels.mean():.6g}')


def _bound(a):
    h = load_hypergraph(a.graph)
    if a.algo == 'random':
        sel = bounding.random_baseline(h, a.size, a.mode, a.seed)
        res = bounding.make_result(h, sel.expanded().tolist())
    else:
        cfg = harness.BoundingConfig(algo=a.algo, k=a.k, b=a.b if a.b is not None else 'auto', u=a.u,
                                     c1=a.c1, c2=a.c2, allow_dup=not a.no_dup, tie=a.tie)
        try:
            res, _ = harness.run_bounding(cfg, h, a.T, a.B, a.seed)
        except bounding.NoSolutionFound as e:
            print(f'no solution found: {e}', file=sys.stderr)
            return 3
    if res.schedule is not None:
        save_schedule(res.schedule, a.out)
    else:
        save_selection(res.selection, a.out)
    print(res.summary())
    return 0


def _ilp(a):
    h = load_hypergraph(a.graph)
    if a.ilp_cmd == 'export-cb':
        ilp.export_cb_ilp(h, a.k, a.dup, a.out)
    elif a.ilp_cmd == 'export-minsep':
        ilp.export_minsep_ilp(h, a.T, a.B, a.b, a.out)
    else:
        res, optimal = ilp.exact_solve_cb(h, a.k, a.dup, ilp.SolveLimits(a.max_nodes, a.max_seconds))
        save_selection(res.selection, a.out)
        print(f'{res.summary()} optimal={str(optimal).lower()}')


def _account(a):
    budget = accounting.PrivacyBudget(a.epsilon, a.delta)
    try:
        if a.mechanism == 'dpmf':
            sigma = accounting.calibrate_sigma_dpmf(budget, a.k)
            name = accounting.accountant_name(False, 'dpmf_minsep')
        else:
            hit = None
            if a.table:
                hit = accounting.load_external_noise_table(a.table).lookup(a.epsilon, a.delta, a.k, a.p, a.steps)
            sigma = hit if hit is not None else accounting.calibrate_sigma_dpsgd(budget, a.k, a.p, a.steps)
            name = accounting.accountant_name(hit is not None, 'dpsgd_poisson')
    except accounting.InfeasibleCalibration as e:
        print(f'infeasible: {e}', file=sys.stderr)
        return 3
    print(f'sigma={sigma:.10g} accountant={name}')
    return 0


def _experiment(a):
    cfg = harness.load_config(a.config)
    if a.exp_cmd == 'run':
        rows = harness.run_experiment(cfg, a.out)
        for eps, acc in harness.mean_test_accuracy(rows).items():
            print(f'epsilon={eps:g} mean_test_accuracy={acc:.4f}')
    elif a.exp_cmd == 'sweep-bias':
        out = harness.sweep_bias_tradeoff(cfg, a.out)
        for eps, ar in harness.winner_arity(out['best']).items():
            print(f'epsilon={eps:g} winner_avg_arity={ar:.4f}')
    else:
        for row in harness.compare_retention(cfg, a.out):
            print(f"k={row['k']} d_u={row['expected_degree']:g} ratio={row['retention_ratio']:.4f}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog='madp', description=__doc__)
    sub = p.add_subparsers(dest='cmd', required=True)

    g = sub.add_parser('gen-graph', help='generate a synthetic hypergraph')
    g.add_argument('--model', choices=['regular', 'skewed'], default='regular')
    g.add_argument('--edges', type=int, required=True)
    g.add_argument('--arity', type=float, default=2.0, help='expected edge arity')
    g.add_argument('--degree', type=float, default=2.0, help='expected user degree d_u')
    g.add_argument('--alpha', type=float, default=1.5, help='skew exponent')
    g.add_argument('--zero-policy', choices=['calibrated', 'resample'], default='calibrated')
    g.add_argument('--seed', type=int, default=0)
    g.add_argument('--out', required=True)
    g.set_defaults(func=_gen_graph)

    d = sub.add_parser('gen-data', help='generate logistic-regression data on a hypergraph')
    d.add_argument('--graph', required=True)
    d.add_argument('--dim', type=int, default=100)
    d.add_argument('--steepness', type=float, default=20.0)
    d.add_argument('--beta', type=float, default=1.0)
    d.add_argument('--cov', choices=['sqrt', 'inv'], default='inv')
    d.add_argument('--seed', type=int, default=0)
    d.add_argument('--out', required=True)
    d.set_defaults(func=_gen_data)

    b = sub.add_parser('bound', help='contribution bounding')
    b.add_argument('--algo', choices=['nodup', 'dup', 'minsep', 'interleaved', 'random'], required=True)
    b.add_argument('--graph', required=True)
    b.add_argument('--k', type=int, default=2)
    b.add_argument('--T', type=int)
    b.add_argument('--B', type=int)
    b.add_argument('--b', type=int, help='min separation (default: largest feasible)')
    b.add_argument('--u', type=float, default=2)
    b.add_argument('--c1', type=int, default=1)
    b.add_argument('--c2', type=int, default=1)
    b.add_argument('--no-dup', action='store_true', help='interleaved: no duplicates')
    b.add_argument('--mode', choices=['all', 'low', 'high'], default='all')
    b.add_argument('--size', type=int, help='random baseline: number of edges')
    b.add_argument('--tie', choices=['id', 'seeded-shuffle'], default='id')
    b.add_argument('--seed', type=int, default=0)
    b.add_argument('--out', required=True)
    b.set_defaults(func=_bound)

    i = sub.add_parser('ilp', help='exact formulations')
    isub = i.add_subparsers(dest='ilp_cmd', required=True)
    for name in ('export-cb', 'export-minsep', 'solve-cb'):
        s = isub.add_parser(name)
        s.add_argument('--graph', required=True)
        s.add_argument('--out', required=True)
        if name == 'export-minsep':
            s.add_argument('--T', type=int, required=True)
            s.add_argument('--B', type=int, required=True)
            s.add_argument('--b', type=int, required=True)
        else:
            s.add_argument('--k', type=int, required=True)
            s.add_argument('--dup', action='store_true')
        if name == 'solve-cb':
            s.add_argument('--max-nodes', type=int, default=2_000_000)
            s.add_argument('--max-seconds', type=float, default=60.0)
        s.set_defaults(func=_ilp)

    ac = sub.add_parser('account', help='noise calibration')
    asub = ac.add_subparsers(dest='acct_cmd', required=True)
    c = asub.add_parser('calibrate')
    c.add_argument('--mechanism', '--mech', choices=['dpsgd', 'dpmf'], default='dpsgd')
    c.add_argument('--epsilon', '--eps', type=float, required=True)
    c.add_argument('--delta', type=float, required=True)
    c.add_argument('--k', type=int, default=1)
    c.add_argument('--p', type=float, default=1.0)
    c.add_argument('--steps', type=int, default=1)
    c.add_argument('--b', type=int, help='DP-MF band (informational: k already reflects the min-sep)')
    c.add_argument('--table', help='external noise table CSV')
    c.set_defaults(func=_account)

    e = sub.add_parser('experiment', help='config-driven experiments')
    esub = e.add_subparsers(dest='exp_cmd', required=True)
    for name in ('run', 'sweep-bias', 'retention'):
        s = esub.add_parser(name)
        s.add_argument('--config', required=True)
        s.add_argument('--out', required=True)
        s.set_defaults(func=_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args) or 0
    except (ValueError, OSError) as e:
        print(f'error: {e}', file=sys.stderr)
        return 2


if __name__ == '__main__':
    sys.exit(main())
