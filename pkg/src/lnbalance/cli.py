"""Command line entry point: ``lnbalance <subcommand> [options]``.

Exit codes: 0 success, 1 usage error, 2 data or validation error,
3 internal invariant breach.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import datagen, evaluation, features, forest, graph as graphmod, models, routing, spectral
from .errors import DataError, InvariantError

log = logging.getLogger("lnbalance")

EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 1, 2, 3
SUBCOMMANDS = ("synth", "featurize", "train", "evaluate", "correlate", "importance", "predict",
               "route", "simulate")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; we reserve 2 for data errors
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


class _Append(argparse.Action):
    """Like ``append`` but the first use on the command line replaces the default list."""

    def __call__(self, parser, namespace, values, option_string=None):
        marker = f"_{self.dest}_given"
        items = list(getattr(namespace, self.dest) or []) if getattr(namespace, marker, False) else []
        setattr(namespace, marker, True)
        setattr(namespace, self.dest, items + [values])


def derive_seed(seed: int, component: str) -> int:
    """Independent 63-bit seed for ``component`` from the global seed."""
    digest = hashlib.sha256(f"{seed}|{component}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def load_config(path) -> dict:
    text = Path(path).read_text(encoding="utf8")
    if str(path).endswith((".yaml", ".yml")):
        import yaml
        data = yaml.safe_load(text) or {}
    else:
        data = json.loads(text)
    if not isinstance(data, dict):
        raise DataError(f"{path}: config must be a mapping")
    return {k.replace("-", "_"): v for k, v in data.items()}


# --- shared option groups ---------------------------------------------------

def _common(p):
    p.add_argument("--seed", type=int, default=0, help="global seed fanned out to every component")
    p.add_argument("--config", help="JSON or YAML file of option defaults; flags override it")
    p.add_argument("-v", "--verbose", action="store_true")


def _data_opts(p, labels=True):
    p.add_argument("--snapshot", required=True, help="describegraph-style JSON snapshot")
    if labels:
        p.add_argument("--labels", help="CSV channel_id,src_pub,y_sat")
        p.add_argument("--series", help="CSV channel_id,src_pub,timestamp,balance_sat (KDE-sampled)")
    p.add_argument("--include-disabled", action="store_true",
                   help="treat disabled policies as usable")


def _model_opts(p):
    p.add_argument("--k-pe", type=int, default=16, help="positional encoding dimension")
    p.add_argument("--encodings", help="encodings cache CSV to reuse")
    p.add_argument("--trees", type=int, default=200)
    p.add_argument("--max-depth", type=int)
    p.add_argument("--min-leaf", type=int, default=2)
    p.add_argument("--features-per-split", default="third",
                   help="'third', 'sqrt', 'all' or an integer")
    p.add_argument("--jobs", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lnbalance", description="Channel balance prediction toolkit.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="command")
    sub.required = True

    p = sub.add_parser("synth", help="generate a synthetic labeled network")
    _common(p)
    p.add_argument("--nodes", type=int, default=200)
    p.add_argument("--m", type=int, default=2, help="channels opened per new node")
    p.add_argument("--signal", type=float, default=0.5, help="signal strength in [0, 1]")
    p.add_argument("--depleted", type=float, default=0.3, help="fraction of depleted channels")
    p.add_argument("--label-fraction", type=float, default=1.0)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("featurize", help="write the design matrix of one variant")
    _common(p)
    _data_opts(p)
    p.add_argument("--variant", choices=features.VARIANTS, default="joint")
    p.add_argument("--k-pe", type=int, default=16)
    p.add_argument("--encodings")
    p.add_argument("--out", required=True, help="output CSV")

    p = sub.add_parser("train", help="fit one forest variant and save the estimator bundle")
    _common(p)
    _data_opts(p)
    _model_opts(p)
    p.add_argument("--variant", choices=features.VARIANTS, default="joint")
    p.add_argument("--out", required=True, help="bundle directory")

    p = sub.add_parser("evaluate", help="train all variants and score the full roster")
    _common(p)
    _data_opts(p)
    _model_opts(p)
    p.add_argument("--variant", action=_Append, choices=models.ROSTER,
                   help="restrict to these estimators (repeatable)")
    p.add_argument("--test-fraction", type=float, default=0.1)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--grid", help="JSON list of forest overrides scored on the validation fold")
    p.add_argument("--out", required=True, help="report directory")

    p = sub.add_parser("correlate", help="screen features by correlation with the target")
    _common(p)
    _data_opts(p)
    p.add_argument("--variant", choices=features.VARIANTS, default="joint")
    p.add_argument("--k-pe", type=int, default=16)
    p.add_argument("--encodings")
    p.add_argument("--threshold", type=float, default=0.1)
    p.add_argument("--out", help="CSV of all correlations")

    p = sub.add_parser("importance", help="print a trained model's MDI importances")
    _common(p)
    p.add_argument("--model", required=True, help="estimator bundle directory")
    p.add_argument("--out", help="CSV output")

    p = sub.add_parser("predict", help="predict p for every edge")
    _common(p)
    _data_opts(p, labels=False)
    p.add_argument("--model", required=True, help="bundle directory or heuristic name")
    p.add_argument("--out", help="CSV output; stdout if omitted")

    p = sub.add_parser("route", help="most reliable path under a model's predictions")
    _common(p)
    _data_opts(p, labels=False)
    p.add_argument("--model", required=True, help="bundle directory or heuristic name")
    p.add_argument("--src", required=True)
    p.add_argument("--dest", required=True)
    p.add_argument("--amount-sat", type=int, required=True)

    p = sub.add_parser("simulate", help="replay payments against true balances")
    _common(p)
    _data_opts(p)
    _model_opts(p)
    p.add_argument("--truth", required=True, help="ground-truth CSV with every direction")
    p.add_argument("--payments", type=int, default=500)
    p.add_argument("--models", default="equal-split,capacity,joint",
                   help="comma list of heuristic names, forest variants or bundle directories")
    p.add_argument("--amount-min", type=int, default=10_000)
    p.add_argument("--amount-max", type=int, default=1_000_000)
    p.add_argument("--max-retries", type=int, default=routing.MAX_RETRIES)
    p.add_argument("--shift-balances", action="store_true")
    p.add_argument("--out", help="SimReport CSV; stdout if omitted")
    return parser


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if a in SUBCOMMANDS), None)
    if known.config and command:
        cfg = load_config(known.config)
        subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
        sp = subparsers.choices[command]
        dests = {a.dest: a for a in sp._actions}
        unknown = sorted(set(cfg) - set(dests))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        for key in cfg:
            dests[key].required = False
        sp.set_defaults(**cfg)
    return parser.parse_args(argv)


# --- helpers ----------------------------------------------------------------

def _forest_config(args, name: str) -> forest.ForestConfig:
    fps = args.features_per_split
    if isinstance(fps, str) and fps.isdigit():
        fps = int(fps)
    return forest.ForestConfig(n_trees=args.trees, max_depth=args.max_depth,
                               min_samples_leaf=args.min_leaf, features_per_split=fps,
                               rng_seed=derive_seed(args.seed, name) % (2 ** 32),
                               n_jobs=args.jobs)


def _load_graph(args, need_labels=True) -> graphmod.ChannelGraph:
    g = graphmod.load_snapshot(args.snapshot)
    labels = getattr(args, "labels", None)
    series = getattr(args, "series", None)
    if labels and series:
        raise UsageError("give either --labels or --series, not both")
    if labels:
        g = graphmod.load_labels(g, labels)
    elif series:
        g = datagen.labels_from_series(g, datagen.load_series(g, series),
                                       derive_seed(args.seed, "kde"))
    elif need_labels:
        raise UsageError("--labels or --series is required")
    log.info("graph: %d nodes, %d channels, %d labeled", len(g.nodes), len(g.channels),
             len(g.labeled_channel_ids()))
    return g


def _encodings(args, g, k):
    if getattr(args, "encodings", None) and Path(args.encodings).exists():
        table = spectral.load_encodings(args.encodings)
        if table.k != k:
            raise DataError(f"encodings cache has k={table.k}, requested k={k}")
        return table
    table = spectral.laplacian_encodings(g, k, rng_seed=derive_seed(args.seed, "encodings"))
    if getattr(args, "encodings", None):
        spectral.save_encodings(table, args.encodings)
    return table


def _estimator(spec: str, args, g) -> models.Estimator:
    if spec in models.HEURISTICS + models.CONTROLS:
        return models.heuristic(spec)
    if Path(spec).is_dir():
        return models.load_estimator(spec)
    if spec in features.VARIANTS:
        enc = _encodings(args, g, args.k_pe) if spec in features.PE_VARIANTS else None
        return models.train_variant(spec, g, None, _forest_config(args, f"forest:{spec}"),
                                    args.k_pe, derive_seed(args.seed, "features"), enc,
                                    args.include_disabled)
    raise UsageError(f"unknown model {spec!r}: not a heuristic, variant or bundle directory")


def _open_out(path):
    if path:
        return open(path, "w", newline="", encoding="utf8")
    return contextlib.nullcontext(sys.stdout)


# --- subcommands ------------------------------------------------------------

def cmd_synth(args):
    cfg = datagen.SynthConfig(n_nodes=args.nodes, m=args.m, signal_strength=args.signal,
                              depleted_fraction=args.depleted,
                              rng_seed=derive_seed(args.seed, "synth"))
    g = datagen.generate_synthetic(cfg)
    paths = datagen.write_synthetic(g, args.out, args.label_fraction, derive_seed(args.seed, "observe"))
    for name, p in paths.items():
        print(f"{name}\t{p}")


def cmd_featurize(args):
    g = _load_graph(args)
    enc = _encodings(args, g, args.k_pe) if args.variant in features.PE_VARIANTS else None
    schema = features.make_schema(g, args.variant, k_pe=args.k_pe)
    rows = features.build_rows(g, schema, enc, derive_seed(args.seed, "features"),
                               include_disabled=args.include_disabled)
    features.save_matrix_csv(rows, args.out)
    print(f"{len(rows)} rows x {len(schema)} features -> {args.out}")


def cmd_train(args):
    g = _load_graph(args)
    est = _estimator(args.variant, args, g)
    models.save_estimator(est, args.out)
    print(f"{args.variant} -> {args.out}")


def cmd_evaluate(args):
    g = _load_graph(args)
    kinds = tuple(args.variant) if args.variant else models.ROSTER
    grid = ()
    if args.grid:
        text = Path(args.grid).read_text() if Path(args.grid).exists() else args.grid
        grid = tuple(json.loads(text))
    cfg = evaluation.BenchmarkConfig(
        forest=_forest_config(args, "forest"), k_pe=args.k_pe,
        rng_seed=derive_seed(args.seed, "features"), include_disabled=args.include_disabled,
        kinds=kinds, grid=grid)
    spec = evaluation.SplitSpec(args.test_fraction, args.val_fraction, derive_seed(args.seed, "split"))
    enc = None
    if any(k in features.PE_VARIANTS for k in kinds):
        enc = _encodings(args, g, args.k_pe)
    result = evaluation.run_benchmark(g, spec, cfg, enc)
    evaluation.write_reports(result, args.out)
    sys.stdout.write(evaluation.format_table(result))


def cmd_correlate(args):
    g = _load_graph(args)
    enc = _encodings(args, g, args.k_pe) if args.variant in features.PE_VARIANTS else None
    schema = features.make_schema(g, args.variant, k_pe=args.k_pe)
    rows = features.build_rows(g, schema, enc, derive_seed(args.seed, "features"),
                               include_disabled=args.include_disabled)
    if args.out:
        with open(args.out, "w", newline="", encoding="utf8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["feature", "r", "defined"])
            for s in evaluation.feature_correlations(rows):
                w.writerow([s.name, repr(s.r), int(s.defined)])
    for s in evaluation.correlation_screen(rows, args.threshold):
        print(f"{s.name}\t{s.r:+.4f}")


def cmd_importance(args):
    est = models.load_estimator(args.model)
    if est.model is None:
        raise UsageError(f"{args.model} holds a heuristic without importances")
    ranked = sorted(est.model.mdi_by_name().items(), key=lambda kv: (-kv[1], kv[0]))
    with _open_out(args.out) as f:
        w = csv.writer(f, lineterminator="\n", delimiter="," if args.out else "\t")
        w.writerow(["feature", "importance"])
        for name, v in ranked:
            w.writerow([name, f"{v:.6f}"])


def cmd_predict(args):
    g = _load_graph(args, need_labels=False)
    est = _estimator(args.model, args, g)
    edges = list(g.edges())
    pred = models.predict_edges(est, g, edges)
    with _open_out(args.out) as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["channel_id", "src_pub", "dst_pub", "p_hat"])
        for e, v in zip(edges, pred):
            w.writerow([e.channel_id, e.src, e.dst, "" if v != v else repr(float(v))])


def cmd_route(args):
    g = _load_graph(args, need_labels=False)
    est = _estimator(args.model, args, g)
    q = routing.RouteQuery(graphmod.normalize_node_id(args.src),
                           graphmod.normalize_node_id(args.dest), args.amount_sat)
    res = routing.route(g, est, q)
    if not res.found:
        print("no route")
        return 0
    for e, p in zip(res.path, res.per_hop_p):
        print(f"{e.src} -> {e.dst}\t{e.channel_id}\tp_hat={p:.4f}")
    print(f"total_cost\t{res.total_cost:.6f}")


def cmd_simulate(args):
    g = _load_graph(args, need_labels=False)
    truth = datagen.load_truth(g, args.truth)
    train_graph = g
    if args.labels or args.series:
        train_graph = _load_graph(args)
    names = [m.strip() for m in args.models.split(",") if m.strip()]
    ests = {}
    for name in names:
        if name == "oracle":
            ests[name] = models.heuristic("oracle")
            continue
        if name in features.VARIANTS and not (args.labels or args.series):
            raise UsageError(f"training {name} needs --labels or --series")
        ests[name] = _estimator(name, args, train_graph)
    work = routing.Workload(args.payments, args.amount_min, args.amount_max,
                            derive_seed(args.seed, "workload"))
    # estimators predict on the truth graph, which shares topology and policies
    report = routing.simulate(truth, ests, work, args.max_retries, args.shift_balances)
    if args.out:
        routing.write_sim_report(report, args.out)
    w = csv.writer(sys.stdout, lineterminator="\n", delimiter="\t")
    w.writerow(routing.SIM_COLUMNS)
    for name, o in report.outcomes.items():
        w.writerow([name, report.n_payments, len(o.successes), f"{o.success_rate:.3f}",
                    f"{o.median_retries:.1f}", f"{o.mean_retries:.3f}", o.max_attempts])


COMMANDS = {name: globals()[f"cmd_{name}"] for name in SUBCOMMANDS}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"lnbalance: {exc}", file=sys.stderr)
        return EXIT_DATA
    logging.basicConfig(stream=sys.stderr, level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        rc = COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"lnbalance {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"lnbalance {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except InvariantError as exc:
        log.exception("invariant breach")
        print(f"lnbalance {args.command}: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
