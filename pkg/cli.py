"""
Command-line entry points.

    sord sweep        success rate vs. mean CPU load, per protocol variant
    sord run          one simulation run, metrics as JSON
    sord topo-stats   clustering, mean path length and diameter of an overlay
    i3 pipeline       train, immunise, error rate vs. threshold
    i3 classify       classify one trace against an immunisation document
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from pydantic import ValidationError

import config
import immune
import simkernel
import topology

logger = logging.getLogger(__name__)

# --- Constants for Configuration ---
EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_SINGLE_CLASS = 3
SEED_ENV = "SORD_SEED"


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    """argparse that reports usage errors with exit status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def write_outputs(output_dir, files: dict[str, str]):
    """
    Write computed results. Every file is staged next to its target first,
    so an I/O failure leaves none of them behind.
    """
    targets = [(Path(output_dir) / name, text) for name, text in files.items()]
    staged = []
    try:
        for path, text in targets:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_name(path.name + ".tmp")
            tmp.write_text(text, encoding="utf-8")
            staged.append((tmp, path))
    except OSError:
        for tmp, _ in staged:
            tmp.unlink(missing_ok=True)
        raise
    for tmp, path in staged:
        os.replace(tmp, path)
        print(f"Created: {path}")


def resolve_seed(args) -> int | None:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return None
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}")


def load_experiment(args, kind: str):
    cfg = config.read_config(args.config, args.set, resolve_seed(args))
    if cfg.kind != kind:
        raise simkernel.ConfigError(f"config kind is {cfg.kind!r}, this command needs {kind!r}")
    logger.debug("loaded %s config from %s", cfg.kind, args.config)
    return cfg


# --- sord ---

def cmd_sord_sweep(args) -> int:
    cfg = load_experiment(args, "sord_sweep")
    rows = simkernel.sweep_load(cfg.sim.build(), cfg.sweep.load_points, cfg.sweep.variants,
                                cfg.sweep.seeds, cfg.sweep.workers)
    write_outputs(args.output, {
        "figure2.csv": simkernel.sweep_csv_text(rows),
        "effective_config.json": config.effective_config_text(cfg),
    })
    return EXIT_OK


def cmd_sord_run(args) -> int:
    cfg = load_experiment(args, "sord_run")
    if args.trace:
        cfg.sim.trace = True
    sim = simkernel.Simulation(cfg.sim.build())
    metrics = sim.run()
    files = {
        "metrics.json": json.dumps(metrics.to_dict(), indent=2, sort_keys=True) + "\n",
        "effective_config.json": config.effective_config_text(cfg),
    }
    if cfg.sim.trace:
        files["trace.jsonl"] = sim.trace_lines()
    write_outputs(args.output, files)
    print(f"success rate {metrics.success_rate:.4f} over {metrics.requests} requests, "
          f"mean load {metrics.mean_load:.4f}")
    return EXIT_OK


def cmd_topology_stats(args) -> int:
    seed = resolve_seed(args)
    g = topology.build_small_world(args.n, args.k_near, args.n_far, seed if seed is not None else 0)
    stats = topology.graph_stats(g)
    if args.edges:
        topology.write_edge_list(g, args.edges)
    print(f"{stats.clustering:.6f},{stats.avg_path:.6f},{stats.diameter}")
    return EXIT_OK


# --- i3 ---

def _load_traces(spec, manifest) -> list[immune.ProcessTrace]:
    if manifest is not None:
        return immune.read_manifest(manifest)
    return immune.generate_synthetic_traces(spec.build())


def cmd_i3_pipeline(args) -> int:
    cfg = load_experiment(args, "i3_pipeline")
    train_set = _load_traces(cfg.train, cfg.train_manifest)
    test_set = _load_traces(cfg.test, cfg.test_manifest)
    normals = [t for t in train_set if t.label in (None, immune.Label.NORMAL)]

    tuned = immune.tuned_prior(test_set)
    model = immune.train(normals, cfg.threshold_quantile)
    xml = immune.export_immunisation(model, tuned)

    # the evaluating node only ever sees the XML document
    immunised, _ = immune.import_immunisation(xml)
    priors = [tuned if p == "tuned" else float(p) for p in cfg.priors]
    priors = list(dict.fromkeys(priors))
    grid = immune.threshold_grid(immunised, test_set, priors, cfg.grid_points)
    curves = {p: immune.evaluate(immunised, test_set, grid, p) for p in priors}
    for p, rows in curves.items():
        best = min(rows, key=lambda r: r.error_rate)
        print(f"prior {p:.4f}: best error {best.error_rate:.2f}% at threshold {best.threshold:.4f}")

    table = immune.error_table(curves)
    files = {
        "immunisation.xml": xml,
        "figure4.csv": table.to_csv(index=False, float_format="%.6f", lineterminator="\n"),
        "effective_config.json": config.effective_config_text(cfg),
    }
    if args.dump_traces:
        files.update(immune.trace_files(train_set, "traces/train"))
        files.update(immune.trace_files(test_set, "traces/test"))
    write_outputs(args.output, files)
    return EXIT_OK


def cmd_i3_classify(args) -> int:
    model, prior = immune.import_immunisation(Path(args.model).read_text(encoding="utf-8"))
    if args.prior is not None:
        prior = args.prior
    result = immune.classify_trace(model, immune.read_trace_csv(args.trace), prior)
    print(f"{result.verdict.value},{result.distance:.6f}")
    return EXIT_OK


# --- parsers ---

def _common(parser):
    parser.add_argument("-v", "--verbose", action="store_true", help="Log debug detail to standard error.")
    parser.add_argument("--seed", type=int, default=None,
                        help=f"Seed override; falls back to ${SEED_ENV} when absent.")


def _experiment(parser):
    _common(parser)
    parser.add_argument("--config", required=True, help="Experiment config file (JSON).")
    parser.add_argument("--output", "-o", required=True, help="Directory for result files.")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="Override a config value, e.g. --set sim.n=400 (repeatable).")


def sord_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="sord", description="Self-organising resource discovery simulator.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    sweep = sub.add_parser("sweep", help="Success rate vs. load for each protocol variant.")
    _experiment(sweep)
    sweep.set_defaults(func=cmd_sord_sweep)

    run = sub.add_parser("run", help="Run one simulation and write metrics.json.")
    _experiment(run)
    run.add_argument("--trace", action="store_true", help="Also write a JSON-lines event trace.")
    run.set_defaults(func=cmd_sord_run)

    topo = sub.add_parser("topo-stats", help="Print clustering,avg_path,diameter of an overlay.")
    _common(topo)
    topo.add_argument("--n", type=int, required=True, help="Number of nodes.")
    topo.add_argument("--k-near", type=int, required=True, help="Even count of nearest ring neighbours.")
    topo.add_argument("--n-far", type=int, default=topology.DEFAULT_N_FAR, help="Random far links per node.")
    topo.add_argument("--edges", help="Also write the edge list to this file.")
    topo.set_defaults(func=cmd_topology_stats)
    return parser


def i3_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="i3", description="Immune-inspired intrusion detection agent.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    pipeline = sub.add_parser("pipeline", help="Train, immunise and write error-rate curves.")
    _experiment(pipeline)
    pipeline.add_argument("--dump-traces", action="store_true",
                          help="Write the traces used as CSV files with manifests.")
    pipeline.set_defaults(func=cmd_i3_pipeline)

    classify = sub.add_parser("classify", help="Classify one trace CSV against an immunisation XML.")
    _common(classify)
    classify.add_argument("--model", required=True, help="Immunisation XML document.")
    classify.add_argument("--trace", required=True, help="Trace CSV with columns t,cpu,mem,net.")
    classify.add_argument("--prior", type=float, default=None,
                          help="Prior probability of normal; defaults to the document's prior.")
    classify.set_defaults(func=cmd_i3_classify)
    return parser


def dispatch(parser: ArgumentParser, argv=None) -> int:
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_VALIDATION
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except immune.SingleClassError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_SINGLE_CLASS
    except (ValidationError, ValueError, UsageError, simkernel.ConfigError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_IO


def sord_main(argv=None) -> int:
    return dispatch(sord_parser(), argv)


def i3_main(argv=None) -> int:
    return dispatch(i3_parser(), argv)


if __name__ == "__main__":
    sys.exit(sord_main())
