"""Command-line front end: ``ispsim gen-graph | run | sweep | validate``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys

from .config import ConfigError, load_spec, render_config, resolved_items, with_seed
from .graph import CsrFormatError, degree_distribution, load_csr, save_csr
from .hostio import AccessPath
from .pipeline import RunMetrics, SWEEP_PARAMETERS, sweep, sweep_csv, run_pipeline

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one configuration key (repeatable)")
    p.add_argument("--seed", type=lambda s: int(s, 0), help="sampling seed (u64)")
    p.add_argument("--out", help="output path (default: stdout)")
    p.add_argument("--print-config", action="store_true",
                   help="print the fully resolved configuration and exit")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ispsim", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-graph", help="generate a Kronecker-expanded CSR graph file")
    _common(g)

    r = sub.add_parser("run", help="run one pipeline experiment")
    _common(r)
    r.add_argument("--format", choices=("json", "csv"), default="json")

    s = sub.add_parser("sweep", help="run one experiment per parameter value")
    _common(s)
    s.add_argument("--param", required=True, choices=SWEEP_PARAMETERS)
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--baseline", default="mmap",
                   help="access path the speedup column is measured against ('none' to skip)")
    s.add_argument("--format", choices=("json", "csv"), default="csv")

    v = sub.add_parser("validate", help="check a CSR file and/or lint a configuration")
    v.add_argument("--config")
    v.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    v.add_argument("--graph", help="CSR file to check")
    return ap


def _spec(args):
    spec = load_spec(args.config, args.set)
    if getattr(args, "seed", None) is not None:
        spec = with_seed(spec, args.seed)
    return spec


def _emit(text: str, out: str | None) -> None:
    if out:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_gen_graph(args) -> int:
    spec = _spec(args)
    if args.print_config:
        _emit(render_config(spec), None)
        return EXIT_OK
    if not args.out:
        raise ConfigError("gen-graph needs --out")
    if spec.graph.path is not None:
        raise ConfigError("gen-graph takes a generation recipe, not graph.path")
    graph = spec.graph.recipe.build()
    save_csr(graph, args.out)
    avg = degree_distribution(graph).avg_degree
    print(f"nodes={graph.num_nodes} edges={graph.num_edges} avg_degree={float(avg):.4f} "
          f"id_width={graph.id_width} -> {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    spec = _spec(args)
    if args.print_config:
        _emit(render_config(spec), None)
        return EXIT_OK
    graph = spec.graph.load()
    metrics = run_pipeline(graph, spec.sampling.build(), spec.ssd, spec.host, spec.pipeline)
    config = dict(resolved_items(spec))
    if args.format == "json":
        text = json.dumps({"config": config, "metrics": metrics.to_dict()}, sort_keys=True,
                          indent=2) + "\n"
    else:
        buf = io.StringIO()
        for k, val in config.items():
            buf.write(f"# {k} = {val}\n")
        w = csv.DictWriter(buf, fieldnames=RunMetrics.CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerow(metrics.csv_row())
        text = buf.getvalue()
    _emit(text, args.out)
    return EXIT_OK


def _sweep_values(param: str, text: str) -> list:
    vals = [v.strip() for v in text.split(",") if v.strip()]
    if not vals:
        raise ConfigError("--values is empty")
    if param == "path":
        return vals
    out = []
    for v in vals:
        try:
            out.append(float(v) if param == "fanout_scale" else int(v))
        except ValueError:
            out.append(v)  # recorded as a failed row
    return out


def cmd_sweep(args) -> int:
    spec = _spec(args)
    if args.print_config:
        _emit(render_config(spec), None)
        return EXIT_OK
    values = _sweep_values(args.param, args.values)
    baseline = None if args.baseline.lower() == "none" else AccessPath.parse(args.baseline)
    graph = spec.graph.load()
    rows = sweep(args.param, values, graph, spec.sampling.build(), spec.ssd, spec.host,
                 spec.pipeline, baseline_path=baseline)
    if args.format == "csv":
        text = sweep_csv(args.param, rows)
    else:
        text = json.dumps([{"value": r.value, "error": r.error, "speedup": r.speedup,
                            "metrics": r.metrics.to_dict() if r.metrics else None}
                           for r in rows], sort_keys=True, indent=2) + "\n"
    _emit(text, args.out)
    return EXIT_OK


def cmd_validate(args) -> int:
    if args.config or args.set:
        spec = load_spec(args.config, args.set)
        print(f"config ok ({len(resolved_items(spec))} keys resolved)")
    if args.graph:
        g = load_csr(args.graph)
        print(f"graph ok: nodes={g.num_nodes} edges={g.num_edges} id_width={g.id_width}")
    if not (args.config or args.set or args.graph):
        raise ConfigError("validate needs --graph and/or --config")
    return EXIT_OK


COMMANDS = {"gen-graph": cmd_gen_graph, "run": cmd_run, "sweep": cmd_sweep,
            "validate": cmd_validate}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CsrFormatError, OSError, RuntimeError, ValueError, OverflowError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
