"""Command-line entry point: daemons, benchmark/load drivers, analytics and scenarios.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import re
import statistics
import sys
from fractions import Fraction
from typing import Optional, Sequence

from . import config as cfg
from .errors import ClambsError

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2

log = logging.getLogger("clambs")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


_SIZE_RE = re.compile(r"^\s*(\d+)\s*([kmg]i?b?|b)?\s*$", re.IGNORECASE)
_UNITS = {"": 1, "b": 1, "k": 1024, "m": 1024 ** 2, "g": 1024 ** 3}


def parse_size(text: str) -> int:
    """``65536``, ``64KB``, ``1MB``, ``2GiB`` -> bytes (binary multiples)."""
    m = _SIZE_RE.match(text)
    if not m:
        raise argparse.ArgumentTypeError(f"bad size {text!r}")
    unit = (m.group(2) or "").lower()[:1]
    return int(m.group(1)) * _UNITS[unit]


def parse_sweep(text: str) -> tuple[str, range]:
    """``n=2..16`` or ``N=2..100`` -> (variable, inclusive range)."""
    m = re.fullmatch(r"\s*([nN])\s*=\s*(\d+)\s*\.\.\s*(\d+)\s*", text)
    if not m:
        raise argparse.ArgumentTypeError(f"sweep must look like n=2..16, got {text!r}")
    lo, hi = int(m.group(2)), int(m.group(3))
    if lo > hi:
        raise argparse.ArgumentTypeError(f"empty sweep range {lo}..{hi}")
    return m.group(1), range(lo, hi + 1)


def _hostport(text: str) -> tuple[str, int]:
    try:
        return cfg.parse_hostport(text)
    except cfg.ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _targets(text: str) -> list[tuple[str, int]]:
    return [_hostport(t) for t in cfg.get_list({"t": text}, "t")]


def fmt_num(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, Fraction):
        v = float(v)
    if isinstance(v, float):
        if v.is_integer() and abs(v) < 1e15:
            return str(int(v))
        return f"{v:.6f}".rstrip("0").rstrip(".")
    return str(v)


def write_table(rows: Sequence[Sequence], header: Optional[Sequence[str]], as_csv: bool,
                out=None):
    out = out or sys.stdout
    if as_csv:
        w = csv.writer(out, lineterminator="\n")
        if header:
            w.writerow(header)
        for r in rows:
            w.writerow([fmt_num(c) for c in r])
        return
    cells = [[fmt_num(c) for c in r] for r in rows]
    if header:
        cells.insert(0, list(header))
    if not cells:
        return
    widths = [max(len(r[i]) for r in cells if i < len(r)) for i in range(len(cells[0]))]
    for r in cells:
        out.write("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() + "\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="clambs", description="Cross-layer multi-cloud monitoring and "
                                           "benchmarking toolkit.")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="cmd", metavar="COMMAND", parser_class=_Parser)

    a = sub.add_parser("agent", help="run a monitoring agent")
    a.add_argument("--config")
    a.add_argument("--listen-port", type=int)
    a.add_argument("--listen-host")
    a.add_argument("--mode", choices=["pull", "push"])
    a.add_argument("--manager-addr")
    a.add_argument("--push-interval-ms", type=int)
    a.add_argument("--push-threshold", type=float)
    a.add_argument("--processes", help="comma-separated user application processes")
    a.add_argument("--system-processes", help="comma-separated system processes")
    a.add_argument("--backend", help="osprobe | synthetic[:seed] | replay:<csv>")
    a.add_argument("--discovery-port", type=int)

    b = sub.add_parser("bench-agent", help="run a benchmarking agent")
    b.add_argument("--config")
    b.add_argument("--listen-port", type=int)
    b.add_argument("--listen-host")
    b.add_argument("--max-transfer-bytes", type=parse_size)
    b.add_argument("--discovery-port", type=int)

    m = sub.add_parser("manager", help="run the manager")
    m.add_argument("--config")
    m.add_argument("--listen-port", type=int)
    m.add_argument("--listen-host")
    m.add_argument("--store-path")
    m.add_argument("--poll-interval-ms", type=int)
    m.add_argument("--discovery-port", type=int)
    m.add_argument("--discovery-broadcast-addr")
    m.add_argument("--discovery-window-ms", type=int)
    m.add_argument("--scan-targets", help="e.g. 127.0.0.2:8000-8024,127.0.0.3:8000")
    m.add_argument("--bench-interval-ms", type=int)
    m.add_argument("--bench-size", type=parse_size, help="0 disables periodic benchmarks")

    be = sub.add_parser("bench", help="benchmark transfers against benchmarking agents")
    be.add_argument("--targets", type=_targets, required=True, help="host:port[,host:port...]")
    be.add_argument("--size", type=parse_size, default="1MB")
    be.add_argument("--repeats", type=int, default=3)
    be.add_argument("--direction", choices=["download", "upload"], default="download")
    be.add_argument("--timeout", type=float, default=600.0)
    be.add_argument("--csv", action="store_true")

    lo = sub.add_parser("load", help="run an HTTP load test")
    lo.add_argument("--target", type=_hostport, required=True, help="host:port of the web app")
    lo.add_argument("--path", default="/")
    lo.add_argument("--method", choices=["GET", "POST"], default="GET")
    lo.add_argument("--threads", type=int, default=1)
    lo.add_argument("--loops", type=int, default=1)
    lo.add_argument("--think-ms", type=int, default=0)
    lo.add_argument("--via", type=_hostport, help="run through a benchmarking agent at host:port")
    lo.add_argument("--csv", action="store_true")

    an = sub.add_parser("analyze", help="evaluate the overhead model")
    an.add_argument("--model", choices=["flat", "tree", "both"], default="both")
    an.add_argument("--N", type=int, dest="N", help="nodes including the super manager")
    an.add_argument("--n", type=int, dest="n", help="maximum children per manager")
    an.add_argument("--C", type=float, dest="C", help="CPU cost per message")
    an.add_argument("--t", type=float, dest="t", help="time per hop")
    an.add_argument("--file", help="JSON file with a tree model and/or topology")
    an.add_argument("--sweep", type=parse_sweep, help="n=LO..HI or N=LO..HI; emits CSV")
    an.add_argument("--csv", action="store_true")

    sc = sub.add_parser("scenario", help="run a desk-scale multi-host scenario")
    sc.add_argument("name", choices=["I", "II", "III", "IV"])
    sc.add_argument("--duration", type=float, default=30.0, help="seconds of polling")
    sc.add_argument("--poll-interval-ms", type=int, default=1000)
    sc.add_argument("--base-port", type=int, default=8000)
    sc.add_argument("--csv", action="store_true")
    return p


# subcommands


def _cmd_agent(args) -> int:
    from .agent import load_agent_config, serve

    conf = load_agent_config(
        args.config, listen_port=args.listen_port, listen_host=args.listen_host,
        mode=args.mode, manager_addr=args.manager_addr,
        push_interval_ms=args.push_interval_ms, push_threshold=args.push_threshold,
        processes=args.processes, system_processes=args.system_processes,
        backend=args.backend, discovery_port=args.discovery_port)
    serve(conf)
    return EXIT_OK


def _cmd_bench_agent(args) -> int:
    from .bench import load_bench_config, serve

    conf = load_bench_config(
        args.config, listen_port=args.listen_port, listen_host=args.listen_host,
        max_transfer_bytes=args.max_transfer_bytes, discovery_port=args.discovery_port)
    serve(conf)
    return EXIT_OK


def _cmd_manager(args) -> int:
    from .manager import load_manager_config, serve

    conf = load_manager_config(
        args.config, listen_port=args.listen_port, listen_host=args.listen_host,
        store_path=args.store_path, poll_interval_ms=args.poll_interval_ms,
        discovery_port=args.discovery_port,
        discovery_broadcast_addr=args.discovery_broadcast_addr,
        discovery_window_ms=args.discovery_window_ms, scan_targets=args.scan_targets,
        bench_interval_ms=args.bench_interval_ms, bench_size_bytes=args.bench_size)
    serve(conf)
    return EXIT_OK


def _cmd_bench(args) -> int:
    from .bench import request_transfer
    from .manager import select_best_site
    from .workload import Direction, TransferSpec

    if args.repeats < 1:
        raise UsageError("--repeats must be at least 1")
    spec = TransferSpec(Direction(args.direction.capitalize()), args.size)
    by_agent, failed = {}, {}
    for host, port in args.targets:
        agent_id = f"{host}:{port}"
        got = []
        try:
            for _ in range(args.repeats):
                got.append(request_transfer(host, port, spec, timeout=args.timeout))
        except (OSError, ClambsError) as exc:
            failed[agent_id] = f"{type(exc).__name__}: {exc}"
            log.warning("%s failed: %s", agent_id, failed[agent_id])
        by_agent[agent_id] = got
    rows = []
    for agent_id, got in by_agent.items():
        if got:
            rows.append([agent_id, len(got),
                         statistics.fmean(r.bandwidth_bytes_per_s for r in got),
                         statistics.fmean(r.elapsed_ms for r in got), ""])
        else:
            rows.append([agent_id, 0, None, None, failed.get(agent_id, "")])
    ok = {a: r for a, r in by_agent.items() if r}
    best = select_best_site(ok) if ok else None
    for r in rows:
        if r[0] == best:
            r[4] = "best"
    write_table(rows, ["agent", "runs", "bandwidth_bytes_per_s", "elapsed_ms", "note"],
                args.csv)
    return EXIT_OK if best is not None else EXIT_FAILURE


def _cmd_load(args) -> int:
    from .bench import remote_load
    from .loadgen import run_load
    from .workload import WorkloadSpec

    try:
        spec = WorkloadSpec(args.target[0], args.target[1], args.path, args.method,
                            args.threads, args.loops, args.think_ms)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    report = remote_load(*args.via, spec) if args.via else run_load(spec)
    write_table([["requests_sent", report.sent],
                 ["requests_ok", report.ok],
                 ["requests_failed", report.failed],
                 ["elapsed_ms", report.elapsed_ms]], ["metric", "value"], args.csv)
    return EXIT_OK


def _tree_params(args, file_tree: dict) -> dict:
    out = {"N": file_tree.get("N"), "n": file_tree.get("n", 2), "C": file_tree.get("C", 1),
           "t": file_tree.get("t", 1)}
    for k in ("N", "n", "C", "t"):
        v = getattr(args, k)
        if v is not None:
            out[k] = v
    for k in ("C", "t"):
        if isinstance(out[k], float) and out[k].is_integer():
            out[k] = int(out[k])
    return out


def _cmd_analyze(args) -> int:
    from .overhead import model as om

    doc = {}
    if args.file:
        with open(args.file, encoding="utf-8") as fh:
            doc = json.load(fh)
        if not isinstance(doc, dict):
            raise ClambsError(f"{args.file}: expected a JSON object")
    tree_doc = doc.get("tree", {k: doc[k] for k in ("N", "n", "C", "t") if k in doc})
    params = _tree_params(args, tree_doc)

    if args.sweep:
        var, values = args.sweep
        if params["N"] is None and var == "n":
            raise UsageError("--sweep n=... needs --N")
        rows, header = [], None
        for v in values:
            p = dict(params, **{var: v})
            tree = om.summary(om.TreeModel(p["N"], p["n"], p["C"], p["t"], om.TREE))
            flat = om.summary(om.TreeModel(p["N"], p["n"], p["C"], p["t"], om.FLAT))
            keys = list(tree)
            if header is None:
                header = [var] + keys + [f"flat_{k}" for k in keys]
            rows.append([v] + [tree.get(k) for k in keys] + [flat.get(k) for k in keys])
        write_table(rows, header, True)
        return EXIT_OK

    rows = []
    if params["N"] is not None:
        models = {s: om.TreeModel(params["N"], params["n"], params["C"], params["t"], s)
                  for s in (om.FLAT, om.TREE)}
        sums = {s: om.summary(m) for s, m in models.items()}
        for key in sums[om.TREE]:
            rows.append([key, sums[om.FLAT].get(key), sums[om.TREE].get(key)])
    if "topology" in doc:
        topo = om.TopologySpec.from_dict(doc["topology"])
        dist = None
        if doc.get("manager_message_sizes") is not None:
            dist = om.distributed_manager_overhead(
                [int(x) for x in doc["manager_message_sizes"]], doc.get("super_center"))
        rows.append(["comm_overhead_bytes", om.comm_overhead_variable(topo), dist])
        rows.append(["comm_time_s", om.comm_time(topo), None])
    if not rows:
        raise UsageError("analyze needs --N, a --file with a model or topology, or --sweep")
    if args.model == "flat":
        rows, header = [[r[0], r[1]] for r in rows], ["metric", "flat"]
    elif args.model == "tree":
        rows, header = [[r[0], r[2]] for r in rows], ["metric", "tree"]
    else:
        header = ["metric", "flat", "tree"]
    write_table(rows, header, args.csv)
    return EXIT_OK


def _cmd_scenario(args) -> int:
    from .scenario import format_result, run_scenario

    if args.duration <= 0:
        raise UsageError("--duration must be positive")
    result = run_scenario(args.name, args.duration, poll_interval_ms=args.poll_interval_ms,
                          base_port=args.base_port)
    write_table(format_result(result), ["metric", "value"], args.csv)
    return EXIT_FAILURE if result.crashed else EXIT_OK


COMMANDS = {
    "agent": _cmd_agent,
    "bench-agent": _cmd_bench_agent,
    "manager": _cmd_manager,
    "bench": _cmd_bench,
    "load": _cmd_load,
    "analyze": _cmd_analyze,
    "scenario": _cmd_scenario,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.cmd:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.cmd](args)
    except UsageError as exc:
        print(f"clambs {args.cmd}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_OK
    except (ClambsError, OSError, ValueError, KeyError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_FAILURE


def main():
    sys.exit(run())
