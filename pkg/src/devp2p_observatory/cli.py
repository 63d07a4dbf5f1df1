"""Command-line entry point.

Every command ends with one status line on stdout::

    status=ok command=simulate events=652 digest=49227ce29e98...

Exit codes: 0 success, 1 assertion or validation failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import codec, store
from .analyzer import analyze_events
from .config import ConfigError, load_config
from .render import render_json, render_text, table_csv, write_csvs, write_json

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        _status("usage", "cli", error=message)
        raise SystemExit(EXIT_USAGE)


def _status(state: str, command: str, **fields) -> None:
    parts = [f"status={state}", f"command={command}"]
    for k, v in fields.items():
        text = str(v).replace("\n", " ")
        parts.append(f"{k}={json.dumps(text) if ' ' in text else text}")
    print(" ".join(parts), flush=True)


def _write_outputs(report, outdir: Path, figures: bool) -> None:
    write_csvs(report, outdir)
    write_json(report, outdir)
    if figures:
        from .figures import write_figures
        write_figures(report, outdir)


# -- commands ---------------------------------------------------------------


def cmd_simulate(args) -> int:
    from .simnet.scenario import AssertionFailure, ScenarioError, check_assertions, load_scenario, run_scenario
    try:
        cfg = load_scenario(args.scenario)
    except (ScenarioError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        _status("fail", "simulate", error=exc)
        return EXIT_FAIL
    if args.seed is not None:
        cfg.seed = args.seed
    result = run_scenario(cfg, check=False)
    out = Path(args.out) if args.out else Path("out") / cfg.name
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / store.EVENTS
    if log_path.exists():
        log_path.unlink()
    store.write_events(log_path, result.events)
    store.save_peers(out / store.PEERS, [r.to_json() for r in result.analyzer.records.values()])
    store.save_table(out / store.TABLE, result.observer.discovery.table.dump_lines())
    _write_outputs(result.report, out, not args.no_figures)
    try:
        check_assertions(cfg.assertions, result.report)
    except AssertionFailure as exc:
        print(f"assertion failed: {exc}", file=sys.stderr)
        _status("fail", "simulate", scenario=cfg.name, cell=exc.cell, expected=exc.expected, actual=exc.actual)
        return EXIT_FAIL
    _status("ok", "simulate", scenario=cfg.name, events=len(result.events), digest=result.digest(),
            out=out, assertions=len(cfg.assertions))
    return EXIT_OK


def cmd_crawl(args) -> int:
    if not args.i_understand_live_network:
        print("crawl talks to the live network; pass --i-understand-live-network to proceed",
              file=sys.stderr)
        _status("usage", "crawl", error="consent flag missing")
        return EXIT_USAGE
    try:
        cfg = load_config(args.config)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        _status("fail", "crawl", error=exc)
        return EXIT_FAIL
    logging.getLogger().setLevel(str(cfg.get("general", "logLevel")).upper())
    from .live import crawl
    out = Path(args.out or cfg.get("storage", "dir"))
    try:
        report = asyncio.run(crawl(cfg, out, args.duration, public_ip=args.public_ip))
    except KeyboardInterrupt:
        _status("ok", "crawl", interrupted="true", out=out)
        return EXIT_OK
    except (ValueError, OSError) as exc:
        print(f"crawl failed: {exc}", file=sys.stderr)
        _status("fail", "crawl", error=exc)
        return EXIT_FAIL
    _write_outputs(report, out, not args.no_figures)
    _status("ok", "crawl", peers=report.summary["peers"], out=out)
    return EXIT_OK


def _load_events(path: Path):
    events, warnings = store.replay_log(store.resolve_log(path))
    return events, warnings


def cmd_analyze(args) -> int:
    path = Path(args.eventlog)
    try:
        events, warnings = _load_events(path)
    except OSError as exc:
        print(f"cannot read {path}: {exc}", file=sys.stderr)
        _status("fail", "analyze", error=exc)
        return EXIT_FAIL
    if warnings:
        print(f"warning: skipped {warnings} undecodable line(s)", file=sys.stderr)
    report = analyze_events(events).build_report()
    out = Path(args.out) if args.out else store.resolve_log(path).parent / "report"
    _write_outputs(report, out, not args.no_figures)
    _status("ok", "analyze", events=len(events), warnings=warnings, out=out)
    return EXIT_OK


def cmd_report(args) -> int:
    path = Path(args.store)
    try:
        events, warnings = _load_events(path)
    except OSError as exc:
        print(f"cannot read {path}: {exc}", file=sys.stderr)
        _status("fail", "report", error=exc)
        return EXIT_FAIL
    report = analyze_events(events).build_report()
    if args.format == "json":
        text = render_json(report)
    elif args.format == "text":
        text = render_text(report)
    else:
        from .render import CSV_TABLES
        text = "".join(f"# {name}.csv\n{table_csv(report, name)}\n" for name in CSV_TABLES)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.format == "csv":
            write_csvs(report, out)
            if not args.no_figures:
                from .figures import write_figures
                write_figures(report, out)
        else:
            (out / f"report.{ 'json' if args.format == 'json' else 'txt'}").write_text(text)
    else:
        sys.stdout.write(text)
    _status("ok", "report", format=args.format, events=len(events), warnings=warnings)
    return EXIT_OK


def cmd_codec_dump(args) -> int:
    try:
        raw = Path(args.hexfile).read_text()
    except OSError as exc:
        print(f"cannot read {args.hexfile}: {exc}", file=sys.stderr)
        _status("fail", "codec-dump", error=exc)
        return EXIT_FAIL
    text = "".join(raw.split())
    if text.startswith(("0x", "0X")):
        text = text[2:]
    try:
        data = bytes.fromhex(text)
    except ValueError:
        _status("fail", "codec-dump", error="input is not hex")
        return EXIT_FAIL
    try:
        view = codec.describe(codec.decode_packet(data))
        layer = "discovery"
    except codec.CodecError as disc_err:
        try:
            view = codec.describe(codec.decode_capability_message(data))
            layer = "rlpx"
        except codec.CodecError:
            print(f"not a discovery packet ({disc_err}) nor an RLPx message", file=sys.stderr)
            _status("fail", "codec-dump", error=type(disc_err).__name__, detail=disc_err)
            return EXIT_FAIL
    print(json.dumps(view, indent=2))
    _status("ok", "codec-dump", layer=layer, size=len(data))
    return EXIT_OK


def cmd_table_dump(args) -> int:
    path = Path(args.store)
    table = path / store.TABLE if path.is_dir() else path
    try:
        lines = [l for l in table.read_text().splitlines() if l.strip()]
    except OSError as exc:
        print(f"cannot read {table}: {exc}", file=sys.stderr)
        _status("fail", "table-dump", error=exc)
        return EXIT_FAIL
    per_bucket = {}
    for line in lines:
        row = json.loads(line)
        per_bucket[row["bucket"]] = per_bucket.get(row["bucket"], 0) + 1
        print(f"{row['bucket']:>2} {row['distance']:>3} {row['id'][:16]} {row['ip']}:{row['udp']}")
    _status("ok", "table-dump", entries=len(lines),
            buckets=",".join(f"{b}:{n}" for b, n in sorted(per_bucket.items())) or "none")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="devp2p-observatory", description="devp2p network measurement toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("simulate", help="run a scenario file or bundled scenario name")
    s.add_argument("scenario")
    s.add_argument("--out", help="output directory (default out/<scenario name>)")
    s.add_argument("--seed", type=int, help="override the scenario seed")
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("crawl", help="measure the live network")
    c.add_argument("--config", required=True)
    c.add_argument("--i-understand-live-network", action="store_true")
    c.add_argument("--duration", type=float, help="seconds to run (default: until interrupted)")
    c.add_argument("--public-ip", help="address claimed in our Pings")
    c.add_argument("--out")
    c.add_argument("--no-figures", action="store_true")
    c.set_defaults(func=cmd_crawl)

    a = sub.add_parser("analyze", help="rebuild reports from an event log")
    a.add_argument("eventlog")
    a.add_argument("--out")
    a.add_argument("--no-figures", action="store_true")
    a.set_defaults(func=cmd_analyze)

    r = sub.add_parser("report", help="render the report for a store")
    r.add_argument("store")
    r.add_argument("--format", choices=("csv", "json", "text"), default="text")
    r.add_argument("--out", help="write files here instead of stdout")
    r.add_argument("--no-figures", action="store_true")
    r.set_defaults(func=cmd_report)

    cd = sub.add_parser("codec", help="codec tools")
    csub = cd.add_subparsers(dest="codec_command", parser_class=_Parser)
    csub.required = True
    dump = csub.add_parser("dump", help="decode a hex-encoded packet or message")
    dump.add_argument("hexfile")
    dump.set_defaults(func=cmd_codec_dump)

    t = sub.add_parser("table", help="routing table tools")
    tsub = t.add_subparsers(dest="table_command", parser_class=_Parser)
    tsub.required = True
    tdump = tsub.add_parser("dump", help="print a stored routing table")
    tdump.add_argument("store", nargs="?", default="store")
    tdump.set_defaults(func=cmd_table_dump)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
