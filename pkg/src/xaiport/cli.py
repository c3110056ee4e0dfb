"""Command-line entry point.

    xaiport run --config cfg.json [--out DIR]
    xaiport serve --port 8080 --data DIR
    xaiport report --job ID [--format table|json] [--data DIR]
    xaiport scoreserver --model CKPT_DIR --port 9000

Exit codes: 0 success, 2 config error, 3 stage failure, 4 missing job,
64 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3
EXIT_MISSING = 4
EXIT_USAGE = 64

COMMANDS = ("run", "serve", "report", "scoreserver")


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; we reserve 2 for config errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="xaiport", description="Explanation stability pipelines over pluggable scoring backends.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}", parser_class=_Parser)

    p = sub.add_parser("run", help="run a pipeline from a JSON config")
    p.add_argument("--config", required=True, help="pipeline config file (JSON)")
    p.add_argument("--out", help="output directory (default: config output_dir, $XAIPORT_DATA_DIR, ./xaiport-out)")

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--data", help="data directory (default: $XAIPORT_DATA_DIR or ./xaiport-out)")
    p.add_argument("--workers", type=int, default=2, help="concurrent pipeline jobs")
    p.add_argument("--model", help="checkpoint directory served on /v1/score")

    p = sub.add_parser("report", help="print a finished job's metric report")
    p.add_argument("--job", required=True)
    p.add_argument("--format", choices=("table", "json"), default="table")
    p.add_argument("--data", "--out", dest="data", help="data directory holding jobs/")

    p = sub.add_parser("scoreserver", help="serve POST /v1/score over a saved checkpoint")
    p.add_argument("--model", required=True, help="checkpoint directory")
    p.add_argument("--port", type=int, default=9000)
    p.add_argument("--host", default="127.0.0.1")
    return parser


def _cmd_run(args) -> int:
    from .coordination import run_pipeline, validate_config

    path = Path(args.config)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        print(f"error: cannot read config file {path}: {exc.strerror}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = validate_config(raw)
    except ConfigError as exc:
        print(f"error: {path}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    job = run_pipeline(cfg, args.out)
    if job.state != "succeeded":
        err = job.error or {}
        print(job.job_id)
        print(f"error: stage {err.get('stage')} failed: {err.get('type')}: {err.get('message')}", file=sys.stderr)
        return EXIT_STAGE
    print(f"{job.job_id} (cached)" if job.cached else job.job_id)
    print(job.report_path)
    return EXIT_OK


def _cmd_report(args) -> int:
    from .coordination import default_data_dir, find_job
    from .evaluation import MetricReport

    data = Path(args.data) if args.data else default_data_dir()
    try:
        job = find_job(data, args.job)
    except KeyError:
        print(f"error: no job {args.job} under {data}", file=sys.stderr)
        return EXIT_MISSING
    if job.state != "succeeded":
        print(f"error: job {args.job} is {job.state}", file=sys.stderr)
        return EXIT_STAGE
    report = job.report()
    if args.format == "json":
        sys.stdout.write(json.dumps(report, indent=2) + "\n")
    else:
        sys.stdout.write(MetricReport.from_dict(report).render_table())
    return EXIT_OK


def _cmd_serve(args) -> int:
    from .coordination import default_data_dir
    from .gateway import serve
    from .model import load_checkpoint

    model = load_checkpoint(args.model) if args.model else None
    data = Path(args.data) if args.data else default_data_dir()
    try:
        serve(args.port, data, host=args.host, workers=args.workers, model=model)
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def _cmd_scoreserver(args) -> int:
    from .backends import make_score_server
    from .model import load_checkpoint

    model = load_checkpoint(args.model)
    server = make_score_server(model, host=args.host, port=args.port, version=Path(args.model).name)
    print(f"listening on http://{server.server_address[0]}:{server.server_address[1]}/v1/score", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    positional = [a for a in argv if not a.startswith("-")]
    if not positional or positional[0] not in COMMANDS:
        if any(a in ("-h", "--help") for a in argv) and not positional:
            parser.print_help()
            return EXIT_OK
        parser.print_usage(sys.stderr)
        what = f"unknown command {positional[0]!r}" if positional else "missing command"
        print(f"xaiport: error: {what}; choose from {', '.join(COMMANDS)}", file=sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    handler = {"run": _cmd_run, "serve": _cmd_serve, "report": _cmd_report, "scoreserver": _cmd_scoreserver}
    return handler[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
