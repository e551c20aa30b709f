"""Command line: ``tinymetafed {run,compare,validate,serve,client}``.

Log verbosity comes from the ``TMF_LOG`` environment variable
(``DEBUG``, ``INFO``, ``WARNING``...; default ``WARNING``).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, validate_config


def _setup_logging() -> None:
    level = os.environ.get("TMF_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _load(ref, seed=None, rounds=None):
    from .harness import resolve_config

    cfg = resolve_config(ref)
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    if rounds is not None:
        cfg = cfg.replace(rounds=rounds)
    return cfg.validated()


def cmd_run(args) -> int:
    from .harness import run_experiment

    try:
        cfg = _load(args.config, args.seed)
    except (ConfigError, OSError) as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2
    status = run_experiment(cfg, args.out, transport=args.transport)
    if status == 0:
        print(f"wrote {args.out}")
    return status


def cmd_compare(args) -> int:
    from .harness import compare, format_summary

    cmp = compare(args.runs, args.out)
    print(format_summary(cmp))
    return 0


def cmd_validate(args) -> int:
    from .harness import builtin_config

    path = Path(args.config)
    if not path.exists() and not path.suffix:
        path = builtin_config(args.config)
    try:
        report = validate_config(path)
    except OSError as exc:
        print(f"cannot read {path}: {exc}", file=sys.stderr)
        return 2
    for line in report.lines():
        print(line)
    return 0 if report.ok else 1


def cmd_serve(args) -> int:
    from .harness import EVAL_FIELDS, ROUND_FIELDS, CsvSink
    from .transport import parse_address, serve

    try:
        cfg = _load(args.config, args.seed, args.rounds)
    except (ConfigError, OSError) as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2
    sinks = []
    on_record = on_eval = None
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.resolved.ini")
        on_record = CsvSink(out / "rounds.csv", ROUND_FIELDS)
        on_eval = CsvSink(out / "evals.csv", EVAL_FIELDS)
        sinks = [on_record, on_eval]

    def ready(addr):
        print(f"listening on {addr[0]}:{addr[1]}", flush=True)

    try:
        result = serve(
            parse_address(args.bind, "0.0.0.0"),
            cfg,
            args.checkpoint_dir,
            evaluate=bool(args.out),
            wait_for=args.wait_for,
            on_record=on_record,
            on_eval=on_eval,
            ready=ready,
        )
    except (RuntimeError, TimeoutError) as exc:
        print(f"server stopped: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"cannot bind {args.bind}: {exc}", file=sys.stderr)
        return 1
    finally:
        for s in sinks:
            s.close()
    print(f"finished at round {sum(1 for r in result.records if r.status == 'ok')} this session")
    return 0


def cmd_client(args) -> int:
    from .transport import client_agent, parse_address

    try:
        cfg = _load(args.config)
    except (ConfigError, OSError) as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2
    served = client_agent(
        parse_address(args.server),
        cfg,
        args.client_id,
        task_seed=args.task_seed,
        give_up_after=args.give_up_after,
    )
    print(f"client {args.client_id} served {served} rounds")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tinymetafed", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment and write CSV traces")
    r.add_argument("--config", required=True, help="INI file or bundled name (sine, synthetic_class)")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--seed", type=int)
    r.add_argument("--transport", choices=["sim", "tcp"], default="sim")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="compare finished runs")
    c.add_argument("runs", nargs="+", help="run output directories")
    c.add_argument("--out", help="directory for summary.csv and curves.csv")
    c.set_defaults(func=cmd_compare)

    v = sub.add_parser("validate", help="check a config without running it")
    v.add_argument("config", nargs="?")
    v.add_argument("--config", dest="config_opt")
    v.set_defaults(func=cmd_validate)

    s = sub.add_parser("serve", help="run the TCP server")
    s.add_argument("--bind", default="0.0.0.0:7070")
    s.add_argument("--config", required=True)
    s.add_argument("--rounds", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--checkpoint-dir")
    s.add_argument("--out", help="write rounds.csv/evals.csv here")
    s.add_argument("--wait-for", type=int, default=0, help="clients to await before round 0")
    s.set_defaults(func=cmd_serve)

    k = sub.add_parser("client", help="run one TCP client")
    k.add_argument("--server", required=True, help="host:port")
    k.add_argument("--config", required=True)
    k.add_argument("--client-id", type=int, required=True)
    k.add_argument("--task-seed", type=int, help="seed of the task split (default: config seed)")
    k.add_argument("--give-up-after", type=float, default=None, help="seconds without contact before exiting")
    k.set_defaults(func=cmd_client)
    return p


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    if args.command == "validate":
        args.config = args.config_opt or args.config
        if not args.config:
            print("validate needs a config", file=sys.stderr)
            return 2
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
