"""Command-line orchestration of the pipeline.

Every subcommand reads a config file, derives its randomness from the
single global seed, and reads/writes artifacts under the output
directory. Exit codes: 0 success, 1 usage error, 2 invalid config,
3 runtime failure. Concurrent runs against one output directory are
refused via a lock file.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import pipeline
from .config import ConfigError, load_config, save_config

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

LOCK_FILE = ".wslc.lock"


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; route to our exit table
    def error(self, message):
        raise _UsageError(message)


COMMANDS = {
    "gen-data": pipeline.run_gen_data,
    "train-initial": pipeline.run_train_initial,
    "build-graph": pipeline.run_build_graph,
    "finetune": pipeline.run_finetune,
    "localize": pipeline.run_localize,
    "train-detectors": pipeline.run_train_detectors,
    "detect": pipeline.run_detect,
    "eval-cls": pipeline.run_eval_cls,
    "eval-det": pipeline.run_eval_det,
    "probe": pipeline.run_probe,
    "report": pipeline.run_report,
    "full-pipeline": pipeline.run_full_pipeline,
}


def build_parser():
    parser = _Parser(prog="wslc", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="config file path")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config's global seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads (default WSLC_THREADS or 1)")
        if name == "finetune":
            p.add_argument("--identity", action="store_true",
                           help="fine-tune against the identity graph "
                                "(no-graph baseline)")
    return parser


class _OutputLock:
    def __init__(self, out):
        self.path = Path(out) / LOCK_FILE
        self.fd = None

    def __enter__(self):
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(
                f"{self.path} exists; another run holds this output "
                "directory (delete the lock if that run is dead)") from None
        os.write(self.fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc):
        if self.fd is not None:
            os.close(self.fd)
            self.path.unlink(missing_ok=True)
        return False


def _resolve_threads(value):
    if value is not None:
        return max(1, value)
    env = os.environ.get("WSLC_THREADS", "")
    return max(1, int(env)) if env.isdigit() else 1


def run_command(argv):
    """Dispatch one subcommand; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("seed must be >= 0")
            cfg.seed = args.seed
    except FileNotFoundError:
        print(f"error: config file {args.config} not found", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    threads = _resolve_threads(args.threads)
    fn = COMMANDS[args.command]
    kwargs = {"threads": threads}
    if args.command == "finetune":
        kwargs["identity"] = args.identity
    try:
        with _OutputLock(out):
            if args.command == "full-pipeline":
                save_config(cfg, out / "config.ini")
            summary = fn(cfg, out, **kwargs)
        print(summary)
        return EXIT_OK
    except (RuntimeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main():
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
