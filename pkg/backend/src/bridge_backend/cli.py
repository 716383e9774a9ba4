"""Backend entry point.

TCP mode binds the requested port (0 picks an ephemeral one) and prints
"LISTENING <port>" once ready, so a parent process can scrape the
endpoint. Stdio mode keeps stdout clean for protocol frames.
"""
from __future__ import annotations

import argparse
import sys

from .server import serve_stdio, serve_tcp
from .worlds import load_world


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bridge-backend", description="Reference denoiser backend"
    )
    parser.add_argument("world", help="JSON world spec file")
    parser.add_argument(
        "--transport", choices=("tcp", "stdio"), default="tcp", help="how to serve"
    )
    parser.add_argument("--host", default="127.0.0.1", help="TCP bind address")
    parser.add_argument("--port", type=int, default=0, help="TCP port; 0 = ephemeral")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        world = load_world(args.world)
    except (OSError, ValueError, KeyError) as exc:
        print(f"bad world spec: {exc}", file=sys.stderr)
        return 2
    if args.transport == "stdio":
        serve_stdio(world)
        return 0
    try:
        serve_tcp(world, args.host, args.port)
    except OSError as exc:
        print(f"cannot serve on {args.host}:{args.port}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
