"""Command line front end.

    detector-bridge serve --model pkg.mod:make --checkpoint model.pth
    detector-bridge mock-serve --transport tcp:0

Exit codes: 0 clean shutdown, 1 configuration or startup failure, 2 bad
arguments (argparse).
"""

from __future__ import annotations

import argparse
import sys

from .adapter import BridgeConfig, serve
from .mock import mock_serve
from .protocol import BridgeError

EXIT_OK = 0
EXIT_CONFIG = 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="detector-bridge",
        description="Expose a point-cloud detector behind the NDJSON oracle protocol.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="serve a real model through a factory path")
    p.add_argument("--model", required=True,
                   help="detector factory, e.g. my_models.pillar:make")
    p.add_argument("--checkpoint", required=True, help="model weights path")
    p.add_argument("--device", default="cpu", help="inference device string")
    p.add_argument("--threshold", type=float, default=None,
                   help="override the advertised score threshold")
    p.add_argument("--transport", default="stdio", help="stdio or tcp:PORT")

    p = sub.add_parser("mock-serve",
                       help="scripted stub detector for CI and conformance checks")
    p.add_argument("--transport", default="stdio", help="stdio or tcp:PORT")
    p.add_argument("--corrupt-ids", dest="corrupt_ids", action="store_true",
                   help="misbehave on purpose: shift every reply id by one")

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "mock-serve":
            return mock_serve(args.transport, corrupt_ids=args.corrupt_ids)
        config = BridgeConfig(
            model=args.model,
            checkpoint=args.checkpoint,
            device=args.device,
            score_threshold=args.threshold,
        )
        return serve(config, args.transport)
    except BridgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
