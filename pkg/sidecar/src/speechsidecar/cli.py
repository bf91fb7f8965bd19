"""Serve the sidecar: `speechsidecar serve --host 127.0.0.1 --port 8008`."""

from __future__ import annotations

import argparse
import logging
import sys

import uvicorn
import yaml

from .app import create_app
from .models import ModelLoadError, SidecarConfig

logger = logging.getLogger("speechsidecar")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="speechsidecar")
    sub = parser.add_subparsers(dest="command", required=True)
    serve = sub.add_parser("serve", help="run the inference service")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8008)
    serve.add_argument("--config", default=None, help="YAML model config")
    return parser


def load_sidecar_config(path: str | None) -> SidecarConfig:
    if path is None:
        return SidecarConfig()
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    return SidecarConfig.from_dict(data)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.INFO)
    try:
        config = load_sidecar_config(args.config)
        app = create_app(config)
    except (ModelLoadError, ValueError, OSError) as exc:
        logger.error("refusing to serve: %s", exc)
        return 2
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


if __name__ == "__main__":
    sys.exit(main())
