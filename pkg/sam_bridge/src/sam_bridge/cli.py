"""Serve the bridge: ``sam-bridge --port 8765 --model stub``."""

from __future__ import annotations

import argparse

import uvicorn

from .service import BridgeConfig, create_app


def main(argv=None):
    p = argparse.ArgumentParser(prog="sam-bridge", description=__doc__)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--model", default="stub", choices=["stub", "transformers-sam"])
    p.add_argument("--checkpoint", help="local model checkpoint (transformers-sam)")
    p.add_argument("--max-concurrent", type=int, default=4)
    p.add_argument("--threshold", type=float, default=0.5)
    args = p.parse_args(argv)
    config = BridgeConfig(
        host=args.host,
        port=args.port,
        model=args.model,
        checkpoint=args.checkpoint,
        max_concurrent=args.max_concurrent,
        threshold=args.threshold,
    )
    uvicorn.run(create_app(config), host=config.host, port=config.port, log_level="info")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
