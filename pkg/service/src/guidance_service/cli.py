"""Command line entry point: `guidance-service [--stub] [--encoder ...]`."""

from __future__ import annotations

import argparse

from .app import DEFAULT_MAX_IMAGE_DIM, create_app
from .encoders import load_encoder


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="guidance-service",
        description="serve image/text guidance over the wire protocol",
    )
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8000)
    parser.add_argument("--encoder", choices=["stub", "procedural", "clip"],
                        default="clip")
    parser.add_argument("--stub", action="store_true",
                        help="serve zero loss/gradients without loading a model "
                             "(same as --encoder stub)")
    parser.add_argument("--checkpoint", default="openai/clip-vit-base-patch32",
                        help="encoder checkpoint identifier (clip backend)")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--max-image-dim", type=int,
                        default=DEFAULT_MAX_IMAGE_DIM)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    kind = "stub" if args.stub else args.encoder
    encoder = load_encoder(kind, checkpoint=args.checkpoint,
                           device=args.device)
    app = create_app(encoder, max_image_dim=args.max_image_dim)

    import uvicorn

    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
