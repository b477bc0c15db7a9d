"""Command-line exporter.

viewsel-extract --images manifest.csv --out dir [--backbone stub16]
[--input-size 224] [--crop-box crop=fraction ...] [--batch-size N]
[--skip-bad]. Exit codes: 0 success, 1 configuration or input problem,
2 runtime failure. VSP_LOG_LEVEL controls verbosity.
"""

from __future__ import annotations

import argparse
import sys

from .errors import ConfigError, FormatError, IngestError, ValidationError
from .extract import ExtractConfig, extract_and_export
from .util import configure_logging, get_logger

log = get_logger("cli")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _parse_crop_boxes(items: list[str] | None) -> dict[str, float]:
    boxes: dict[str, float] = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(
                f"crop box {item!r} must look like crop=fraction, e.g. okra=0.8"
            )
        crop, _, raw = item.partition("=")
        crop = crop.strip()
        try:
            boxes[crop] = float(raw)
        except ValueError:
            raise ConfigError(f"crop box fraction {raw!r} is not a number") from None
    return boxes


def _build_parser() -> Parser:
    parser = Parser(prog="viewsel-extract", description=__doc__)
    parser.add_argument("--images", required=True,
                        help="image manifest CSV (crop, plant_id, day, level, view, path)")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--backbone", default="stub16")
    parser.add_argument("--input-size", type=int, default=224)
    parser.add_argument("--crop-box", action="append", metavar="CROP=FRACTION",
                        help="center-crop fraction override; repeatable")
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--skip-bad", action="store_true",
                        help="skip samples with unreadable images instead of failing")
    return parser


def main(argv=None) -> int:
    configure_logging()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        config = ExtractConfig(
            image_manifest=args.images,
            out_dir=args.out,
            backbone=args.backbone,
            input_size=args.input_size,
            crop_boxes=_parse_crop_boxes(args.crop_box),
            batch_size=args.batch_size,
            device=args.device,
            skip_bad=args.skip_bad,
        )
        result = extract_and_export(config)
        print(
            f"wrote {result.cache_path} ({result.num_samples} samples, "
            f"{result.levels} levels x {result.views} views x dim {result.dim}), "
            f"{result.manifest_path}, {result.sidecar_path}"
        )
        if result.skipped:
            print(f"skipped {len(result.skipped)} samples with unreadable images")
        return 0
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ConfigError, FormatError, ValidationError, IngestError,
            FileNotFoundError, IsADirectoryError, NotADirectoryError,
            PermissionError) as e:
        log.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:
        return int(e.code or 0)
    except Exception as e:
        log.error("unexpected failure: %s", e)
        print(f"error: {e}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
