"""Command line interface: one run directory per input image."""

import argparse
import sys
from pathlib import Path

from .dropout import GROUPS
from .export import ExportConfig, ExportError, export_run
from .models import load_model


def _groups(text: str) -> tuple:
    if text == "none":
        return ()
    return tuple(part.strip() for part in text.split(",") if part.strip())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="probseg-export",
        description="Run a torch instance-segmentation model M times with "
        "dropout active and write probseg run directories",
    )
    parser.add_argument("images", nargs="+", help="input image files")
    parser.add_argument("-o", "--out", required=True, help="output root directory")
    parser.add_argument("--model", default="tiny", help="model identifier")
    parser.add_argument(
        "--passes", type=int, default=8, help="number of forward passes M"
    )
    parser.add_argument(
        "--groups",
        default=",".join(GROUPS),
        help="comma-separated dropout groups to keep stochastic "
        f"(subset of {','.join(GROUPS)}), or 'none'",
    )
    parser.add_argument(
        "--class-names",
        default="background,thing_a,thing_b",
        dest="class_names",
        help="comma-separated class-name table, background first",
    )
    parser.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = ExportConfig(
            model=args.model,
            passes=args.passes,
            stochastic_groups=_groups(args.groups),
            images=tuple(args.images),
            class_names=tuple(n.strip() for n in args.class_names.split(",")),
            seed=args.seed,
        )
        out_root = Path(args.out)
        stems = [Path(p).stem for p in config.images]
        dupes = sorted({s for s in stems if stems.count(s) > 1})
        if dupes:
            raise ExportError(f"duplicate image stems {dupes}; rename the inputs")
        model = load_model(config.model)
        for image_path, stem in zip(config.images, stems):
            run_dir = export_run(image_path, config, out_root / stem, model=model)
            print(f"wrote {run_dir}: M={config.passes}")
        return 0
    except (ExportError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # pragma: no cover - defensive
        print(f"internal error: {e!r}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
