"""Distill once per cell of the extractor grid (pretrained x frozen) over shared upstream models.

Each cell gets its own run root holding a copy of the upstream data, vocoder
and teacher, so the cells differ only in the two extractor flags.

    python scripts/freeze_grid.py --root runs/grid --preset smoke
"""

import argparse
import itertools
import json
import logging
import shutil
from pathlib import Path

from _common import add_common_args, overrides, run

UPSTREAM = ("gen-data", "pretrain-vocoder", "pretrain-teacher")
SHARED_DIRS = ("data", "vocoder", "teacher")


def parse_args(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    add_common_args(parser)
    return parser.parse_args(argv)


def main(argv=None):
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    sets = overrides(args.preset, args.set)
    root = Path(args.root)
    base = root / "upstream"
    for stage in UPSTREAM:
        run(stage, base, sets, args.config, args.verbose)
    summary = {}
    for pretrained, frozen in itertools.product((True, False), repeat=2):
        name = f"pretrained_{str(pretrained).lower()}_frozen_{str(frozen).lower()}"
        cell = root / name
        for d in SHARED_DIRS:
            shutil.copytree(base / d, cell / d, dirs_exist_ok=True)
        flags = [f"trainer.extractor_pretrained={str(pretrained).lower()}",
                 f"trainer.extractor_frozen={str(frozen).lower()}"]
        run("distill", cell, sets + flags, args.config, args.verbose)
        summary[name] = json.loads((cell / "distill" / "report.json").read_text())
    (root / "grid.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps({k: v["history"][-1] if v["history"] else {} for k, v in summary.items()}, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
