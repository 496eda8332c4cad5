"""Train the whole chain: corpus, vocoder, teacher, distilled student, then one conversion.

    python scripts/run_pipeline.py --root runs/toy
    python scripts/run_pipeline.py --root runs/smoke --preset smoke
"""

import argparse
import logging

from _common import add_common_args, overrides, run

STAGES = ("gen-data", "pretrain-vocoder", "pretrain-teacher", "distill", "convert")


def parse_args(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    add_common_args(parser)
    parser.add_argument("--from-stage", choices=STAGES, default=STAGES[0],
                        help="skip earlier stages and reuse their outputs under --root")
    return parser.parse_args(argv)


def main(argv=None):
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    sets = overrides(args.preset, args.set)
    for stage in STAGES[STAGES.index(args.from_stage):]:
        run(stage, args.root, sets, args.config, args.verbose)


if __name__ == "__main__":
    main()
