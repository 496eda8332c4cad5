"""Helpers shared by the experiment scripts: run one CLI subcommand in-process."""

import logging
import sys

from vpfd.cli import main

logger = logging.getLogger("scripts")

# Settings that finish the whole chain in a couple of minutes on one CPU.
SMOKE = [
    "data.sentences_per_speaker=2",
    "data.duration=0.5",
    "vocoder_train.steps=20",
    "vocoder_train.batch_size=2",
    "teacher.steps=20",
    "teacher.batch_size=2",
    "trainer.max_steps=10",
    "trainer.batch_size=2",
    "trainer.eval_batch=2",
    "trainer.eval_steps=2",
    "trainer.eval_every=5",
    "bench.steps=6",
    "bench.batch_size=2",
    "bench.frames=40",
    "bench.warmup=1",
]


def overrides(preset: str, extra) -> list[str]:
    return (SMOKE if preset == "smoke" else []) + list(extra or [])


def run(command: str, root, sets, config=None, verbose=False) -> None:
    """Run ``vpfd <command>``; exit with its code on failure."""
    argv = [command, "--root", str(root)]
    if config:
        argv += ["--config", str(config)]
    for s in sets:
        argv += ["--set", s]
    if verbose:
        argv.append("-v")
    logger.info("vpfd %s", " ".join(argv))
    code = main(argv)
    if code:
        sys.exit(code)


def add_common_args(parser) -> None:
    parser.add_argument("--root", default="runs", help="run root directory")
    parser.add_argument("--config", help="flat 'section.key = value' config file")
    parser.add_argument("--preset", choices=("default", "smoke"), default="default",
                        help="smoke shrinks every stage for a quick end-to-end check")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="extra config override")
    parser.add_argument("-v", "--verbose", action="store_true")
