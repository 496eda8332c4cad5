"""Command-line entry point.

    vpfd <subcommand> [--config FILE] [--set key=value ...] [--root DIR]

The run root is ``--root``, else ``$VPFD_RUN_ROOT``, else ``./runs``. Each
subcommand writes its outputs and the resolved config under one subdirectory:

    data/      manifest.tsv, wavs/
    vocoder/   vocoder.safetensors, loss_log.csv
    teacher/   teacher.safetensors, loss_log.csv
    distill/   student.safetensors, discriminator.safetensors, loss_log.csv, report.json
    convert/   converted wav, report.json
    bench/     raw_rows.csv, table1_like.txt, table3_like.txt, ratios.csv
    arch/      vpfd_L<L>.txt

Exit codes: 0 success, 2 config error, 3 missing dependency, 4 non-finite loss.
Failures print one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import torch

from . import audio, bench
from .audio import WavFormatError, read_corpus
from .checkpoint import CheckpointError
from .conditioning import Providers
from .config import RunConfig, help_text, load_config
from .dataset import MelDataset, MelNormalizer
from .diffusion import Denoiser, load_denoiser, save_denoiser, train_teacher
from .discriminators import build_vpfd, dump_architecture
from .distill import convert, load_student, run_distillation
from .errors import ConfigError, DependencyError, NumericalError
from .metrics import speaker_cosine
from .vocoder import Vocoder, load_vocoder, pretrain_vocoder, save_vocoder

logger = logging.getLogger("vpfd")

ENV_ROOT = "VPFD_RUN_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_NUMERIC = 0, 2, 3, 4
SUBCOMMANDS = ("gen-data", "pretrain-vocoder", "pretrain-teacher", "distill", "convert", "bench", "report", "dump-arch")


class Paths:
    def __init__(self, root):
        self.root = Path(root)
        self.data = self.root / "data"
        self.manifest = self.data / "manifest.tsv"
        self.vocoder_dir = self.root / "vocoder"
        self.vocoder = self.vocoder_dir / "vocoder.safetensors"
        self.teacher_dir = self.root / "teacher"
        self.teacher = self.teacher_dir / "teacher.safetensors"
        self.distill = self.root / "distill"
        self.student = self.distill / "student.safetensors"
        self.convert = self.root / "convert"
        self.bench = self.root / "bench"
        self.arch = self.root / "arch"


def resolve_root(cli_root: str | None) -> Path:
    return Path(cli_root or os.environ.get(ENV_ROOT) or "runs")


def require(path: Path, step: str) -> Path:
    if not path.exists():
        raise DependencyError(f"missing {path}; run `{step}` first", path, step)
    return path


def write_rows(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        if not rows:
            return
        w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------- shared loading


def providers(cfg: RunConfig) -> Providers:
    return Providers.toy(cfg.mel.n_mels, cfg.conditioning)


def load_items(paths: Paths):
    return read_corpus(require(paths.manifest, "gen-data"))


def load_dataset(cfg: RunConfig, paths: Paths, normalizer: MelNormalizer | None = None) -> MelDataset:
    return MelDataset(load_items(paths), cfg.mel, providers(cfg), normalizer)


def load_teacher(paths: Paths) -> tuple[Denoiser, MelNormalizer]:
    model, ckpt = load_denoiser(require(paths.teacher, "pretrain-teacher"), kind="teacher")
    return model, MelNormalizer.from_dict(ckpt.config["normalizer"])


def get_vocoder(paths: Paths) -> Vocoder:
    return load_vocoder(require(paths.vocoder, "pretrain-vocoder"))[0]


# --------------------------------------------------------------------------- subcommands


def cmd_gen_data(cfg: RunConfig, paths: Paths) -> dict:
    items = audio.generate_corpus(cfg.seeded("data"))
    manifest = audio.write_corpus(items, paths.data)
    cfg.write(paths.data / "config.txt")
    return {"manifest": str(manifest), "utterances": len(items)}


def cmd_pretrain_vocoder(cfg: RunConfig, paths: Paths) -> dict:
    items = load_items(paths)
    rows = []
    vocoder, meta = pretrain_vocoder(items, cfg.vocoder, cfg.mel, cfg.seeded("vocoder_train"), log_rows=rows)
    save_vocoder(paths.vocoder, vocoder, meta)
    write_rows(paths.vocoder_dir / "loss_log.csv", rows)
    cfg.write(paths.vocoder_dir / "config.txt")
    return {"checkpoint": str(paths.vocoder), **meta}


def cmd_pretrain_teacher(cfg: RunConfig, paths: Paths) -> dict:
    data = load_dataset(cfg, paths)
    rows = []
    teacher, meta = train_teacher(data, cfg.schedule.build(), cfg.denoiser, cfg.seeded("teacher"), log_rows=rows)
    # the normalizer travels with the teacher so every later stage shares it
    save_denoiser(paths.teacher, teacher, kind="teacher", schedule=asdict(cfg.schedule), meta=meta,
                  extra={"normalizer": data.normalizer.to_dict()})
    write_rows(paths.teacher_dir / "loss_log.csv", rows)
    cfg.write(paths.teacher_dir / "config.txt")
    return {"checkpoint": str(paths.teacher), **meta}


def cmd_distill(cfg: RunConfig, paths: Paths) -> dict:
    tcfg = cfg.seeded("trainer")
    needs_vocoder = tcfg.discriminator in ("vpfd",) or tcfg.discriminator.startswith("vwd")
    vocoder = get_vocoder(paths) if needs_vocoder else None
    teacher, normalizer = load_teacher(paths)
    data = load_dataset(cfg, paths, normalizer)
    cfg.write(paths.distill / "config.txt")
    result = run_distillation(tcfg, data, teacher, vocoder, cfg.schedule.build(), paths.distill, cfg.vwd,
                              extra_config={"schedule": asdict(cfg.schedule)})
    return {"checkpoint": str(paths.student), "history": result.history}


def _default_pair(paths: Paths):
    items = load_items(paths)
    by_spk = {}
    for it in items:
        by_spk.setdefault(it.speaker_id, it)
    if len(by_spk) < 2:
        raise ConfigError("convert needs convert.source/convert.target or a corpus with two speakers")
    ids = sorted(by_spk)
    return by_spk[ids[0]].wave, by_spk[ids[1]].wave


def _load_wav(path: str):
    p = Path(path)
    if not p.exists():
        raise DependencyError(f"missing {p}", p, "gen-data")
    return audio.load_wav(p)


def cmd_convert(cfg: RunConfig, paths: Paths) -> dict:
    ccfg = cfg.seeded("convert")
    student_ckpt = load_student(require(paths.student, "distill"))
    vocoder = get_vocoder(paths)
    normalizer = MelNormalizer.from_dict(student_ckpt.config["normalizer"])
    if ccfg.source and ccfg.target:
        source, target = _load_wav(ccfg.source), _load_wav(ccfg.target)
    elif ccfg.source or ccfg.target:
        raise ConfigError("set both convert.source and convert.target, or neither")
    else:
        source, target = _default_pair(paths)
    prov = providers(cfg)
    t_s = student_ckpt.config["distill"].get("student_t") or None
    mode = student_ckpt.config["distill"].get("one_step", "collapsed")
    out = convert(source, target, student_ckpt.student, vocoder, prov, normalizer, cfg.mel, cfg.schedule.build(),
                  t_s, ccfg.seed, mode)
    out_path = paths.convert / ccfg.output
    out_path.parent.mkdir(parents=True, exist_ok=True)
    audio.save_wav(out, out_path)
    emb = {name: prov.embed_speaker(audio.extract_mel(w, cfg.mel)) for name, w in
           (("output", out), ("source", source), ("target", target))}
    report = {
        "output": str(out_path),
        "samples": len(out),
        "speaker_cosine_target": speaker_cosine(emb["output"], emb["target"]),
        "speaker_cosine_source": speaker_cosine(emb["output"], emb["source"]),
    }
    write_json(paths.convert / "report.json", report)
    cfg.write(paths.convert / "config.txt")
    return report


def cmd_bench(cfg: RunConfig, paths: Paths) -> dict:
    bcfg = cfg.seeded("bench")
    prov = providers(cfg)
    if bcfg.pretrained:
        vocoder = get_vocoder(paths)
        teacher, normalizer = load_teacher(paths)
    else:
        torch.manual_seed(bcfg.seed)
        vocoder, teacher, normalizer = Vocoder(cfg.vocoder), Denoiser(cfg.denoiser), None
    data = load_dataset(cfg, paths, normalizer)
    suite = bench.BenchSuite(bcfg, data, teacher, vocoder, cfg.schedule.build(), cfg.trainer, cfg.vwd, prov)
    rows = bench.run_suite(suite)
    out = bench.emit_report(rows, paths.bench)
    cfg.write(paths.bench / "config.txt")
    return {k: str(v) for k, v in out.items()}


def cmd_report(cfg: RunConfig, paths: Paths) -> dict:
    out = bench.regenerate_report(paths.bench)
    print(out["table1"].read_text(), end="")
    print(out["table3"].read_text(), end="")
    return {k: str(v) for k, v in out.items()}


def cmd_dump_arch(cfg: RunConfig, paths: Paths) -> dict:
    depths = range(cfg.vocoder.n_stages + 1) if cfg.arch.all_depths else [cfg.trainer.vpfd_L]
    written = []
    for L in depths:
        try:
            head = build_vpfd(cfg.vocoder, L, cfg.trainer.channel_rule, cfg.trainer.resblocks_per_scale)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        text = dump_architecture(head)
        path = paths.arch / f"vpfd_L{L}.txt"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        print(text, end="")
        written.append(str(path))
    return {"files": written}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-vocoder": cmd_pretrain_vocoder,
    "pretrain-teacher": cmd_pretrain_teacher,
    "distill": cmd_distill,
    "convert": cmd_convert,
    "bench": cmd_bench,
    "report": cmd_report,
    "dump-arch": cmd_dump_arch,
}
HELP = {
    "gen-data": "synthesize the toy multi-speaker corpus",
    "pretrain-vocoder": "train the vocoder on corpus mels",
    "pretrain-teacher": "train the multi-step diffusion teacher",
    "distill": "adversarial one-step distillation of the teacher",
    "convert": "one-step voice conversion with the distilled student",
    "bench": "time/memory benchmark across discriminator variants",
    "report": "regenerate benchmark tables from raw rows",
    "dump-arch": "print the VPFD head structure",
}


def build_parser() -> argparse.ArgumentParser:
    epilog = help_text()
    parser = argparse.ArgumentParser(prog="vpfd", description=__doc__.split("\n\n")[0],
                                     formatter_class=argparse.RawDescriptionHelpFormatter, epilog=epilog)
    sub = parser.add_subparsers(dest="command", required=True, metavar="{" + ",".join(SUBCOMMANDS) + "}")
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=HELP[name], description=HELP[name], epilog=epilog,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="flat 'section.key = value' config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--root", help=f"run root (default ${ENV_ROOT} or ./runs)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _error_line(kind: str, code: int, exc: BaseException) -> str:
    obj = {"status": "error", "kind": kind, "exit_code": code, "message": str(exc)}
    for attr in ("path", "step"):
        if getattr(exc, attr, None) is not None:
            obj[attr] = getattr(exc, attr)
    return json.dumps(obj, sort_keys=True)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help or argparse usage errors
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        if cfg.run.threads > 0:
            torch.set_num_threads(cfg.run.threads)
        paths = Paths(resolve_root(args.root))
        result = COMMANDS[args.command](cfg, paths)
    except ConfigError as exc:
        print(_error_line("config", EXIT_CONFIG, exc), file=sys.stderr)
        return EXIT_CONFIG
    except WavFormatError as exc:
        print(_error_line("input", EXIT_CONFIG, exc), file=sys.stderr)
        return EXIT_CONFIG
    except (DependencyError, CheckpointError) as exc:
        print(_error_line("dependency", EXIT_DEPENDENCY, exc), file=sys.stderr)
        return EXIT_DEPENDENCY
    except NumericalError as exc:
        print(_error_line("numeric", EXIT_NUMERIC, exc), file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps({"status": "ok", "command": args.command, **result}, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
