"""Training-cost benchmark across discriminator variants.

Every variant shares the generator, data stream, seed and step count; only the
discriminator changes. Each row records

* wall time per ``steps`` training steps: the timed steps are split into
  ``reps`` consecutive blocks and the median per-step block time is scaled to
  ``steps`` (``warmup`` untimed steps run first),
* the peak resident-memory delta of the process while the variant trains,
* an analytic activation footprint: bytes of every convolution output on the
  discriminator path for one forward pass of the batch. It depends only on the
  configs, batch size and mel length.
"""

from __future__ import annotations

import csv
import gc
import logging
import math
import resource
import statistics
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .dataset import MelDataset
from .diffusion import Denoiser, NoiseSchedule
from .distill import DistillConfig, EvalFixture, build_discriminator, build_state, distill_step, student_generate
from .discriminators import VWDConfig
from .errors import DependencyError
from .metrics import log_spectral_distance, mel_l1, speaker_cosine
from .vocoder import Vocoder, VocoderConfig

logger = logging.getLogger(__name__)

BYTES_PER_ELEMENT = 4  # float32 activations

TABLE1_VARIANTS = ("vpfd0", "vpfd1", "vpfd2", "vpfd3", "vpfd4", "vwd")
TABLE3_VARIANTS = ("vwd", "vwd_early", "vwd_no_mpd", "vwd_no_mrd", "meld_small", "meld_large", "vpfd1")
DEFAULT_VARIANTS = ("vpfd0", "vpfd1", "vpfd2", "vpfd3", "vpfd4", "vwd", "vwd_no_mpd", "vwd_no_mrd",
                    "meld_small", "meld_large", "vwd_early")

DISPLAY = {
    "vwd": "VWD",
    "vwd_no_mpd": "VWD w/o MPD",
    "vwd_no_mrd": "VWD w/o MRD",
    "meld_small": "MelD small",
    "meld_large": "MelD large",
}


def display_name(variant: str) -> str:
    base, early = (variant[: -len("_early")], True) if variant.endswith("_early") else (variant, False)
    name = f"VPFD_{base[4:]}" if base.startswith("vpfd") else DISPLAY.get(base, base)
    return f"{name} early" if early else name


def variant_overrides(variant: str) -> tuple[dict, bool]:
    """``DistillConfig`` overrides for a variant name and whether it is step-capped."""
    early = variant.endswith("_early")
    base = variant[: -len("_early")] if early else variant
    if base.startswith("vpfd"):
        try:
            return {"discriminator": "vpfd", "vpfd_L": int(base[4:])}, early
        except ValueError:
            raise ValueError(f"unknown variant {variant!r}") from None
    if base not in DISPLAY:
        raise ValueError(f"unknown variant {variant!r}")
    return {"discriminator": base}, early


@dataclass
class BenchConfig:
    steps: int = 200
    batch_size: int = 8
    frames: int = 128
    warmup: int = 2
    reps: int = 3
    early_fraction: float = 0.1
    seed: int = 0
    variants: tuple = DEFAULT_VARIANTS
    quality: bool = True
    pretrained: bool = True  # CLI: load vocoder/teacher checkpoints; false times random-init models

    def __post_init__(self):
        self.variants = tuple(self.variants)
        if self.steps < 0 or self.warmup < 0 or self.batch_size < 1 or self.frames < 1:
            raise ValueError("steps/warmup must be >= 0, batch_size/frames >= 1")
        if self.reps < 3:
            raise ValueError(f"reps must be >= 3, got {self.reps}")
        if not 0 < self.early_fraction <= 1:
            raise ValueError("early_fraction must be in (0, 1]")
        for v in self.variants:
            variant_overrides(v)


@dataclass
class BenchRow:
    variant: str
    status: str = "ok"
    steps: int = 0
    wall_time: float = 0.0  # seconds per ``steps`` steps
    rep_times: str = ""  # per-step seconds of each block, ';'-joined
    peak_rss_delta: int = 0  # bytes
    analytic_footprint: int = 0  # bytes
    # quality columns stay NaN when not measured
    mel_l1_teacher: float = math.nan
    lsd_teacher: float = math.nan
    speaker_cosine: float = math.nan
    error: str = ""

    def __post_init__(self):
        for name in ("steps", "wall_time", "peak_rss_delta", "analytic_footprint"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @property
    def name(self) -> str:
        return display_name(self.variant)


@dataclass
class BenchSuite:
    """Shared generator, data and discriminator configs for all variants."""

    cfg: BenchConfig
    data: MelDataset
    teacher: Denoiser
    vocoder: Vocoder
    sched: NoiseSchedule
    distill: DistillConfig = field(default_factory=DistillConfig)
    vwd: VWDConfig = field(default_factory=VWDConfig)
    providers: object = None

    def distill_config(self, variant: str) -> DistillConfig:
        over, _ = variant_overrides(variant)
        return replace(self.distill, batch_size=self.cfg.batch_size, segment_frames=self.cfg.frames,
                       eval_batch=self.cfg.batch_size, seed=self.cfg.seed, **over)

    def step_budget(self, variant: str) -> int:
        _, early = variant_overrides(variant)
        if early and self.cfg.steps:
            return max(1, round(self.cfg.steps * self.cfg.early_fraction))
        return self.cfg.steps


# --------------------------------------------------------------------------- memory


def _proc_status_kb(key: str) -> int | None:
    try:
        for line in Path("/proc/self/status").read_text().splitlines():
            if line.startswith(key + ":"):
                return int(line.split()[1])
    except OSError:
        return None
    return None


def reset_peak_rss() -> bool:
    """Reset the kernel's high-water mark; ``False`` where that is unsupported."""
    try:
        Path("/proc/self/clear_refs").write_text("5")
        return True
    except OSError:
        return False


def current_rss() -> int:
    kb = _proc_status_kb("VmRSS")
    return 1024 * kb if kb is not None else peak_rss()


def peak_rss() -> int:
    kb = _proc_status_kb("VmHWM")
    if kb is None:
        kb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    return 1024 * kb


# --------------------------------------------------------------------------- analytic footprint


CONV_TYPES = (nn.Conv1d, nn.Conv2d, nn.ConvTranspose1d)


def analytic_footprint(vocoder_cfg: VocoderConfig, variant: str, batch_size: int, frames: int,
                       vwd_cfg: VWDConfig | None = None, n_mels: int = 80) -> int:
    """Bytes of all convolution outputs along the discriminator path for one forward pass.

    Built from configs alone (random weights, zero input), so the value is
    machine independent.
    """
    over, _ = variant_overrides(variant)
    cfg = DistillConfig(**over)
    with torch.random.fork_rng():
        torch.manual_seed(0)
        disc = build_discriminator(cfg, Vocoder(vocoder_cfg), None, vwd_cfg)
    total = 0

    def hook(_module, _inputs, output):
        nonlocal total
        total += output.numel() * BYTES_PER_ELEMENT

    handles = [m.register_forward_hook(hook) for m in disc.modules() if isinstance(m, CONV_TYPES)]
    try:
        with torch.no_grad():
            disc(torch.zeros(batch_size, n_mels, frames))
    finally:
        for h in handles:
            h.remove()
    return total


# --------------------------------------------------------------------------- measurement


def _split(n: int, parts: int) -> list[int]:
    base, extra = divmod(n, parts)
    return [base + (i < extra) for i in range(parts)]


@torch.no_grad()
def _quality(suite: BenchSuite, state, fixture: EvalFixture) -> dict:
    x_g = student_generate(fixture.x, fixture.s, fixture.p, state.student, state.sched, state.t_s,
                           noise=fixture.noise, mode=state.cfg.one_step)
    denorm = suite.data.normalizer.denormalize
    out = {"mel_l1_teacher": mel_l1(x_g, fixture.teacher_ref)}
    wav_g = suite.vocoder(denorm(x_g))[:, 0]
    wav_t = suite.vocoder(denorm(fixture.teacher_ref))[:, 0]
    out["lsd_teacher"] = log_spectral_distance(wav_g, wav_t)
    if suite.providers is not None:
        emb_g = suite.providers.embed_speaker(denorm(x_g))
        emb_r = suite.providers.embed_speaker(denorm(fixture.x))
        out["speaker_cosine"] = float(np.mean([speaker_cosine(a, b) for a, b in zip(emb_g, emb_r)]))
    return out


def measure_variant(variant: str, steps: int, suite: BenchSuite) -> BenchRow:
    """Train ``variant`` for ``steps`` timed steps and return its cost row.

    A variant that fails to build or train yields a row with ``status="failed"``.
    """
    cfg = suite.cfg
    try:
        footprint = analytic_footprint(suite.vocoder.cfg, variant, cfg.batch_size, cfg.frames, suite.vwd,
                                       suite.data.mel_cfg.n_mels)
        dcfg = suite.distill_config(variant)
        gc.collect()
        reset_peak_rss()
        rss0 = current_rss()
        state = build_state(dcfg, suite.teacher, suite.vocoder, suite.sched, suite.data.normalizer, suite.vwd)
        rng = np.random.default_rng(cfg.seed)
        for _ in range(cfg.warmup if steps else 0):
            distill_step(suite.data.sample(rng, cfg.batch_size, cfg.frames), state)
        blocks = [b for b in _split(steps, cfg.reps) if b]
        per_step = []
        for n in blocks:
            batches = [suite.data.sample(rng, cfg.batch_size, cfg.frames) for _ in range(n)]
            t0 = time.perf_counter()
            for batch in batches:
                distill_step(batch, state)
            per_step.append((time.perf_counter() - t0) / n)
        peak = max(0, peak_rss() - rss0)
        quality = {}
        if cfg.quality and steps:
            quality = _quality(suite, state, EvalFixture.build(suite.data, state))
        wall = statistics.median(per_step) * steps if per_step else 0.0
        row = BenchRow(variant, "ok", steps, wall, ";".join(repr(t) for t in per_step), peak, footprint, **quality)
    except (RuntimeError, ValueError, FloatingPointError) as exc:
        logger.warning("variant %s failed: %s", variant, exc)
        row = BenchRow(variant, "failed", steps, error=f"{type(exc).__name__}: {exc}")
    logger.info("bench %s: %.2fs / %d steps, footprint %d B", variant, row.wall_time, steps, row.analytic_footprint)
    return row


def run_suite(suite: BenchSuite) -> list[BenchRow]:
    """Variants are measured sequentially in one process."""
    return [measure_variant(v, suite.step_budget(v), suite) for v in suite.cfg.variants]


# --------------------------------------------------------------------------- report

ROW_FIELDS = tuple(f.name for f in fields(BenchRow))
_INT_FIELDS = {"steps", "peak_rss_delta", "analytic_footprint"}
_FLOAT_FIELDS = {"wall_time", "mel_l1_teacher", "lsd_teacher", "speaker_cosine"}


class EmptySuiteError(DependencyError):
    pass


def write_raw_rows(rows, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=ROW_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in asdict(r).items()})
    return path


def read_raw_rows(path) -> list[BenchRow]:
    path = Path(path)
    if not path.exists():
        raise EmptySuiteError(f"empty bench suite: {path} does not exist; run `bench` first", path, "bench")
    with path.open(newline="") as f:
        rows = []
        for d in csv.DictReader(f):
            kw = {k: int(v) if k in _INT_FIELDS else float(v) if k in _FLOAT_FIELDS else v for k, v in d.items()}
            rows.append(BenchRow(**kw))
    if not rows:
        raise EmptySuiteError(f"empty bench suite: {path} has no rows", path, "bench")
    return rows


def _fmt_time(r: BenchRow) -> str:
    return f"{r.wall_time:.3f}" if r.status == "ok" else "failed"


def _fmt_quality(v: float, digits: int) -> str:
    return "-" if math.isnan(v) else f"{v:.{digits}f}"


def _table(rows, order, title) -> str:
    by = {r.variant: r for r in rows}
    picked = [by[v] for v in order if v in by]
    header = ("variant", "steps", "time_s", "footprint_MB", "peak_rss_MB", "mel_l1_teacher", "lsd_dB", "spk_cos")
    body = [
        (
            r.name, str(r.steps), _fmt_time(r), f"{r.analytic_footprint / 2**20:.2f}", f"{r.peak_rss_delta / 2**20:.1f}",
            _fmt_quality(r.mel_l1_teacher, 4), _fmt_quality(r.lsd_teacher, 3), _fmt_quality(r.speaker_cosine, 4),
        )
        for r in picked
    ]
    widths = [max(len(c) for c in col) for col in zip(header, *body)]
    lines = [title, "  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(row, widths))) for row in body]
    return "\n".join(lines) + "\n"


RATIOS = (
    ("time", "vwd", "vpfd1"),
    ("time", "vwd", "vpfd0"),
    ("time", "vpfd4", "vpfd1"),
    ("footprint", "vwd", "vpfd1"),
    ("footprint", "vpfd4", "vpfd1"),
    ("peak_rss", "vwd", "vpfd1"),
)
_RATIO_FIELD = {"time": "wall_time", "footprint": "analytic_footprint", "peak_rss": "peak_rss_delta"}


def ratio_rows(rows) -> list[dict]:
    by = {r.variant: r for r in rows if r.status == "ok"}
    out = []
    for metric, num, den in RATIOS:
        if num in by and den in by:
            a, b = getattr(by[num], _RATIO_FIELD[metric]), getattr(by[den], _RATIO_FIELD[metric])
            out.append({"metric": metric, "numerator": num, "denominator": den,
                        "numerator_value": a, "denominator_value": b, "ratio": a / b if b else math.inf})
    return out


def emit_report(rows, out_dir) -> dict:
    """Write the raw rows, two aligned text tables and the ratio CSV; returns the paths."""
    rows = list(rows)
    names = [r.variant for r in rows]
    if len(set(names)) != len(names):
        raise ValueError("each variant must appear exactly once")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"raw_rows": write_raw_rows(rows, out_dir / "raw_rows.csv")}
    paths["table1"] = out_dir / "table1_like.txt"
    paths["table1"].write_text(_table(rows, TABLE1_VARIANTS, "Cost vs. extractor depth (time per run, activation footprint)"))
    paths["table3"] = out_dir / "table3_like.txt"
    paths["table3"].write_text(_table(rows, TABLE3_VARIANTS, "Waveform and mel discriminator variants"))
    paths["ratios"] = out_dir / "ratios.csv"
    with paths["ratios"].open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=("metric", "numerator", "denominator", "numerator_value", "denominator_value", "ratio"),
                           lineterminator="\n")
        w.writeheader()
        for r in ratio_rows(rows):
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return paths


def regenerate_report(bench_dir, out_dir=None) -> dict:
    bench_dir = Path(bench_dir)
    return emit_report(read_raw_rows(bench_dir / "raw_rows.csv"), out_dir or bench_dir)
