"""One-step student distillation with adversarial and score-distillation losses."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .audio import MelConfig, MelExtractor, Waveform
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import MelDataset, MelNormalizer
from .diffusion import Denoiser, DenoiserConfig, NoiseSchedule, diffuse, multi_step_reverse, reverse_step
from .discriminators import (
    MELD_PRESETS,
    Discriminator,
    MelDConfig,
    MelDDiscriminator,
    VPFDConfig,
    VPFDDiscriminator,
    VWDConfig,
    VWDDiscriminator,
)
from .errors import NumericalError
from .losses import LossReport, LossWeights, append_loss_rows, feature_matching, lsgan_d, lsgan_g, score_distillation, total_d, total_g
from .metrics import mel_l1
from .vocoder import Vocoder

logger = logging.getLogger(__name__)

DISCRIMINATORS = ("vpfd", "vwd", "vwd_no_mpd", "vwd_no_mrd", "meld_small", "meld_large")


@dataclass
class DistillConfig:
    epochs: int = 100
    max_steps: int = 0  # 0: no cap
    batch_size: int = 32
    learning_rate: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.9
    discriminator: str = "vpfd"
    vpfd_L: int = 1
    channel_rule: str = "match"
    resblocks_per_scale: int = 1
    extractor_pretrained: bool = True
    extractor_frozen: bool = True
    student_t: int = 0  # 0: T
    one_step: str = "collapsed"  # "collapsed" | "literal"
    segment_frames: int = 64
    lambda_fm: float = 2.0
    lambda_distill: float = 45.0
    distill_norm: str = "l1"
    eval_every: int = 50
    eval_batch: int = 8
    eval_steps: int = 10
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.discriminator not in DISCRIMINATORS:
            raise ValueError(f"discriminator must be one of {DISCRIMINATORS}, got {self.discriminator!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.segment_frames < 1 or self.max_steps < 0:
            raise ValueError("epochs/max_steps must be >= 0 and batch_size/segment_frames >= 1")
        if self.one_step not in ("collapsed", "literal"):
            raise ValueError(f"one_step must be 'collapsed' or 'literal', got {self.one_step!r}")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_fm, self.lambda_distill)

    @property
    def variant(self) -> str:
        return f"vpfd{self.vpfd_L}" if self.discriminator == "vpfd" else self.discriminator


# --------------------------------------------------------------------------- generation


def one_step_schedule(sched: NoiseSchedule, mode: str = "collapsed") -> NoiseSchedule:
    return sched.collapsed() if mode == "collapsed" else sched


def student_generate(x_r, s, p, student, sched: NoiseSchedule, t_s: int, noise=None, generator=None, mode="collapsed"):
    """Diffuse ``x_r`` to ``t_s`` and apply a single reverse step with the student."""
    sched.check_t(t_s)
    if noise is None:
        noise = torch.randn(x_r.shape, generator=generator, dtype=x_r.dtype)
    t = torch.full((x_r.shape[0],), t_s, dtype=torch.long) if x_r.dim() == 3 else t_s
    x_t = diffuse(x_r, t, noise, sched)
    return reverse_step(x_t, t, s, p, student, one_step_schedule(sched, mode))


def init_student(teacher: Denoiser) -> Denoiser:
    student = copy.deepcopy(teacher)
    student.requires_grad_(True)
    return student


def build_discriminator(cfg: DistillConfig, vocoder: Vocoder | None, normalizer: MelNormalizer | None,
                        vwd_cfg: VWDConfig | None = None) -> Discriminator:
    denorm = normalizer.denormalize if normalizer is not None else None
    vwd_cfg = vwd_cfg or VWDConfig()
    kind = cfg.discriminator
    if kind.startswith("meld"):
        return MelDDiscriminator(MelDConfig(MELD_PRESETS[kind.split("_")[1]]), denorm)
    if vocoder is None:
        raise ValueError(f"discriminator {kind!r} needs a vocoder")
    if kind == "vpfd":
        source = vocoder if cfg.extractor_pretrained else Vocoder(vocoder.cfg)
        return VPFDDiscriminator(
            source, VPFDConfig(cfg.vpfd_L, cfg.channel_rule, cfg.resblocks_per_scale), cfg.extractor_frozen, denorm
        )
    if kind == "vwd_no_mpd":
        vwd_cfg = VWDConfig(periods=(), resolutions=vwd_cfg.resolutions, mpd_channels=vwd_cfg.mpd_channels, mrd_channels=vwd_cfg.mrd_channels)
    elif kind == "vwd_no_mrd":
        vwd_cfg = VWDConfig(periods=vwd_cfg.periods, resolutions=(), mpd_channels=vwd_cfg.mpd_channels, mrd_channels=vwd_cfg.mrd_channels)
    return VWDDiscriminator(vocoder, vwd_cfg, denorm)


# --------------------------------------------------------------------------- training


@dataclass
class DistillState:
    cfg: DistillConfig
    teacher: Denoiser
    student: Denoiser
    disc: Discriminator
    sched: NoiseSchedule
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    generator: torch.Generator
    step: int = 0

    @property
    def t_s(self) -> int:
        return self.cfg.student_t or self.sched.T


def build_state(cfg: DistillConfig, teacher: Denoiser, vocoder: Vocoder | None, sched: NoiseSchedule,
                normalizer: MelNormalizer | None = None, vwd_cfg: VWDConfig | None = None) -> DistillState:
    torch.manual_seed(cfg.seed)
    teacher = copy.deepcopy(teacher).requires_grad_(False)
    student = init_student(teacher)
    disc = build_discriminator(cfg, vocoder, normalizer, vwd_cfg)
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    opt_g = torch.optim.Adam(student.parameters(), cfg.learning_rate, betas=betas)
    opt_d = torch.optim.Adam(disc.trainable_parameters(), cfg.learning_rate, betas=betas)
    return DistillState(cfg, teacher, student, disc, sched, opt_g, opt_d, torch.Generator().manual_seed(cfg.seed))


def _finite(name, value, state):
    if not torch.isfinite(value):
        raise NumericalError(f"{name} is not finite at step {state.step + 1}")


def distill_step(batch, state: DistillState) -> LossReport:
    """One discriminator update, then one generator update."""
    cfg, sched, gen = state.cfg, state.sched, state.generator
    x_r, s, p = batch
    d_params = state.disc.trainable_parameters()

    x_g = student_generate(x_r, s, p, state.student, sched, state.t_s, generator=gen, mode=cfg.one_step)

    state.opt_d.zero_grad(set_to_none=True)
    d_loss = total_d(lsgan_d(state.disc(x_r), state.disc(x_g.detach())))
    _finite("discriminator loss", d_loss, state)
    d_loss.backward()
    state.opt_d.step()

    for q in d_params:
        q.requires_grad_(False)
    try:
        state.opt_g.zero_grad(set_to_none=True)
        fake = state.disc(x_g)
        with torch.no_grad():
            real = state.disc(x_r)
        adv = lsgan_g(fake)
        fm = feature_matching(real, fake)
        t = torch.randint(1, sched.T + 1, (x_r.shape[0],), generator=gen)
        eps = torch.randn(x_r.shape, generator=gen)
        with torch.no_grad():
            x_phi_t = diffuse(x_g.detach(), t, eps, sched)
            x_theta = reverse_step(x_phi_t, t, s, p, state.teacher, one_step_schedule(sched, cfg.one_step))
        distill = score_distillation(x_g, x_theta, t, sched, cfg.distill_norm)
        g_total = total_g(adv, fm, distill, cfg.weights)
        _finite("generator loss", g_total, state)
        g_total.backward()
        state.opt_g.step()
    finally:
        for q in d_params:
            q.requires_grad_(True)
    state.step += 1
    return LossReport(state.step, d_loss.item(), adv.item(), fm.item(), distill.item(), g_total.item())


@dataclass
class EvalFixture:
    """Fixed held-out batch and noise, so proxy metrics are comparable across steps."""

    x: torch.Tensor
    s: torch.Tensor
    p: torch.Tensor
    noise: torch.Tensor
    teacher_ref: torch.Tensor

    @classmethod
    def build(cls, data: MelDataset, state: DistillState, seed: int = 12345):
        cfg = state.cfg
        rng = np.random.default_rng(seed)
        x, s, p = data.sample(rng, cfg.eval_batch, cfg.segment_frames)
        noise = torch.randn(x.shape, generator=torch.Generator().manual_seed(seed))
        t = torch.full((x.shape[0],), state.t_s, dtype=torch.long)
        x_t = diffuse(x, t, noise, state.sched)
        ref = multi_step_reverse(x_t, s, p, state.teacher, state.sched, cfg.eval_steps, t_start=state.t_s)
        return cls(x, s, p, noise, ref)

    @torch.no_grad()
    def evaluate(self, state: DistillState) -> dict:
        x_g = student_generate(self.x, self.s, self.p, state.student, state.sched, state.t_s, noise=self.noise, mode=state.cfg.one_step)
        return {"mel_l1_teacher": mel_l1(x_g, self.teacher_ref), "mel_l1_real": mel_l1(x_g, self.x)}


@dataclass
class StudentCheckpoint:
    student: Denoiser
    config: dict
    history: list = field(default_factory=list)
    loss_log: list = field(default_factory=list)
    discriminator: Discriminator | None = None  # trained discriminator; not part of the student file

    def save(self, path):
        return save_checkpoint(path, "student", self.student.state_dict(), self.config, {"history": self.history})


def load_student(path) -> StudentCheckpoint:
    ckpt = load_checkpoint(path, kind="student")
    student = Denoiser(DenoiserConfig(**ckpt.config["denoiser"]))
    student.load_state_dict(ckpt.tensors)
    return StudentCheckpoint(student, ckpt.config, ckpt.meta.get("history", []))


def run_distillation(cfg: DistillConfig, data: MelDataset, teacher: Denoiser, vocoder: Vocoder | None,
                     sched: NoiseSchedule, run_dir=None, vwd_cfg: VWDConfig | None = None,
                     extra_config: dict | None = None) -> StudentCheckpoint:
    """Epoch loop over shuffled segments; evaluates proxies every ``eval_every`` steps."""
    state = build_state(cfg, teacher, vocoder, sched, data.normalizer, vwd_cfg)
    run_dir = Path(run_dir) if run_dir is not None else None
    config = {
        "distill": asdict(cfg),
        "denoiser": teacher.cfg.to_dict(),
        "normalizer": data.normalizer.to_dict(),
        **(extra_config or {}),
    }
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
        log_path = run_dir / "loss_log.csv"
        if log_path.exists():
            log_path.unlink()
    fixture = EvalFixture.build(data, state)
    history = [{"step": 0, **fixture.evaluate(state)}]
    reports = []
    rng = np.random.default_rng(cfg.seed)
    done = False
    try:
        for epoch in range(cfg.epochs):
            for batch in data.epoch(rng, cfg.batch_size, cfg.segment_frames):
                rep = distill_step(batch, state)
                reports.append(rep)
                if run_dir is not None:
                    append_loss_rows(run_dir / "loss_log.csv", [rep])
                if cfg.eval_every and state.step % cfg.eval_every == 0:
                    history.append({"step": state.step, **fixture.evaluate(state)})
                    logger.info("distill step %d %s", state.step, history[-1])
                if cfg.checkpoint_every and run_dir is not None and state.step % cfg.checkpoint_every == 0:
                    StudentCheckpoint(state.student, config, history).save(run_dir / f"student_{state.step:06d}.safetensors")
                if cfg.max_steps and state.step >= cfg.max_steps:
                    done = True
                    break
            if done:
                break
    except NumericalError:
        if run_dir is not None:
            StudentCheckpoint(state.student, config, history).save(run_dir / "last_good.safetensors")
        raise
    if history[-1]["step"] != state.step:
        history.append({"step": state.step, **fixture.evaluate(state)})
    result = StudentCheckpoint(state.student, config, history, reports, state.disc)
    if run_dir is not None:
        result.save(run_dir / "student.safetensors")
        save_checkpoint(run_dir / "discriminator.safetensors", "discriminator", state.disc.state_dict(),
                        {"discriminator": cfg.discriminator, "vpfd_L": cfg.vpfd_L})
        (run_dir / "report.json").write_text(json.dumps({"history": history}, indent=2, sort_keys=True) + "\n")
    return result


# --------------------------------------------------------------------------- inference


@torch.no_grad()
def convert(source: Waveform, target: Waveform, student: Denoiser, vocoder: Vocoder, providers,
            normalizer: MelNormalizer, mel_cfg: MelConfig, sched: NoiseSchedule, t_s: int | None = None,
            seed: int = 0, mode: str = "collapsed") -> Waveform:
    """Content and starting point from ``source``, speaker embedding from ``target``."""
    extractor = MelExtractor(mel_cfg)
    src_mel = extractor(torch.from_numpy(source.samples)[None])
    tgt_mel = extractor(torch.from_numpy(target.samples)[None])
    s = providers.embed_speaker(tgt_mel)
    p = providers.embed_content(src_mel)
    x_r = normalizer.normalize(src_mel)
    x_g = student_generate(x_r, s, p, student, sched, t_s or sched.T,
                           generator=torch.Generator().manual_seed(seed), mode=mode)
    wav = vocoder(normalizer.denormalize(x_g))[0, 0]
    n = len(source)
    wav = wav[:n] if wav.shape[-1] >= n else torch.nn.functional.pad(wav, (0, n - wav.shape[-1]))
    return Waveform(wav.numpy(), source.sample_rate)
