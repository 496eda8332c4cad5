"""HiFi-GAN style generator with tap points after each upsampling stage.

Level 0 of the feature pyramid is the output of the input convolution; level
``l`` is the output of the ``l``-th upsampling stage.  With ``tap="stage"`` a
stage ends after its residual blocks; with ``tap="upsample"`` the level is taken
right after the transposed convolution.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.parametrizations import weight_norm

from .audio import MelConfig, MelExtractor
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import NumericalError

logger = logging.getLogger(__name__)

LRELU_SLOPE = 0.1


@dataclass
class VocoderConfig:
    upsample_rates: tuple = (4, 4, 2, 2)
    base_channels: int = 32  # 512 at full scale
    resblock_kernel_sizes: tuple = (3, 7)
    resblock_dilations: tuple = ((1, 3), (1, 3))
    input_mels: int = 80
    io_kernel_size: int = 7
    tap: str = "stage"  # "stage" | "upsample"

    def __post_init__(self):
        self.upsample_rates = tuple(int(r) for r in self.upsample_rates)
        self.resblock_kernel_sizes = tuple(int(k) for k in self.resblock_kernel_sizes)
        self.resblock_dilations = tuple(tuple(int(d) for d in ds) for ds in self.resblock_dilations)
        if any(r < 2 for r in self.upsample_rates):
            raise ValueError(f"upsample rates must be >= 2, got {self.upsample_rates}")
        if len(self.resblock_kernel_sizes) != len(self.resblock_dilations):
            raise ValueError("one dilation list per resblock kernel size")
        if self.base_channels % (2 ** self.n_stages):
            raise ValueError("base_channels must be divisible by 2**n_stages")
        if self.tap not in ("stage", "upsample"):
            raise ValueError(f"tap must be 'stage' or 'upsample', got {self.tap!r}")

    @property
    def n_stages(self) -> int:
        return len(self.upsample_rates)

    @property
    def hop(self) -> int:
        return int(np.prod(self.upsample_rates))

    def channels(self, level: int) -> int:
        """Channel count of pyramid level ``level`` (halves per stage)."""
        return self.base_channels // (2**level)

    def length(self, level: int, n_frames: int) -> int:
        return n_frames * int(np.prod(self.upsample_rates[:level]))

    def check_mel(self, mel_cfg: MelConfig):
        if mel_cfg.hop != self.hop:
            raise ValueError(f"vocoder upsamples by {self.hop} but mel hop is {mel_cfg.hop}")
        if mel_cfg.n_mels != self.input_mels:
            raise ValueError(f"vocoder expects {self.input_mels} mel bins, mel config has {mel_cfg.n_mels}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["upsample_rates"] = list(self.upsample_rates)
        d["resblock_kernel_sizes"] = list(self.resblock_kernel_sizes)
        d["resblock_dilations"] = [list(x) for x in self.resblock_dilations]
        return d


# rates/channels of the public HiFi-GAN V1 configuration
FULL_VOCODER = dict(
    upsample_rates=(8, 8, 2, 2),
    base_channels=512,
    resblock_kernel_sizes=(3, 7, 11),
    resblock_dilations=((1, 3, 5), (1, 3, 5), (1, 3, 5)),
)


def conv1d(cin, cout, k, dilation=1, stride=1, padding=None):
    if padding is None:
        padding = (k * dilation - dilation) // 2
    return weight_norm(nn.Conv1d(cin, cout, k, stride=stride, dilation=dilation, padding=padding))


class ResBlock(nn.Module):
    """HiFi-GAN V1 residual block: per dilation a dilated conv and a plain conv."""

    def __init__(self, channels, kernel_size, dilations):
        super().__init__()
        self.convs1 = nn.ModuleList([conv1d(channels, channels, kernel_size, d) for d in dilations])
        self.convs2 = nn.ModuleList([conv1d(channels, channels, kernel_size, 1) for _ in dilations])

    def forward(self, x):
        for c1, c2 in zip(self.convs1, self.convs2):
            xt = c2(F.leaky_relu(c1(F.leaky_relu(x, LRELU_SLOPE)), LRELU_SLOPE))
            x = x + xt
        return x


class UpsampleStage(nn.Module):
    def __init__(self, cin, cout, rate, kernel_sizes, dilations):
        super().__init__()
        self.rate = rate
        self.up = weight_norm(
            nn.ConvTranspose1d(cin, cout, 2 * rate, rate, padding=rate // 2 + rate % 2, output_padding=rate % 2)
        )
        self.blocks = nn.ModuleList([ResBlock(cout, k, d) for k, d in zip(kernel_sizes, dilations)])

    def upsample(self, x):
        return self.up(F.leaky_relu(x, LRELU_SLOPE))

    def refine(self, x):
        return sum(b(x) for b in self.blocks) / len(self.blocks)

    def forward(self, x):
        return self.refine(self.upsample(x))


def _init_weights(m):
    if isinstance(m, (nn.Conv1d, nn.ConvTranspose1d)):
        m.weight.data.normal_(0.0, 0.01)


class Vocoder(nn.Module):
    def __init__(self, cfg: VocoderConfig):
        super().__init__()
        self.cfg = cfg
        k = cfg.io_kernel_size
        self.conv_pre = nn.Conv1d(cfg.input_mels, cfg.channels(0), k, padding=k // 2)
        self.stages = nn.ModuleList(
            UpsampleStage(
                cfg.channels(i), cfg.channels(i + 1), r, cfg.resblock_kernel_sizes, cfg.resblock_dilations
            )
            for i, r in enumerate(cfg.upsample_rates)
        )
        self.conv_post = nn.Conv1d(cfg.channels(cfg.n_stages), 1, k, padding=k // 2)
        self.apply(_init_weights)
        self.conv_pre = weight_norm(self.conv_pre)
        self.conv_post = weight_norm(self.conv_post)

    def _check(self, mel):
        if mel.dim() != 3 or mel.shape[1] != self.cfg.input_mels:
            raise ValueError(f"expected mel of shape (B, {self.cfg.input_mels}, F), got {tuple(mel.shape)}")

    def pyramid(self, mel: torch.Tensor, depth: int | None = None) -> list[torch.Tensor]:
        """Feature levels ``0..depth`` (default: all stages)."""
        self._check(mel)
        depth = self.cfg.n_stages if depth is None else depth
        if not 0 <= depth <= self.cfg.n_stages:
            raise ValueError(f"L must be in [0, {self.cfg.n_stages}], got {depth}")
        x = self.conv_pre(mel)
        levels = [x]
        for i in range(depth):
            stage = self.stages[i]
            x = stage.upsample(x)
            if self.cfg.tap == "upsample":
                levels.append(x)
                if i + 1 < depth:
                    x = stage.refine(x)
            else:
                x = stage.refine(x)
                levels.append(x)
        return levels

    def head_out(self, top: torch.Tensor) -> torch.Tensor:
        """Output layers applied to the top (full-rate) level."""
        if self.cfg.tap == "upsample":
            top = self.stages[-1].refine(top)
        # slope 0.01 as in the official HiFi-GAN output layer
        return torch.tanh(self.conv_post(F.leaky_relu(top)))

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        return self.head_out(self.pyramid(mel)[-1])

    def truncated(self, depth: int) -> "FeatureExtractor":
        return FeatureExtractor(self, depth)


class FeatureExtractor(nn.Module):
    """Independent copy of the vocoder prefix up to the ``depth``-th upsampling layer."""

    def __init__(self, vocoder: Vocoder, depth: int):
        super().__init__()
        if not 0 <= depth <= vocoder.cfg.n_stages:
            raise ValueError(f"L must be in [0, {vocoder.cfg.n_stages}], got {depth}")
        self.cfg = vocoder.cfg
        self.depth = depth
        self.conv_pre = copy.deepcopy(vocoder.conv_pre)
        self.stages = nn.ModuleList(copy.deepcopy(vocoder.stages[i]) for i in range(depth))
        if self.cfg.tap == "upsample" and depth > 0:
            # the last stage's residual blocks are never run
            self.stages[-1].blocks = nn.ModuleList()

    def forward(self, mel: torch.Tensor) -> list[torch.Tensor]:
        x = self.conv_pre(mel)
        levels = [x]
        for i, stage in enumerate(self.stages):
            x = stage.upsample(x)
            if self.cfg.tap == "upsample":
                levels.append(x)
                if i + 1 < self.depth:
                    x = stage.refine(x)
            else:
                x = stage.refine(x)
                levels.append(x)
        return levels


def synthesize(mel: torch.Tensor, vocoder: Vocoder) -> torch.Tensor:
    """Waveform of ``F * hop`` samples; accepts ``(n_mels, F)`` or ``(B, n_mels, F)``."""
    single = mel.dim() == 2
    if single:
        mel = mel.unsqueeze(0)
    wav = vocoder(mel)[:, 0]
    return wav[0] if single else wav


def extract_features(mel: torch.Tensor, L: int, vocoder: Vocoder) -> list[torch.Tensor]:
    if mel.dim() == 2:
        return [lv[0] for lv in vocoder.pyramid(mel.unsqueeze(0), L)]
    return vocoder.pyramid(mel, L)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def expected_parameter_count(cfg: VocoderConfig) -> int:
    """Closed-form parameter count, including weight-norm magnitudes."""

    def conv(cin, cout, k):  # weight + bias + g (one per output channel)
        return cin * cout * k + cout + cout

    k = cfg.io_kernel_size
    total = conv(cfg.input_mels, cfg.channels(0), k)
    for i, r in enumerate(cfg.upsample_rates):
        cin, cout = cfg.channels(i), cfg.channels(i + 1)
        total += cin * cout * 2 * r + cout + cin  # transposed conv: g lives on dim 0 (= cin)
        for ks, ds in zip(cfg.resblock_kernel_sizes, cfg.resblock_dilations):
            total += 2 * len(ds) * conv(cout, cout, ks)
    total += conv(cfg.channels(cfg.n_stages), 1, k)
    return total


def receptive_field_frames(cfg: VocoderConfig) -> int:
    """Conservative one-sided receptive field of an output sample, in mel frames."""
    half = cfg.io_kernel_size // 2  # input conv, frames
    samples_per_frame = 1
    for r in cfg.upsample_rates:
        samples_per_frame *= r
        half += 1  # transposed conv with kernel 2r touches one neighbour frame each side
        per_block = max(sum((k - 1) * d // 2 + (k - 1) // 2 for d in ds) for k, ds in zip(cfg.resblock_kernel_sizes, cfg.resblock_dilations))
        half += math.ceil(per_block / samples_per_frame)
    half += math.ceil((cfg.io_kernel_size // 2) / samples_per_frame)
    return half


# --------------------------------------------------------------------------- pretraining


@dataclass
class VocoderTrainConfig:
    steps: int = 2000
    batch_size: int = 8
    segment_frames: int = 32
    learning_rate: float = 1e-3
    adam_beta1: float = 0.8
    adam_beta2: float = 0.99
    mel_weight: float = 1.0
    stft_weight: float = 1.0
    stft_resolutions: tuple = ((512, 128, 512), (1024, 256, 1024), (256, 64, 256))
    seed: int = 0
    log_every: int = 100


def stft_magnitude(x: torch.Tensor, n_fft: int, hop: int, win: int) -> torch.Tensor:
    spec = torch.stft(
        x, n_fft, hop, win, window=torch.hann_window(win, dtype=x.dtype), center=True, pad_mode="reflect",
        return_complex=True,
    )
    return torch.sqrt((spec.real**2 + spec.imag**2).clamp_min(1e-7))


def multi_resolution_stft_loss(fake: torch.Tensor, real: torch.Tensor, resolutions) -> torch.Tensor:
    """Spectral convergence plus log-magnitude L1, averaged over resolutions."""
    total = 0.0
    for n_fft, hop, win in resolutions:
        fm, rm = stft_magnitude(fake, n_fft, hop, win), stft_magnitude(real, n_fft, hop, win)
        sc = torch.linalg.norm(rm - fm, dim=(-2, -1)) / torch.linalg.norm(rm, dim=(-2, -1)).clamp_min(1e-7)
        mag = F.l1_loss(torch.log(fm), torch.log(rm))
        total = total + sc.mean() + mag
    return total / len(resolutions)


class SegmentSampler:
    """Seeded random crops of aligned (mel, audio) segments."""

    def __init__(self, mels, audios, segment_frames: int, hop: int, seed: int):
        self.mels = [m for m in mels]
        self.audios = audios
        self.segment_frames = segment_frames
        self.hop = hop
        self.rng = np.random.default_rng(seed)
        if any(m.shape[-1] < segment_frames for m in self.mels):
            raise ValueError("utterance shorter than the training segment")

    def batch(self, batch_size: int):
        idx = self.rng.integers(0, len(self.mels), size=batch_size)
        mels, audio = [], []
        for i in idx:
            n = self.mels[i].shape[-1] - self.segment_frames
            start = int(self.rng.integers(0, n + 1))
            mels.append(self.mels[i][:, start : start + self.segment_frames])
            a = self.audios[i][start * self.hop : (start + self.segment_frames) * self.hop]
            audio.append(F.pad(a, (0, self.segment_frames * self.hop - a.shape[-1])))
        return torch.stack(mels), torch.stack(audio)


def vocoder_reconstruction_loss(vocoder, mel_fn, mel, audio, tcfg: VocoderTrainConfig):
    fake = vocoder(mel)[:, 0]
    mel_l1 = F.l1_loss(mel_fn(fake), mel_fn(audio))
    stft = multi_resolution_stft_loss(fake, audio, tcfg.stft_resolutions)
    return tcfg.mel_weight * mel_l1 + tcfg.stft_weight * stft, mel_l1


def pretrain_vocoder(
    corpus,
    cfg: VocoderConfig,
    mel_cfg: MelConfig,
    tcfg: VocoderTrainConfig,
    vocoder: Vocoder | None = None,
    log_rows: list | None = None,
) -> tuple[Vocoder, dict]:
    """Train with mel L1 + multi-resolution STFT loss. Returns the vocoder and training metadata."""
    if not corpus:
        raise ValueError("empty corpus")
    cfg.check_mel(mel_cfg)
    torch.manual_seed(tcfg.seed)
    vocoder = vocoder if vocoder is not None else Vocoder(cfg)
    mel_fn = MelExtractor(mel_cfg)
    audios = [torch.from_numpy(item.wave.samples) for item in corpus]
    mels = [mel_fn(a.unsqueeze(0))[0] for a in audios]
    sampler = SegmentSampler(mels, audios, tcfg.segment_frames, cfg.hop, tcfg.seed)
    eval_mel, eval_audio = SegmentSampler(mels, audios, tcfg.segment_frames, cfg.hop, tcfg.seed + 1).batch(tcfg.batch_size)
    opt = torch.optim.Adam(vocoder.parameters(), tcfg.learning_rate, betas=(tcfg.adam_beta1, tcfg.adam_beta2))

    with torch.no_grad():
        _, init_l1 = vocoder_reconstruction_loss(vocoder, mel_fn, eval_mel, eval_audio, tcfg)
    loss = torch.tensor(float("nan"))
    for step in range(1, tcfg.steps + 1):
        mel, audio = sampler.batch(tcfg.batch_size)
        loss, mel_l1 = vocoder_reconstruction_loss(vocoder, mel_fn, mel, audio, tcfg)
        if not torch.isfinite(loss):
            raise NumericalError(f"vocoder pretraining diverged at step {step} (loss={loss.item()})")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log_rows is not None:
            log_rows.append({"step": step, "loss": loss.item(), "mel_l1": mel_l1.item()})
        if step % tcfg.log_every == 0:
            logger.info("vocoder step %d loss %.4f mel_l1 %.4f", step, loss.item(), mel_l1.item())
    with torch.no_grad():
        _, final_l1 = vocoder_reconstruction_loss(vocoder, mel_fn, eval_mel, eval_audio, tcfg)
    meta = {"steps": tcfg.steps, "init_mel_l1": init_l1.item(), "final_mel_l1": final_l1.item()}
    return vocoder, meta


def save_vocoder(path, vocoder: Vocoder, meta: dict | None = None):
    return save_checkpoint(path, "vocoder", vocoder.state_dict(), vocoder.cfg.to_dict(), meta)


def load_vocoder(path) -> tuple[Vocoder, Checkpoint]:
    ckpt = load_checkpoint(path, kind="vocoder")
    vocoder = Vocoder(VocoderConfig(**ckpt.config))
    vocoder.load_state_dict(ckpt.tensors)
    return vocoder, ckpt




def import_hifigan_state_dict(state: dict, cfg: VocoderConfig) -> Vocoder:
    """Load weights from the public HiFi-GAN generator layout (``conv_pre``, ``ups.i``,
    ``resblocks.j``, ``conv_post`` with legacy ``weight_g``/``weight_v`` names)."""
    vocoder = Vocoder(cfg)
    n_k = len(cfg.resblock_kernel_sizes)
    mapped = {}
    for key, value in state.items():
        parts = key.split(".")
        if parts[0] == "ups":
            i = int(parts[1])
            new = ["stages", str(i), "up"] + parts[2:]
        elif parts[0] == "resblocks":
            j = int(parts[1])
            new = ["stages", str(j // n_k), "blocks", str(j % n_k)] + parts[2:]
        else:
            new = parts
        name = ".".join(new)
        name = name.replace("weight_g", "parametrizations.weight.original0")
        name = name.replace("weight_v", "parametrizations.weight.original1")
        mapped[name] = value
    vocoder.load_state_dict(mapped)
    return vocoder
