"""Discriminators over vocoder features (VPFD), waveforms (MPD + MRD) and mel maps (MelD).

Every discriminator returns :class:`DiscriminatorOutput` objects carrying the
score map and the ordered internal feature maps used by the feature-matching
loss.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.parametrizations import weight_norm

from .vocoder import FeatureExtractor, Vocoder, VocoderConfig

LRELU_SLOPE = 0.1
HEAD_KERNEL = 21


@dataclass
class DiscriminatorOutput:
    score: torch.Tensor
    features: list = field(default_factory=list)

    def detached(self) -> "DiscriminatorOutput":
        return DiscriminatorOutput(self.score.detach(), [f.detach() for f in self.features])


def has_weight_norm(conv: nn.Module) -> bool:
    return hasattr(conv, "parametrizations") and "weight" in conv.parametrizations


# --------------------------------------------------------------------------- VPFD head


@dataclass
class VPFDConfig:
    L: int = 1
    channel_rule: str = "match"  # "match": vocoder channels at that scale; "layers": conv count of the extractor there
    resblocks_per_scale: int = 1


def extractor_layer_counts(vcfg: VocoderConfig, L: int) -> list[int]:
    """Number of convolution layers of the extractor producing each pyramid level."""
    per_stage = 1 + sum(2 * len(d) for d in vcfg.resblock_dilations)
    counts = [1]
    for level in range(1, L + 1):
        counts.append(1 if (vcfg.tap == "upsample" and level == L) else per_stage)
    return counts


class HeadResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = weight_norm(nn.Conv1d(channels, channels, HEAD_KERNEL, padding=HEAD_KERNEL // 2))
        self.conv2 = weight_norm(nn.Conv1d(channels, channels, HEAD_KERNEL, padding=HEAD_KERNEL // 2))

    def forward(self, x, feats):
        h = F.leaky_relu(self.conv1(F.leaky_relu(x, LRELU_SLOPE)), LRELU_SLOPE)
        feats.append(h)
        x = x + self.conv2(h)
        feats.append(x)
        return x


class DownStage(nn.Module):
    """Strided conv to the coarser scale, concat with that pyramid level, merge conv, resblocks."""

    def __init__(self, cin, cout, skip_channels, rate, n_res):
        super().__init__()
        self.rate = rate
        self.down = weight_norm(nn.Conv1d(cin, cout, 2 * rate, stride=rate))
        self.merge = weight_norm(nn.Conv1d(cout + skip_channels, cout, HEAD_KERNEL, padding=HEAD_KERNEL // 2))
        self.blocks = nn.ModuleList(HeadResBlock(cout) for _ in range(n_res))

    def forward(self, x, skip, feats):
        # kernel 2r, stride r: pad r in total so the length divides exactly by r
        x = F.pad(x, (self.rate // 2, self.rate - self.rate // 2))
        x = F.leaky_relu(self.down(x), LRELU_SLOPE)
        feats.append(x)
        x = F.leaky_relu(self.merge(torch.cat([x, skip], dim=1)), LRELU_SLOPE)
        feats.append(x)
        for b in self.blocks:
            x = b(x, feats)
        return x


class VPFDHead(nn.Module):
    """Downsampling half of the inverted U-Net.

    Enters at the finest pyramid level ``L`` and walks back to frame rate,
    undoing the vocoder's upsampling rates in reverse order.  Layer features
    are collected in execution order: entry conv, entry resblocks, then per
    stage (down conv, merge conv, resblocks); the final 1-channel score conv
    is excluded.
    """

    def __init__(self, vcfg: VocoderConfig, cfg: VPFDConfig):
        super().__init__()
        L = cfg.L
        if not 0 <= L <= vcfg.n_stages:
            raise ValueError(f"L must be in [0, {vcfg.n_stages}], got {L}")
        self.L = L
        self.vcfg = vcfg
        self.cfg = cfg
        self.rates = [vcfg.upsample_rates[i] for i in reversed(range(L))]
        layer_counts = extractor_layer_counts(vcfg, L)
        if cfg.channel_rule == "match":
            width = [vcfg.channels(level) for level in range(L + 1)]
        elif cfg.channel_rule == "layers":
            width = layer_counts
        else:
            raise ValueError(f"unknown channel_rule {cfg.channel_rule!r}")
        self.widths = width
        k = HEAD_KERNEL
        self.conv_in = weight_norm(nn.Conv1d(vcfg.channels(L), width[L], k, padding=k // 2))
        self.blocks_in = nn.ModuleList(HeadResBlock(width[L]) for _ in range(cfg.resblocks_per_scale))
        self.stages = nn.ModuleList(
            DownStage(width[level], width[level - 1], vcfg.channels(level - 1), vcfg.upsample_rates[level - 1], cfg.resblocks_per_scale)
            for level in range(L, 0, -1)
        )
        self.conv_out = weight_norm(nn.Conv1d(width[0], 1, k, padding=k // 2))

    @property
    def n_layer_features(self) -> int:
        per_scale = 2 * self.cfg.resblocks_per_scale
        return 1 + per_scale + self.L * (2 + per_scale)

    def forward(self, pyramid: list[torch.Tensor]) -> DiscriminatorOutput:
        if len(pyramid) != self.L + 1:
            raise ValueError(f"head expects a pyramid of depth {self.L} ({self.L + 1} levels), got {len(pyramid)}")
        feats = []
        x = F.leaky_relu(self.conv_in(pyramid[self.L]), LRELU_SLOPE)
        feats.append(x)
        for b in self.blocks_in:
            x = b(x, feats)
        for i, stage in enumerate(self.stages):
            x = stage(x, pyramid[self.L - 1 - i], feats)
        return DiscriminatorOutput(self.conv_out(x), feats)

    def describe(self) -> list[dict]:
        """Every convolution in execution order with its kernel, stride and channels."""
        rows = []

        def add(name, conv, role):
            rows.append(
                dict(
                    name=name, role=role, kernel=conv.kernel_size[0], stride=conv.stride[0],
                    in_channels=conv.in_channels, out_channels=conv.out_channels, weight_norm=has_weight_norm(conv),
                )
            )

        add("conv_in", self.conv_in, "conv")
        for j, b in enumerate(self.blocks_in):
            add(f"blocks_in.{j}.conv1", b.conv1, "conv")
            add(f"blocks_in.{j}.conv2", b.conv2, "conv")
        for i, st in enumerate(self.stages):
            add(f"stages.{i}.down", st.down, "down")
            add(f"stages.{i}.merge", st.merge, "conv")
            for j, b in enumerate(st.blocks):
                add(f"stages.{i}.blocks.{j}.conv1", b.conv1, "conv")
                add(f"stages.{i}.blocks.{j}.conv2", b.conv2, "conv")
        add("conv_out", self.conv_out, "score")
        return rows


def build_vpfd(vcfg: VocoderConfig, L: int, channel_rule: str = "match", resblocks_per_scale: int = 1) -> VPFDHead:
    return VPFDHead(vcfg, VPFDConfig(L, channel_rule, resblocks_per_scale))


def vpfd_score(pyramid, head: VPFDHead) -> DiscriminatorOutput:
    return head(pyramid)


def dump_architecture(head: VPFDHead) -> str:
    """Human-readable structure dump, one convolution per line."""
    v = head.vcfg
    lines = [
        f"VPFD L={head.L} vocoder_rates={list(v.upsample_rates)} vocoder_channels={[v.channels(i) for i in range(v.n_stages + 1)]}",
        f"head_rates={head.rates} widths={head.widths} channel_rule={head.cfg.channel_rule}",
        f"layer_features={head.n_layer_features}",
    ]
    for r in head.describe():
        lines.append(
            f"{r['name']:<24} role={r['role']:<5} kernel={r['kernel']:<3} stride={r['stride']:<2} "
            f"in={r['in_channels']:<4} out={r['out_channels']:<4} weight_norm={str(r['weight_norm']).lower()}"
        )
    return "\n".join(lines) + "\n"


def parse_architecture(text: str) -> list[dict]:
    rows = []
    for line in text.splitlines()[3:]:
        name, *fields = line.split()
        d = dict(f.split("=", 1) for f in fields)
        rows.append(
            dict(
                name=name, role=d["role"], kernel=int(d["kernel"]), stride=int(d["stride"]),
                in_channels=int(d["in"]), out_channels=int(d["out"]), weight_norm=d["weight_norm"] == "true",
            )
        )
    return rows


# --------------------------------------------------------------------------- MPD / MRD


@dataclass
class VWDConfig:
    periods: tuple = (2, 3, 5, 7, 11)
    resolutions: tuple = ((1024, 120, 600), (2048, 240, 1200), (512, 50, 240))
    mpd_channels: tuple = (8, 16, 32, 32)  # (32, 128, 512, 1024) at full scale
    mrd_channels: int = 8  # 32 at full scale

    def __post_init__(self):
        self.periods = tuple(int(p) for p in self.periods)
        self.resolutions = tuple(tuple(int(v) for v in r) for r in self.resolutions)
        if len(set(self.periods)) != len(self.periods) or any(p < 2 for p in self.periods):
            raise ValueError(f"periods must be distinct and >= 2, got {self.periods}")


def reshape_for_period(x: torch.Tensor, period: int) -> torch.Tensor:
    """``(B, 1, T)`` -> ``(B, 1, ceil(T / period), period)``, reflect-padding the tail."""
    b, c, t = x.shape
    if t % period:
        n_pad = period - t % period
        x = F.pad(x, (0, n_pad), "reflect")
        t += n_pad
    return x.view(b, c, t // period, period)


class PeriodDiscriminator(nn.Module):
    def __init__(self, period: int, channels=(16, 32, 64, 64), kernel_size=5, stride=3):
        super().__init__()
        self.period = period
        convs = []
        cin = 1
        for i, ch in enumerate(channels):
            s = stride if i < len(channels) - 1 else 1
            convs.append(weight_norm(nn.Conv2d(cin, ch, (kernel_size, 1), (s, 1), padding=(kernel_size // 2, 0))))
            cin = ch
        self.convs = nn.ModuleList(convs)
        self.conv_post = weight_norm(nn.Conv2d(cin, 1, (3, 1), 1, padding=(1, 0)))

    def forward(self, x: torch.Tensor) -> DiscriminatorOutput:
        x = reshape_for_period(x, self.period)
        feats = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), LRELU_SLOPE)
            feats.append(x)
        return DiscriminatorOutput(self.conv_post(x), feats)


class SpectrogramDiscriminator(nn.Module):
    """2-D conv stack over a ``(B, 1, freq, time)`` map; strides shrink the frequency axis only."""

    KERNELS = ((9, 3), (9, 3), (9, 3), (9, 3), (3, 3))
    STRIDES = ((1, 1), (2, 1), (2, 1), (2, 1), (1, 1))

    def __init__(self, channels: int):
        super().__init__()
        convs = []
        cin = 1
        for k, s in zip(self.KERNELS, self.STRIDES):
            convs.append(weight_norm(nn.Conv2d(cin, channels, k, s, padding=(k[0] // 2, k[1] // 2))))
            cin = channels
        self.convs = nn.ModuleList(convs)
        self.conv_post = weight_norm(nn.Conv2d(cin, 1, (3, 3), 1, padding=(1, 1)))

    @classmethod
    def output_height(cls, height: int) -> int:
        for k, s in zip(cls.KERNELS, cls.STRIDES):
            height = (height + 2 * (k[0] // 2) - k[0]) // s[0] + 1
        return height

    def forward(self, spec: torch.Tensor) -> DiscriminatorOutput:
        x = spec
        feats = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), LRELU_SLOPE)
            feats.append(x)
        return DiscriminatorOutput(self.conv_post(x), feats)


class ResolutionDiscriminator(nn.Module):
    def __init__(self, resolution, channels: int):
        super().__init__()
        self.n_fft, self.hop, self.win = resolution
        self.net = SpectrogramDiscriminator(channels)
        self.register_buffer("window", torch.hann_window(self.win), persistent=False)

    def forward(self, x: torch.Tensor) -> DiscriminatorOutput:
        spec = torch.stft(
            x[:, 0], self.n_fft, self.hop, self.win, window=self.window.to(x.dtype), center=True,
            pad_mode="reflect", return_complex=True,
        )
        mag = torch.sqrt((spec.real**2 + spec.imag**2).clamp_min(1e-9))
        return self.net(mag.unsqueeze(1))


class WaveformDiscriminator(nn.Module):
    """MPD followed by MRD; either list may be empty (ablations)."""

    def __init__(self, cfg: VWDConfig):
        super().__init__()
        self.cfg = cfg
        self.mpd = nn.ModuleList(PeriodDiscriminator(p, cfg.mpd_channels) for p in cfg.periods)
        self.mrd = nn.ModuleList(ResolutionDiscriminator(r, cfg.mrd_channels) for r in cfg.resolutions)
        if not len(self.mpd) + len(self.mrd):
            raise ValueError("waveform discriminator needs at least one period or resolution")

    def forward(self, wav: torch.Tensor) -> list[DiscriminatorOutput]:
        if wav.dim() == 2:
            wav = wav.unsqueeze(1)
        min_len = 2 * max(self.cfg.periods, default=1)
        if wav.shape[-1] < min_len:
            raise ValueError(f"waveform of {wav.shape[-1]} samples is shorter than 2 x max period ({min_len})")
        return [d(wav) for d in self.mpd] + [d(wav) for d in self.mrd]


def vwd_score(w: torch.Tensor, disc: WaveformDiscriminator) -> list[DiscriminatorOutput]:
    return disc(w)


# --------------------------------------------------------------------------- MelD


@dataclass
class MelDConfig:
    channels: int = 16


MELD_PRESETS = {"small": 16, "large": 48}


class MelDiscriminator(nn.Module):
    """MRD-like 2-D stack applied directly to the ``(n_mels, F)`` log-mel map."""

    def __init__(self, cfg: MelDConfig):
        super().__init__()
        self.cfg = cfg
        self.net = SpectrogramDiscriminator(cfg.channels)

    def forward(self, mel: torch.Tensor) -> DiscriminatorOutput:
        return self.net(mel.unsqueeze(1))

    @staticmethod
    def score_shape(n_mels: int, n_frames: int) -> tuple[int, int]:
        return SpectrogramDiscriminator.output_height(n_mels), n_frames


def meld_score(mel: torch.Tensor, disc: MelDiscriminator) -> DiscriminatorOutput:
    return disc(mel)


# --------------------------------------------------------------------------- full discriminators on mel input


class Discriminator(nn.Module):
    """Common interface: mel batch in the generator's (normalized) space -> list of outputs.

    ``trainable_parameters`` lists what the discriminator optimizer updates.
    """

    def __init__(self, denormalize=None):
        super().__init__()
        self._denorm = denormalize

    def to_logmel(self, x):
        return self._denorm(x) if self._denorm is not None else x

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]


class VPFDDiscriminator(Discriminator):
    def __init__(self, vocoder: Vocoder, cfg: VPFDConfig, frozen: bool = True, denormalize=None):
        super().__init__(denormalize)
        self.extractor = FeatureExtractor(vocoder, cfg.L)
        self.head = VPFDHead(vocoder.cfg, cfg)
        self.frozen = frozen
        if frozen:
            self.extractor.requires_grad_(False)

    def forward(self, x):
        return [self.head(self.extractor(self.to_logmel(x)))]


class VWDDiscriminator(Discriminator):
    """Vocoder (always frozen) followed by the waveform discriminators."""

    def __init__(self, vocoder: Vocoder, cfg: VWDConfig, denormalize=None):
        super().__init__(denormalize)
        self.vocoder = copy.deepcopy(vocoder).requires_grad_(False)
        self.wave = WaveformDiscriminator(cfg)

    def forward(self, x):
        return self.wave(self.vocoder(self.to_logmel(x)))


class MelDDiscriminator(Discriminator):
    def __init__(self, cfg: MelDConfig, denormalize=None):
        super().__init__(denormalize)
        self.mel = MelDiscriminator(cfg)

    def forward(self, x):
        return [self.mel(self.to_logmel(x))]
