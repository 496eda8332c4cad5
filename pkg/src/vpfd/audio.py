"""Waveform I/O, log-mel extraction and a synthetic harmonic speech corpus."""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch


class WavFormatError(ValueError):
    """Raised for malformed or unsupported WAV files."""


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 22050

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass
class MelConfig:
    n_mels: int = 80
    fft_size: int = 1024
    hop: int = 256
    window: int = 1024
    sample_rate: int = 22050
    log_floor: float = 1e-5
    fmin: float = 0.0
    fmax: float = 8000.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if not (0 < self.hop <= self.window <= self.fft_size):
            raise ValueError(
                f"need 0 < hop <= window <= fft_size, got {self.hop}, {self.window}, {self.fft_size}"
            )
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")
        if not (0 <= self.fmin < self.fmax <= self.sample_rate / 2):
            raise ValueError("need 0 <= fmin < fmax <= sample_rate / 2")

    def n_frames(self, n_samples: int) -> int:
        return n_samples // self.hop + 1


# HiFi-GAN V1 analysis settings at 22.05 kHz.
FULL_MEL = dict(n_mels=80, fft_size=1024, hop=256, window=1024)
# Toy preset: hop matches the toy vocoder's total upsampling (4*4*2*2).
TOY_MEL = dict(n_mels=80, fft_size=1024, hop=64, window=1024)


def hz_to_mel(freq):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    freq = np.asarray(freq, dtype=np.float64)
    f_sp = 200.0 / 3
    mels = freq / f_sp
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = math.log(6.4) / 27.0
    log_region = freq >= min_log_hz
    mels = np.where(log_region, min_log_mel + np.log(np.maximum(freq, 1e-12) / min_log_hz) / logstep, mels)
    return mels


def mel_to_hz(mels):
    mels = np.asarray(mels, dtype=np.float64)
    f_sp = 200.0 / 3
    freqs = f_sp * mels
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = math.log(6.4) / 27.0
    log_region = mels >= min_log_mel
    return np.where(log_region, min_log_hz * np.exp(logstep * (mels - min_log_mel)), freqs)


def mel_center_frequencies(cfg: MelConfig) -> np.ndarray:
    """Center frequency (Hz) of each triangular filter."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    return edges[1:-1]


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Slaney-normalized triangular filterbank, shape (n_mels, fft_size // 2 + 1)."""
    fft_freqs = np.linspace(0, cfg.sample_rate / 2, cfg.fft_size // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    fdiff = np.diff(edges)
    ramps = edges[:, None] - fft_freqs[None, :]
    weights = np.zeros((cfg.n_mels, fft_freqs.shape[0]))
    for i in range(cfg.n_mels):
        lower = -ramps[i] / fdiff[i]
        upper = ramps[i + 2] / fdiff[i + 1]
        weights[i] = np.maximum(0, np.minimum(lower, upper))
    # equal-area normalization
    weights *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    return weights


class MelExtractor(torch.nn.Module):
    """Batched, differentiable log-mel analysis.

    Input ``(B, T)`` or ``(B, 1, T)`` audio, output ``(B, n_mels, T // hop + 1)``.
    """

    def __init__(self, cfg: MelConfig):
        super().__init__()
        self.cfg = cfg
        self.register_buffer("basis", torch.from_numpy(mel_filterbank(cfg)).float(), persistent=False)
        self.register_buffer("window", torch.hann_window(cfg.window), persistent=False)

    def forward(self, audio: torch.Tensor) -> torch.Tensor:
        if audio.dim() == 3:
            audio = audio.squeeze(1)
        cfg = self.cfg
        if audio.shape[-1] < cfg.window:
            raise ValueError(f"waveform of {audio.shape[-1]} samples is shorter than one window ({cfg.window})")
        spec = torch.stft(
            audio,
            n_fft=cfg.fft_size,
            hop_length=cfg.hop,
            win_length=cfg.window,
            window=self.window.to(audio.dtype),
            center=True,
            pad_mode="reflect",
            return_complex=True,
        )
        # clamp keeps the sqrt differentiable at exact silence
        mag = torch.sqrt((spec.real**2 + spec.imag**2).clamp_min(1e-14))
        mel = torch.matmul(self.basis.to(audio.dtype), mag)
        return torch.log(torch.clamp(mel, min=cfg.log_floor))


def extract_mel(w: Waveform, cfg: MelConfig) -> torch.Tensor:
    """Log-mel spectrogram of one waveform, shape ``(n_mels, F)`` with ``F = len // hop + 1``."""
    if len(w) == 0:
        raise ValueError("empty waveform")
    if len(w) < cfg.window:
        raise ValueError(f"waveform of {len(w)} samples is shorter than one window ({cfg.window})")
    if w.sample_rate != cfg.sample_rate:
        raise ValueError(f"sample rate {w.sample_rate} does not match mel config {cfg.sample_rate}")
    audio = torch.from_numpy(w.samples).unsqueeze(0)
    return MelExtractor(cfg)(audio)[0]


# --------------------------------------------------------------------------- WAV


def save_wav(w: Waveform, path) -> None:
    pcm = np.clip(np.round(w.samples.astype(np.float64) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(pcm.tobytes())


def load_wav(path) -> Waveform:
    try:
        with wave.open(str(path), "rb") as f:
            n_channels, width, rate, n_frames = f.getnchannels(), f.getsampwidth(), f.getframerate(), f.getnframes()
            if f.getcomptype() != "NONE":
                raise WavFormatError(f"{path}: compressed WAV ({f.getcomptype()}) is not supported")
            data = f.readframes(n_frames)
    except (wave.Error, EOFError) as e:
        raise WavFormatError(f"{path}: malformed WAV header ({e})") from e
    if width != 2:
        raise WavFormatError(f"{path}: only 16-bit PCM is supported (sample width {width} bytes)")
    if n_channels != 1:
        raise WavFormatError(f"{path}: only mono audio is supported ({n_channels} channels)")
    if len(data) != n_frames * 2:
        raise WavFormatError(f"{path}: truncated data chunk ({len(data)} of {n_frames * 2} bytes)")
    samples = np.frombuffer(data, dtype="<i2").astype(np.float32) / 32768.0
    return Waveform(samples, rate)


# --------------------------------------------------------------------------- corpus


@dataclass
class SyntheticCorpusSpec:
    n_speakers: int = 2
    sentences_per_speaker: int = 8
    f0_bases: tuple = ()  # per-speaker base f0 in Hz; empty -> spread over [100, 220]
    harmonic_profile: tuple = ()  # amplitude per harmonic; empty -> per-speaker spectral tilt
    duration: float = 1.0
    sample_rate: int = 22050
    seed: int = 0
    max_harmonic_hz: float = 7000.0

    def __post_init__(self):
        if self.n_speakers < 1 or self.sentences_per_speaker < 1:
            raise ValueError("corpus needs at least one speaker and one sentence")
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if self.f0_bases and len(self.f0_bases) != self.n_speakers:
            raise ValueError("f0_bases must list one value per speaker")

    def speaker_f0(self, spk: int) -> float:
        if self.f0_bases:
            return float(self.f0_bases[spk])
        if self.n_speakers == 1:
            return 150.0
        return 100.0 + 120.0 * spk / (self.n_speakers - 1)


@dataclass
class CorpusItem:
    wave: Waveform
    speaker_id: int
    sentence_id: int

    @property
    def utt_id(self) -> str:
        return f"spk{self.speaker_id:03d}_sent{self.sentence_id:03d}"

    # unpacks as (Waveform, speaker_id, sentence_id)
    def __iter__(self):
        return iter((self.wave, self.speaker_id, self.sentence_id))


def _sentence_plan(spec: SyntheticCorpusSpec, sent: int, n: int):
    """Speaker-independent prosody and 'phoneme' sequence of one sentence."""
    rng = np.random.default_rng([spec.seed, 1_000_003, sent])
    t = np.arange(n) / spec.sample_rate
    # smooth f0 contour: a few slow sinusoids, relative deviation within about +-15 %
    contour = np.zeros(n)
    for _ in range(3):
        contour += rng.uniform(0.02, 0.05) * np.sin(2 * np.pi * rng.uniform(0.5, 3.0) * t + rng.uniform(0, 2 * np.pi))
    n_units = max(2, int(round(spec.duration * 6)))
    formants = rng.uniform([300, 900], [900, 2500], size=(n_units, 2))
    bounds = np.sort(rng.uniform(0, n, size=n_units - 1)).astype(int)
    unit_index = np.searchsorted(bounds, np.arange(n), side="right")
    env = np.zeros(n)
    edges = np.concatenate([[0], bounds, [n]])
    for a, b in zip(edges[:-1], edges[1:]):
        if b > a:
            env[a:b] = np.sin(np.linspace(0, np.pi, b - a)) ** 0.5
    return 1.0 + contour, formants, unit_index, 0.2 + 0.8 * env


def _speaker_profile(spec: SyntheticCorpusSpec, spk: int, n_harm: int) -> np.ndarray:
    if spec.harmonic_profile:
        prof = np.zeros(n_harm)
        given = np.asarray(spec.harmonic_profile, dtype=np.float64)[:n_harm]
        prof[: given.shape[0]] = given
        return prof
    rng = np.random.default_rng([spec.seed, 7_919, spk])
    tilt = rng.uniform(0.9, 1.3)
    return np.arange(1, n_harm + 1, dtype=np.float64) ** -tilt


def _render(spec: SyntheticCorpusSpec, spk: int, sent: int) -> np.ndarray:
    sr = spec.sample_rate
    n = int(round(spec.duration * sr))
    rel_f0, formants, unit_index, env = _sentence_plan(spec, sent, n)
    f0 = spec.speaker_f0(spk) * rel_f0
    phase = 2 * np.pi * np.cumsum(f0) / sr
    n_harm = int(spec.max_harmonic_hz // spec.speaker_f0(spk))
    profile = _speaker_profile(spec, spk, n_harm)
    # speaker-dependent vocal-tract scaling of the sentence formants
    vt = 1.0 + 0.15 * (spec.speaker_f0(spk) - 150.0) / 150.0
    f1 = formants[unit_index, 0] * vt
    f2 = formants[unit_index, 1] * vt
    out = np.zeros(n)
    for k in range(1, n_harm + 1):
        fk = k * f0
        gain = 1.0 + 2.0 * np.exp(-(((fk - f1) / 150.0) ** 2)) + 1.5 * np.exp(-(((fk - f2) / 250.0) ** 2))
        gain = np.where(fk < sr / 2 - 500, gain, 0.0)
        out += profile[k - 1] * gain * np.sin(k * phase)
    out *= env
    rng = np.random.default_rng([spec.seed, 31_337, spk, sent])
    out += 0.003 * rng.standard_normal(n)
    out *= 0.5 / max(np.max(np.abs(out)), 1e-9)
    return out.astype(np.float32)


def generate_corpus(spec: SyntheticCorpusSpec) -> list[CorpusItem]:
    """Deterministic harmonic 'speech': one item per (speaker, sentence), speaker-major order."""
    return [
        CorpusItem(Waveform(_render(spec, spk, sent), spec.sample_rate), spk, sent)
        for spk in range(spec.n_speakers)
        for sent in range(spec.sentences_per_speaker)
    ]


def write_corpus(items, root) -> Path:
    """Write WAVs plus a tab-separated manifest (path, speaker_id, sentence_id)."""
    root = Path(root)
    (root / "wavs").mkdir(parents=True, exist_ok=True)
    lines = []
    for item in items:
        rel = Path("wavs") / f"{item.utt_id}.wav"
        save_wav(item.wave, root / rel)
        lines.append(f"{rel.as_posix()}\t{item.speaker_id}\t{item.sentence_id}")
    manifest = root / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_corpus(manifest) -> list[CorpusItem]:
    manifest = Path(manifest)
    items = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{manifest}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        rel, spk, sent = parts
        items.append(CorpusItem(load_wav(manifest.parent / rel), int(spk), int(sent)))
    return items


def spectral_centroid(w: Waveform, fft_size: int = 2048) -> float:
    """Power-weighted mean frequency over the whole signal."""
    x = w.samples.astype(np.float64)
    n_frames = max(1, (len(x) - fft_size) // (fft_size // 2) + 1)
    win = np.hanning(fft_size)
    power = np.zeros(fft_size // 2 + 1)
    for i in range(n_frames):
        seg = x[i * fft_size // 2 : i * fft_size // 2 + fft_size]
        seg = np.pad(seg, (0, fft_size - len(seg)))
        power += np.abs(np.fft.rfft(seg * win)) ** 2
    freqs = np.fft.rfftfreq(fft_size, 1.0 / w.sample_rate)
    return float(np.sum(freqs * power) / max(np.sum(power), 1e-20))
