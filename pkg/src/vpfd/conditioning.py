"""Speaker and content embedding providers.

The toy providers stand in for a pretrained speaker encoder and a bottleneck
feature extractor.  Both are fixed seeded projections, so they are pure
functions of ``(mel, seed)``.  Externally computed embeddings can be supplied
through a sidecar file (see :func:`save_embeddings`).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .checkpoint import load_checkpoint, save_checkpoint


@dataclass
class ConditioningConfig:
    speaker_dim: int = 64
    content_dim: int = 32
    seed: int = 1234


def _projection(rows: int, cols: int, seed: int) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.randn(rows, cols, generator=g, dtype=torch.float64) / cols**0.5


class ToySpeakerEncoder:
    """Per-bin time mean and standard deviation, projected and L2-normalized."""

    def __init__(self, n_mels: int, dim: int = 64, seed: int = 1234):
        self.dim = dim
        self.weight = _projection(dim, 2 * n_mels, seed)

    def __call__(self, mel: torch.Tensor) -> torch.Tensor:
        single = mel.dim() == 2
        m = (mel.unsqueeze(0) if single else mel).to(torch.float64)
        if m.shape[-1] < 1:
            raise ValueError("empty mel")
        stats = torch.cat([m.mean(-1), m.std(-1, unbiased=False)], dim=-1)
        stats = stats - stats.mean(-1, keepdim=True)
        s = stats @ self.weight.T
        s = s / s.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        s = s.to(mel.dtype)
        return s[0] if single else s


class ToyContentEncoder:
    """Per-frame projection of the utterance-mean-removed mel."""

    def __init__(self, n_mels: int, dim: int = 32, seed: int = 1234):
        self.dim = dim
        self.weight = _projection(dim, n_mels, seed + 1)

    def __call__(self, mel: torch.Tensor) -> torch.Tensor:
        single = mel.dim() == 2
        m = (mel.unsqueeze(0) if single else mel).to(torch.float64)
        if m.shape[-1] < 1:
            raise ValueError("empty mel")
        centered = m - m.mean(-1, keepdim=True)
        p = torch.einsum("dm,bmf->bdf", self.weight, centered).to(mel.dtype)
        return p[0] if single else p


class Providers:
    """Bundle of the two providers; optionally backed by sidecar embedding files."""

    def __init__(self, speaker, content, speaker_table: dict | None = None, content_table: dict | None = None):
        self.speaker = speaker
        self.content = content
        self.speaker_table = speaker_table or {}
        self.content_table = content_table or {}

    @classmethod
    def toy(cls, n_mels: int, cfg: ConditioningConfig | None = None) -> "Providers":
        cfg = cfg or ConditioningConfig()
        return cls(ToySpeakerEncoder(n_mels, cfg.speaker_dim, cfg.seed), ToyContentEncoder(n_mels, cfg.content_dim, cfg.seed))

    @property
    def speaker_dim(self) -> int:
        return self.speaker.dim

    @property
    def content_dim(self) -> int:
        return self.content.dim

    def embed_speaker(self, mel, utt_id: str | None = None):
        if utt_id is not None and utt_id in self.speaker_table:
            return self.speaker_table[utt_id]
        return self.speaker(mel)

    def embed_content(self, mel, utt_id: str | None = None):
        if utt_id is not None and utt_id in self.content_table:
            p = self.content_table[utt_id]
            if p.shape[-1] != mel.shape[-1]:
                raise ValueError(f"sidecar content for {utt_id} has {p.shape[-1]} frames, mel has {mel.shape[-1]}")
            return p
        return self.content(mel)


def embed_speaker(mel: torch.Tensor, cfg: ConditioningConfig | None = None) -> torch.Tensor:
    cfg = cfg or ConditioningConfig()
    return ToySpeakerEncoder(mel.shape[-2], cfg.speaker_dim, cfg.seed)(mel)


def embed_content(mel: torch.Tensor, cfg: ConditioningConfig | None = None) -> torch.Tensor:
    cfg = cfg or ConditioningConfig()
    return ToyContentEncoder(mel.shape[-2], cfg.content_dim, cfg.seed)(mel)


def save_embeddings(path, speaker: dict, content: dict | None = None):
    """Sidecar file: tensors named ``speaker/<utt_id>`` and ``content/<utt_id>``."""
    tensors = {f"speaker/{k}": v for k, v in speaker.items()}
    tensors.update({f"content/{k}": v for k, v in (content or {}).items()})
    return save_checkpoint(path, "embeddings", tensors)


def load_embeddings(path) -> tuple[dict, dict]:
    ckpt = load_checkpoint(path, kind="embeddings")
    speaker, content = {}, {}
    for name, t in ckpt.tensors.items():
        table, utt = name.split("/", 1)
        (speaker if table == "speaker" else content)[utt] = t
    return speaker, content
