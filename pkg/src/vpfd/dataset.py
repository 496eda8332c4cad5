"""Utterance-level mel/conditioning cache with seeded segment sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .audio import MelConfig, MelExtractor


@dataclass
class MelNormalizer:
    """Per-bin affine map between log-mel and the diffusion space."""

    mean: torch.Tensor
    std: torch.Tensor

    @classmethod
    def fit(cls, mels) -> "MelNormalizer":
        cat = torch.cat(list(mels), dim=-1).to(torch.float64)
        return cls(cat.mean(-1).float(), cat.std(-1).clamp_min(1e-3).float())

    @classmethod
    def from_dict(cls, d: dict) -> "MelNormalizer":
        return cls(torch.tensor(d["mean"], dtype=torch.float32), torch.tensor(d["std"], dtype=torch.float32))

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    def normalize(self, mel):
        return (mel - self.mean[:, None]) / self.std[:, None]

    def denormalize(self, x):
        return x * self.std[:, None] + self.mean[:, None]


class MelDataset:
    def __init__(self, items, mel_cfg: MelConfig, providers, normalizer: MelNormalizer | None = None):
        extractor = MelExtractor(mel_cfg)
        self.items = list(items)
        self.mel_cfg = mel_cfg
        with torch.no_grad():
            self.mels = [extractor(torch.from_numpy(it.wave.samples)[None])[0] for it in self.items]
            self.speaker = [providers.embed_speaker(m, it.utt_id) for m, it in zip(self.mels, self.items)]
            self.content = [providers.embed_content(m, it.utt_id) for m, it in zip(self.mels, self.items)]
        self.normalizer = normalizer or MelNormalizer.fit(self.mels)
        self.x = [self.normalizer.normalize(m) for m in self.mels]
        self.speaker_ids = [it.speaker_id for it in self.items]

    def __len__(self):
        return len(self.items)

    def crop(self, i: int, start: int, frames: int):
        return (self.x[i][:, start : start + frames], self.speaker[i], self.content[i][:, start : start + frames])

    def random_crop(self, rng: np.random.Generator, i: int, frames: int):
        n = self.x[i].shape[-1]
        if n < frames:
            raise ValueError(f"utterance {i} has {n} frames, need {frames}")
        start = int(rng.integers(0, n - frames + 1))
        return self.crop(i, start, frames)

    def collate(self, crops):
        xs, ss, ps = zip(*crops)
        return torch.stack(xs), torch.stack(ss), torch.stack(ps)

    def sample(self, rng: np.random.Generator, batch_size: int, frames: int):
        idx = rng.integers(0, len(self), size=batch_size)
        return self.collate([self.random_crop(rng, int(i), frames) for i in idx])

    def epoch(self, rng: np.random.Generator, batch_size: int, frames: int):
        """Shuffled pass over utterances with one random crop each.

        Yields ``max(1, len // batch_size)`` batches; a corpus smaller than one
        batch is tiled with further permutations.
        """
        n_batches = max(1, len(self) // batch_size)
        order = rng.permutation(len(self))
        while len(order) < n_batches * batch_size:
            order = np.concatenate([order, rng.permutation(len(self))])
        for b in range(n_batches):
            idx = order[b * batch_size : (b + 1) * batch_size]
            yield self.collate([self.random_crop(rng, int(i), frames) for i in idx])
