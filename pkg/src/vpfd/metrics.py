"""Mel-domain proxy metrics standing in for predicted-MOS, CER and speaker-similarity scores."""

import torch
import torch.nn.functional as F


def mel_l1(a: torch.Tensor, b: torch.Tensor) -> float:
    return F.l1_loss(a, b).item()


def log_spectral_distance(wav_a: torch.Tensor, wav_b: torch.Tensor, n_fft: int = 1024, hop: int = 256) -> float:
    """RMS over frequency of the log-power difference, averaged over frames (dB)."""
    n = min(wav_a.shape[-1], wav_b.shape[-1])
    window = torch.hann_window(n_fft, dtype=wav_a.dtype)

    def logpow(w):
        spec = torch.stft(w[..., :n], n_fft, hop, window=window, return_complex=True)
        return 10 * torch.log10(spec.abs() ** 2 + 1e-10)

    d = logpow(wav_a) - logpow(wav_b)
    return torch.sqrt((d**2).mean(dim=-2)).mean().item()


def speaker_cosine(s_a: torch.Tensor, s_b: torch.Tensor) -> float:
    return F.cosine_similarity(s_a.reshape(1, -1), s_b.reshape(1, -1)).item()
