"""Least-squares GAN, feature-matching and score-distillation objectives."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import torch

from .diffusion import NoiseSchedule
from .discriminators import DiscriminatorOutput


@dataclass
class LossWeights:
    lambda_fm: float = 2.0
    lambda_distill: float = 45.0

    def __post_init__(self):
        if self.lambda_fm < 0 or self.lambda_distill < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossReport:
    step: int
    d_loss: float
    g_adv: float
    g_fm: float
    g_distill: float
    g_total: float

    FIELDS = ("step", "d_loss", "g_adv", "g_fm", "g_distill", "g_total")

    def as_row(self) -> dict:
        return asdict(self)


def append_loss_rows(path, reports) -> None:
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="") as f:
        w = csv.DictWriter(f, fieldnames=LossReport.FIELDS, lineterminator="\n")
        if new:
            w.writeheader()
        for r in reports:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.as_row().items()})


def _scores(out) -> list[torch.Tensor]:
    if isinstance(out, DiscriminatorOutput):
        return [out.score]
    if torch.is_tensor(out):
        return [out]
    return [o.score if isinstance(o, DiscriminatorOutput) else torch.as_tensor(o) for o in out]


def lsgan_d(real_out, fake_out) -> torch.Tensor:
    """Sum over discriminators of ``mean((real - 1)^2) + mean(fake^2)``."""
    real, fake = _scores(real_out), _scores(fake_out)
    if len(real) != len(fake):
        raise ValueError(f"{len(real)} real outputs vs {len(fake)} fake outputs")
    total = 0.0
    for r, f in zip(real, fake):
        if r.shape != f.shape:
            raise ValueError(f"score shapes differ: {tuple(r.shape)} vs {tuple(f.shape)}")
        total = total + torch.mean((r - 1) ** 2) + torch.mean(f**2)
    return total


def lsgan_g(fake_out) -> torch.Tensor:
    return sum(torch.mean((f - 1) ** 2) for f in _scores(fake_out))


def _features(out) -> list[torch.Tensor]:
    if isinstance(out, DiscriminatorOutput):
        return list(out.features)
    if out and isinstance(out[0], DiscriminatorOutput):
        return [f for o in out for f in o.features]
    return [torch.as_tensor(f) for f in out]


def feature_matching(real_feats, fake_feats) -> torch.Tensor:
    """``sum_i mean |real_i - fake_i|``; the real path carries no gradient."""
    real, fake = _features(real_feats), _features(fake_feats)
    if len(real) != len(fake):
        raise ValueError(f"{len(real)} real layers vs {len(fake)} fake layers")
    total = 0.0
    for r, f in zip(real, fake):
        if r.shape != f.shape:
            raise ValueError(f"layer shapes differ: {tuple(r.shape)} vs {tuple(f.shape)}")
        total = total + torch.mean(torch.abs(r.detach() - f))
    return total


def score_distillation(x_phi, x_theta, t, sched: NoiseSchedule, norm: str = "l1") -> torch.Tensor:
    """``mean_b sqrt(abar_t) * d(x_phi, x_theta)`` with ``d`` the per-item mean absolute
    difference (``l1``) or root-mean-square difference (``l2``). ``x_theta`` is a constant."""
    if x_phi.shape != x_theta.shape:
        raise ValueError(f"shapes differ: {tuple(x_phi.shape)} vs {tuple(x_theta.shape)}")
    diff = x_phi - x_theta.detach()
    dims = tuple(range(1, diff.dim()))
    if norm == "l1":
        per_item = diff.abs().mean(dim=dims) if dims else diff.abs()
    elif norm == "l2":
        per_item = (diff**2).mean(dim=dims).sqrt() if dims else diff.abs()
    else:
        raise ValueError(f"norm must be 'l1' or 'l2', got {norm!r}")
    w = sched.coef("alpha_bar", t, per_item).sqrt()
    return torch.mean(w * per_item)


def total_g(adv, fm, distill, w: LossWeights | None = None):
    w = w or LossWeights()
    return adv + w.lambda_fm * fm + w.lambda_distill * distill


def total_d(adv):
    return adv
