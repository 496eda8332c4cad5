"""DDPM forward/reverse processes, the conditional U-Net denoiser and teacher training."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.parametrizations import weight_norm

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import NumericalError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step coefficients, stored 0-based; step ``t`` in ``1..T`` lives at index ``t - 1``.

    ``timesteps`` maps each step to the time index the denoiser is conditioned
    on.  It is ``1..T`` for a base schedule and a subset after :meth:`respace`.
    """

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    timesteps: np.ndarray

    @property
    def T(self) -> int:
        return self.beta.shape[0]

    def check_t(self, t):
        tt = np.asarray(t.cpu() if torch.is_tensor(t) else t)
        if np.any(tt < 1) or np.any(tt > self.T):
            raise ValueError(f"t must lie in 1..{self.T}, got {tt.min()}..{tt.max()}")

    def coef(self, name: str, t, like: torch.Tensor) -> torch.Tensor:
        """``name`` coefficient at step(s) ``t``, broadcastable against ``like``."""
        self.check_t(t)
        values = torch.as_tensor(getattr(self, name), dtype=torch.float64)
        idx = torch.as_tensor(t, dtype=torch.long) - 1
        c = values[idx].to(like.dtype)
        if c.dim() == 0:
            return c
        return c.view(-1, *([1] * (like.dim() - 1)))

    def model_t(self, t) -> torch.Tensor:
        idx = torch.as_tensor(t, dtype=torch.long) - 1
        return torch.as_tensor(self.timesteps, dtype=torch.long)[idx]

    def respace(self, timesteps) -> "NoiseSchedule":
        """Schedule visiting only ``timesteps`` (ascending, 1-based) of this one.

        Cumulative products are kept, so one step of the new schedule spans the
        whole gap between consecutive kept steps.
        """
        ts = np.asarray(timesteps, dtype=np.int64)
        if ts.ndim != 1 or ts.size == 0 or np.any(np.diff(ts) <= 0):
            raise ValueError("timesteps must be a nonempty strictly increasing sequence")
        self.check_t(ts)
        abar = self.alpha_bar[ts - 1]
        prev = np.concatenate([[1.0], abar[:-1]])
        alpha = abar / prev
        return NoiseSchedule(1.0 - alpha, alpha, abar, self.timesteps[ts - 1])

    def collapsed(self) -> "NoiseSchedule":
        """Every step ``t`` jumps straight from ``t`` to 0 (``alpha_t := abar_t``).

        Step ``t`` of the result equals the single step of ``respace([t])``; it
        is used for one-shot denoising with a per-item ``t``.
        """
        return NoiseSchedule(1.0 - self.alpha_bar, self.alpha_bar.copy(), self.alpha_bar.copy(), self.timesteps.copy())


def schedule_from_betas(beta) -> NoiseSchedule:
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim != 1 or beta.size == 0 or np.any(beta <= 0) or np.any(beta >= 1):
        raise ValueError("betas must be a nonempty vector in (0, 1)")
    alpha = 1.0 - beta
    return NoiseSchedule(beta, alpha, np.cumprod(alpha), np.arange(1, beta.size + 1))


@dataclass
class ScheduleConfig:
    T: int = 100  # 1000 at full scale
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def build(self) -> NoiseSchedule:
        return make_schedule(self.T, self.beta_start, self.beta_end)


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return schedule_from_betas(np.linspace(beta_start, beta_end, T))


@dataclass
class DiffusionDraw:
    t: torch.Tensor
    epsilon: torch.Tensor


def diffuse(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """``x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps``."""
    if eps.shape != x0.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} does not match x0 {tuple(x0.shape)}")
    abar = sched.coef("alpha_bar", t, x0)
    return abar.sqrt() * x0 + (1 - abar).sqrt() * eps


def reverse_step(x_t, t, s, p, denoiser, sched: NoiseSchedule) -> torch.Tensor:
    """Posterior mean ``(x_t - (1 - alpha_t) / sqrt(1 - abar_t) * eps) / sqrt(alpha_t)``."""
    alpha = sched.coef("alpha", t, x_t)
    abar = sched.coef("alpha_bar", t, x_t)
    eps = denoiser(x_t, sched.model_t(t), s, p)
    if eps.shape != x_t.shape:
        raise ValueError("denoiser output shape differs from its input")
    return (x_t - (1 - alpha) / (1 - abar).sqrt() * eps) / alpha.sqrt()


def strided_timesteps(t_start: int, n_steps: int) -> np.ndarray:
    if not 1 <= n_steps <= t_start:
        raise ValueError(f"n_steps must be in 1..{t_start}, got {n_steps}")
    return np.array([round(t_start * k / n_steps) for k in range(1, n_steps + 1)], dtype=np.int64)


@torch.no_grad()
def multi_step_reverse(x_start, s, p, denoiser, sched: NoiseSchedule, n_steps: int, t_start: int | None = None):
    """Deterministic sampler: ``n_steps`` posterior-mean steps from ``t_start`` (default T).

    Steps are evenly strided and the schedule is respaced so that the last
    step lands on a clean estimate.
    """
    t_start = sched.T if t_start is None else t_start
    sub = sched.respace(strided_timesteps(t_start, n_steps))
    x = x_start
    for k in range(n_steps, 0, -1):
        t = torch.full((x.shape[0],), k, dtype=torch.long)
        x = reverse_step(x, t, s, p, denoiser, sub)
    return x


# --------------------------------------------------------------------------- denoiser


@dataclass
class DenoiserConfig:
    n_mels: int = 80
    speaker_dim: int = 64
    content_dim: int = 32
    hidden: int = 96  # 512 at full scale; must exceed n_mels or the input GLU bottlenecks the noise
    kernel_size: int = 5
    time_dim: int = 32

    def to_dict(self):
        return asdict(self)


FULL_DENOISER = dict(hidden=512)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class GLUConv(nn.Module):
    def __init__(self, cin, cout, k, stride=1, transpose=False):
        super().__init__()
        if transpose:
            conv = nn.ConvTranspose1d(cin, 2 * cout, 4, stride=2, padding=1)
        elif stride > 1:
            conv = nn.Conv1d(cin, 2 * cout, 4, stride=2, padding=1)
        else:
            conv = nn.Conv1d(cin, 2 * cout, k, padding=k // 2)
        self.conv = weight_norm(conv)

    def forward(self, x):
        return F.glu(self.conv(x), dim=1)


class Denoiser(nn.Module):
    """U-Net over time with mel bins as channels: 12 weight-normalized conv layers,
    two down/upsampling stages and GLU activations.

    Content ``p`` is concatenated to the input; the time embedding and a linear
    map of the speaker embedding ``s`` are added before every block.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        h, k = cfg.hidden, cfg.kernel_size
        self.time_proj = nn.Linear(cfg.time_dim, h)
        self.spk_proj = nn.Linear(cfg.speaker_dim, h, bias=False)
        self.conv_in = GLUConv(cfg.n_mels + cfg.content_dim, h, k)
        self.enc1 = GLUConv(h, h, k)
        self.down1 = GLUConv(h, h, k, stride=2)
        self.enc2 = GLUConv(h, h, k)
        self.down2 = GLUConv(h, h, k, stride=2)
        self.mid1 = GLUConv(h, h, k)
        self.mid2 = GLUConv(h, h, k)
        self.up1 = GLUConv(h, h, k, transpose=True)
        self.dec1 = GLUConv(h, h, k)
        self.up2 = GLUConv(h, h, k, transpose=True)
        self.dec2 = GLUConv(h, h, k)
        self.conv_out = weight_norm(nn.Conv1d(h, cfg.n_mels, k, padding=k // 2))

    def forward(self, x, t, s, p):
        n = x.shape[-1]
        pad = (-n) % 4
        if pad:
            x = F.pad(x, (0, pad))
            p = F.pad(p, (0, pad))
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1).expand(x.shape[0])
        c = (self.time_proj(timestep_embedding(t, self.cfg.time_dim).to(x.dtype)) + self.spk_proj(s))[..., None]
        # same-resolution blocks are residual
        h = self.conv_in(torch.cat([x, p], dim=1)) + c
        skip1 = h + self.enc1(h) + c
        h = self.down1(skip1) + c
        skip2 = h + self.enc2(h) + c
        h = self.down2(skip2) + c
        h = h + self.mid1(h) + c
        h = h + self.mid2(h) + c
        h = self.up1(h) + skip2
        h = h + self.dec1(h) + c
        h = self.up2(h) + skip1
        h = h + self.dec2(h) + c
        out = self.conv_out(h)
        return out[..., :n]


# --------------------------------------------------------------------------- teacher training


@dataclass
class TeacherTrainConfig:
    steps: int = 3000
    batch_size: int = 16
    segment_frames: int = 64
    learning_rate: float = 2e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    seed: int = 0
    log_every: int = 100


def epsilon_mse(denoiser, x0, t, eps, s, p, sched) -> torch.Tensor:
    x_t = diffuse(x0, t, eps, sched)
    return F.mse_loss(denoiser(x_t, sched.model_t(t), s, p), eps)


def train_teacher(data, sched: NoiseSchedule, dcfg: DenoiserConfig, tcfg: TeacherTrainConfig,
                  denoiser: Denoiser | None = None, log_rows: list | None = None) -> tuple[Denoiser, dict]:
    """Epsilon-prediction training. ``data`` is a :class:`vpfd.dataset.MelDataset`."""
    torch.manual_seed(tcfg.seed)
    denoiser = denoiser if denoiser is not None else Denoiser(dcfg)
    rng = np.random.default_rng(tcfg.seed)
    gen = torch.Generator().manual_seed(tcfg.seed)

    eval_rng = np.random.default_rng(tcfg.seed + 1)
    ex, es, ep = data.sample(eval_rng, tcfg.batch_size, tcfg.segment_frames)
    eg = torch.Generator().manual_seed(tcfg.seed + 1)
    et = torch.randint(1, sched.T + 1, (ex.shape[0],), generator=eg)
    eeps = torch.randn(ex.shape, generator=eg)

    with torch.no_grad():
        init_mse = epsilon_mse(denoiser, ex, et, eeps, es, ep, sched).item()
    opt = torch.optim.Adam(denoiser.parameters(), tcfg.learning_rate, betas=(tcfg.adam_beta1, tcfg.adam_beta2))
    for step in range(1, tcfg.steps + 1):
        x0, s, p = data.sample(rng, tcfg.batch_size, tcfg.segment_frames)
        t = torch.randint(1, sched.T + 1, (x0.shape[0],), generator=gen)
        eps = torch.randn(x0.shape, generator=gen)
        loss = epsilon_mse(denoiser, x0, t, eps, s, p, sched)
        if not torch.isfinite(loss):
            raise NumericalError(f"teacher training diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log_rows is not None:
            log_rows.append({"step": step, "eps_mse": loss.item()})
        if step % tcfg.log_every == 0:
            logger.info("teacher step %d eps_mse %.4f", step, loss.item())
    with torch.no_grad():
        final_mse = epsilon_mse(denoiser, ex, et, eeps, es, ep, sched).item()
    return denoiser, {"steps": tcfg.steps, "init_eps_mse": init_mse, "final_eps_mse": final_mse}


def save_denoiser(path, denoiser: Denoiser, kind: str = "denoiser", schedule: dict | None = None, meta=None,
                  extra: dict | None = None):
    cfg = {"denoiser": denoiser.cfg.to_dict(), "schedule": schedule or {}, **(extra or {})}
    return save_checkpoint(path, kind, denoiser.state_dict(), cfg, meta)


def load_denoiser(path, kind: str = "denoiser") -> tuple[Denoiser, Checkpoint]:
    ckpt = load_checkpoint(path, kind=kind)
    model = Denoiser(DenoiserConfig(**ckpt.config["denoiser"]))
    model.load_state_dict(ckpt.tensors)
    return model, ckpt
