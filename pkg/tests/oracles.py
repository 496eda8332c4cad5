"""Independent reference computations shared by the unit and acceptance tests."""

import numpy as np
import torch

from vpfd.diffusion import Denoiser, DenoiserConfig
from vpfd.discriminators import HEAD_KERNEL

# smallest denoiser instance with the production topology: 97 parameters
TINY_DENOISER = DenoiserConfig(n_mels=1, speaker_dim=1, content_dim=1, hidden=1, kernel_size=1, time_dim=2)


def central_difference(f, params, h=1e-3):
    """Gradient of scalar ``f()`` w.r.t. every tensor in ``params`` by central differences."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = float(f())
                flat[i] = old - h
                down = float(f())
                flat[i] = old
                gflat[i] = (up - down) / (2 * h)
            grads.append(g)
    return grads


def analytic_gradient(f, params):
    for p in params:
        p.grad = None
    f().backward()
    return [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]


def relative_error(a, b) -> float:
    a = torch.cat([x.reshape(-1) for x in a]).double()
    b = torch.cat([x.reshape(-1) for x in b]).double()
    scale = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / scale


def gradient_check(f, params, h=1e-3) -> float:
    return relative_error(analytic_gradient(f, params), central_difference(f, params, h))


class OracleDenoiser:
    """Returns the exact noise that produced ``x_t`` from a known ``x0`` (indexes the base schedule)."""

    def __init__(self, x0, base_sched):
        self.x0 = x0
        self.abar = torch.as_tensor(base_sched.alpha_bar, dtype=torch.float64)

    def __call__(self, x_t, t_model, s, p):
        a = self.abar[torch.as_tensor(t_model) - 1].to(x_t.dtype).view(-1, *([1] * (x_t.dim() - 1)))
        return (x_t - a.sqrt() * self.x0) / (1 - a).sqrt()


def tiny_denoiser(seed=0):
    torch.manual_seed(seed)
    return Denoiser(TINY_DENOISER).double()


def monte_carlo_variance(sample, n, seed=0):
    """Per-cell sample variance and its standard error under a Gaussian model."""
    g = torch.Generator().manual_seed(seed)
    draws = sample(n, g).double()
    var = draws.var(dim=0, unbiased=True)
    se = var * np.sqrt(2.0 / (n - 1))
    return draws, var, se


def expected_head(vcfg, L):
    """Closed-form head structure: (role, kernel, stride, in, out) per conv in execution order.

    Down convs use kernel 2 x rate at the mirrored rate, every other conv uses
    the fixed head kernel, and each stage outputs the vocoder width at its scale.
    """
    ch = [vcfg.channels(i) for i in range(vcfg.n_stages + 1)]
    rows = [("conv", HEAD_KERNEL, 1, ch[L], ch[L])] + [("conv", HEAD_KERNEL, 1, ch[L], ch[L])] * 2
    for level in range(L, 0, -1):
        r = vcfg.upsample_rates[level - 1]
        out = ch[level - 1]
        rows += [("down", 2 * r, r, ch[level], out), ("conv", HEAD_KERNEL, 1, out + ch[level - 1], out)]
        rows += [("conv", HEAD_KERNEL, 1, out, out)] * 2
    rows.append(("score", HEAD_KERNEL, 1, ch[0], 1))
    return rows
