"""The eight acceptance criteria, each printing one PASS/FAIL line."""

import time
from contextlib import contextmanager

import pytest
import torch

from conftest import ACCEPTANCE, TRAINING_COMMANDS
from oracles import (
    TINY_DENOISER,
    expected_head,
    gradient_check,
    monte_carlo_variance,
    tiny_denoiser,
)
from vpfd.audio import TOY_MEL, MelConfig, SyntheticCorpusSpec, generate_corpus
from vpfd.bench import TABLE1_VARIANTS, BenchConfig, BenchSuite, emit_report, run_suite
from vpfd.checkpoint import load_checkpoint
from vpfd.cli import main
from vpfd.conditioning import Providers
from vpfd.dataset import MelDataset
from vpfd.diffusion import Denoiser, DenoiserConfig, diffuse, epsilon_mse, make_schedule, reverse_step, schedule_from_betas
from vpfd.discriminators import parse_architecture
from vpfd.distill import DistillConfig, build_state, run_distillation
from vpfd.losses import LossWeights, feature_matching, lsgan_d, lsgan_g, score_distillation, total_g
from vpfd.vocoder import Vocoder, VocoderConfig, VocoderTrainConfig, load_vocoder, pretrain_vocoder, save_vocoder

T = torch.tensor


@contextmanager
def criterion(n, title, budget_s, capsys):
    """Run one criterion body; record and print its PASS/FAIL line, including the runtime bound."""
    detail = {}
    t0 = time.perf_counter()
    ok = False
    try:
        yield detail
        elapsed = time.perf_counter() - t0 + detail.pop("extra_seconds", 0.0)
        detail["runtime_s"] = round(elapsed, 1)
        assert elapsed < budget_s, f"runtime {elapsed:.1f}s exceeds {budget_s}s"
        ok = True
    finally:
        info = " ".join(f"{k}={v}" for k, v in detail.items())
        line = f"ACCEPTANCE {n} {'PASS' if ok else 'FAIL'}: {title} [{info}]"
        ACCEPTANCE[n] = line
        with capsys.disabled():
            print("\n" + line)


# ---------------------------------------------------------------- 1


def test_criterion_1_loss_arithmetic(capsys):
    with criterion(1, "loss arithmetic suite", 60, capsys) as d:
        sd_sched = schedule_from_betas([0.75])  # abar_1 = 0.25
        phi, theta = torch.full((1, 2, 2), 3.0, dtype=torch.float64), torch.full((1, 2, 2), 1.0, dtype=torch.float64)
        x = torch.randn(2, 3, 4, dtype=torch.float64)
        feats = [torch.randn(3), torch.randn(2, 2)]
        cases = [
            ("lsgan_d perfect", lsgan_d(torch.ones(4), torch.zeros(4)), 0.0),
            ("lsgan_d 0.5/0.5", lsgan_d(torch.full((4,), 0.5), torch.full((4,), 0.5)), 0.5),
            ("lsgan_d swapped", lsgan_d(T([1.0, 0.0]), T([0.0, 1.0])), 1.0),
            ("lsgan_g fake=1", lsgan_g(torch.ones(3)), 0.0),
            ("lsgan_g fake=0", lsgan_g(torch.zeros(3)), 1.0),
            ("lsgan_g fake=0.5", lsgan_g(T([0.5, 0.5])), 0.25),
            ("fm identical", feature_matching(feats, [f.clone() for f in feats]), 0.0),
            ("fm one layer", feature_matching([T([1.0, 2.0])], [T([0.0, 0.0])]), 1.5),
            ("fm two layers", feature_matching([torch.zeros(3), torch.ones(2, 2)], [torch.ones(3), torch.full((2, 2), 2.0)]), 2.0),
            ("distill equal", score_distillation(x, x.clone(), torch.ones(2, dtype=torch.long), sd_sched), 0.0),
            ("distill 0.5*2", score_distillation(phi, theta, T([1]), sd_sched), 1.0),
            ("total_g paper weights", total_g(1.0, 1.0, 1.0), 48.0),
            ("total_g zero", total_g(0.0, 0.0, 0.0), 0.0),
            ("total_g ablation", total_g(0.7, 5.0, 9.0, LossWeights(0.0, 0.0)), 0.7),
        ]
        errors = {name: abs(float(v) - e) for name, v, e in cases}
        d["cases"] = len(cases)
        d["max_abs_err"] = f"{max(errors.values()):.1e}"
        theta_g = torch.randn(2, 3, 4, requires_grad=True)
        score_distillation(torch.randn(2, 3, 4, requires_grad=True), theta_g, T([3, 9]), make_schedule(100)).backward()
        assert theta_g.grad is None or not theta_g.grad.any(), "gradient leaked into the teacher branch"
        assert all(e < 1e-9 for e in errors.values()), {k: v for k, v in errors.items() if v >= 1e-9}


# ---------------------------------------------------------------- 2


def test_criterion_2_diffusion_identities(capsys):
    with criterion(2, "diffusion identities", 120, capsys) as d:
        sched = make_schedule(1000)
        t, n = 250, 100_000
        x0 = torch.tensor([[0.5, -1.0], [2.0, 0.0]], dtype=torch.float64)
        _, var, se = monte_carlo_variance(
            lambda n, g: diffuse(x0.expand(n, 2, 2), t, torch.randn(n, 2, 2, generator=g, dtype=torch.float64), sched), n
        )
        z = torch.abs(var - (1 - sched.alpha_bar[t - 1])) / se
        d["variance_max_z"] = round(z.max().item(), 2)

        g = torch.Generator().manual_seed(1)
        x0 = torch.randn(4, 80, 16, generator=g, dtype=torch.float64)
        eps = torch.randn(x0.shape, generator=g, dtype=torch.float64)
        mu = reverse_step(diffuse(x0, 1, eps, sched), 1, None, None, lambda *a: eps, sched)
        d["oracle_t1_err"] = f"{torch.max(torch.abs(mu - x0)).item():.1e}"

        running, worst = 1.0, 0.0
        for i in range(sched.T):
            running *= 1.0 - sched.beta[i]
            worst = max(worst, abs(running - sched.alpha_bar[i]))
        d["abar_product_err"] = f"{worst:.1e}"
        assert torch.all(z < 3)
        assert torch.max(torch.abs(mu - x0)) < 1e-6
        assert worst < 1e-12


# ---------------------------------------------------------------- 3


def test_criterion_3_gradient_checks(capsys):
    with criterion(3, "finite-difference gradient checks", 300, capsys) as d:
        g = torch.Generator().manual_seed(0)
        a, b = (torch.randn(12, generator=g, dtype=torch.float64, requires_grad=True) for _ in range(2))
        r1 = torch.randn(12, generator=g, dtype=torch.float64)
        phi = torch.randn(3, 2, 5, generator=g, dtype=torch.float64, requires_grad=True)
        theta = torch.randn(3, 2, 5, generator=g, dtype=torch.float64)
        sched = make_schedule(100)

        model = tiny_denoiser(0)
        n_params = sum(p.numel() for p in model.parameters())
        x0 = torch.randn(2, TINY_DENOISER.n_mels, 8, generator=g, dtype=torch.float64)
        eps = torch.randn(x0.shape, generator=g, dtype=torch.float64)
        s = torch.randn(2, TINY_DENOISER.speaker_dim, generator=g, dtype=torch.float64)
        p = torch.randn(2, TINY_DENOISER.content_dim, 8, generator=g, dtype=torch.float64)
        tt = torch.tensor([3, 70])

        errs = {
            "lsgan_d": gradient_check(lambda: lsgan_d(a, b), [a, b]),
            "lsgan_g": gradient_check(lambda: lsgan_g([a, b]), [a, b]),
            "fm": gradient_check(lambda: feature_matching([r1], [a]), [a]),
            "distill": gradient_check(lambda: score_distillation(phi, theta, T([1, 40, 100]), sched), [phi]),
            "eps_mse": gradient_check(lambda: epsilon_mse(model, x0, tt, eps, s, p, sched), list(model.parameters())),
        }
        d.update({k: f"{v:.1e}" for k, v in errs.items()})
        d["denoiser_params"] = n_params
        assert n_params <= 100 and phi.numel() <= 100
        assert all(v < 1e-3 for v in errs.values()), errs


# ---------------------------------------------------------------- 4


def test_criterion_4_vpfd_structure(tmp_path, capsys):
    with criterion(4, "VPFD head structure via dump-arch", 60, capsys) as d:
        vcfg = VocoderConfig(upsample_rates=(4, 4, 2, 2))
        assert main(["dump-arch", "--root", str(tmp_path), "--set", "arch.all_depths=true",
                     "--set", "vocoder.upsample_rates=[4, 4, 2, 2]"]) == 0
        capsys.readouterr()
        checked = 0
        for L in range(5):
            text = (tmp_path / "arch" / f"vpfd_L{L}.txt").read_text()
            rows = parse_architecture(text)
            got = [(r["role"], r["kernel"], r["stride"], r["in_channels"], r["out_channels"]) for r in rows]
            assert got == expected_head(vcfg, L), f"L={L}"
            assert all(r["weight_norm"] for r in rows), f"L={L}: conv without weight norm"
            assert f"head_rates={list(reversed(vcfg.upsample_rates[:L]))}" in text.splitlines()[1]
            downs = [r for r in rows if r["role"] == "down"]
            assert [r["kernel"] for r in downs] == [2 * r["stride"] for r in downs]
            assert all(r["kernel"] == 21 for r in rows if r["role"] != "down")
            checked += len(rows)
        d["convs_checked"] = checked


# ---------------------------------------------------------------- 5


def _tensor_bytes(state, prefix):
    return {k: v.numpy().tobytes() for k, v in state.items() if k.startswith(prefix)}


def test_criterion_5_freeze_pretrain_grid(tmp_path, capsys):
    with criterion(5, "freeze/pretrain grid, one epoch each", 600, capsys) as d:
        mel_cfg = MelConfig(**TOY_MEL)
        corpus = generate_corpus(SyntheticCorpusSpec(n_speakers=2, sentences_per_speaker=4, duration=1.0, seed=1))
        voc, _ = pretrain_vocoder(corpus, VocoderConfig(), mel_cfg, VocoderTrainConfig(steps=20, batch_size=4))
        save_vocoder(tmp_path / "vocoder.safetensors", voc)
        vocoder, ckpt = load_vocoder(tmp_path / "vocoder.safetensors")
        data = MelDataset(corpus, mel_cfg, Providers.toy(80))
        torch.manual_seed(0)
        teacher = Denoiser(DenoiserConfig(hidden=32))
        sched = make_schedule(100)
        voc_bytes = {f"extractor.{k}": v.numpy().tobytes() for k, v in ckpt.tensors.items()
                     if k.startswith(("conv_pre.", "stages.0."))}
        outcome = {}
        for pretrained in (True, False):
            for frozen in (True, False):
                cfg = DistillConfig(vpfd_L=1, extractor_pretrained=pretrained, extractor_frozen=frozen, epochs=1,
                                    batch_size=4, segment_frames=32, eval_batch=2, eval_steps=2, eval_every=0)
                init = _tensor_bytes(build_state(cfg, teacher, vocoder, sched, data.normalizer).disc.state_dict(), "extractor.")
                run_dir = tmp_path / f"p{int(pretrained)}_f{int(frozen)}"
                result = run_distillation(cfg, data, teacher, vocoder, sched, run_dir)
                after = _tensor_bytes(load_checkpoint(run_dir / "discriminator.safetensors").tensors, "extractor.")
                assert len(result.loss_log) == len(data) // cfg.batch_size
                assert init.keys() == after.keys()
                assert (init == {k: voc_bytes[k] for k in init}) == pretrained, "pretrained flag vs initialization"
                assert (after == init) == frozen, "freeze contract"
                outcome[f"pre{int(pretrained)}_frz{int(frozen)}"] = "unchanged" if after == init else "changed"
        d.update(outcome)


# ---------------------------------------------------------------- 6


@pytest.mark.slow
def test_criterion_6_cost_trend(capsys, tmp_path):
    with criterion(6, "cost trend vs extractor depth (200 steps, batch 8, 128 frames)", 1800, capsys) as d:
        mel_cfg = MelConfig(**TOY_MEL)
        corpus = generate_corpus(SyntheticCorpusSpec(n_speakers=2, sentences_per_speaker=2, duration=1.0, seed=2))
        data = MelDataset(corpus, mel_cfg, Providers.toy(80))
        torch.manual_seed(0)
        suite = BenchSuite(BenchConfig(variants=TABLE1_VARIANTS, quality=False), data, Denoiser(DenoiserConfig()),
                           Vocoder(VocoderConfig()), make_schedule(100))
        rows = {r.variant: r for r in run_suite(suite)}
        paths = emit_report(rows.values(), tmp_path)
        with capsys.disabled():
            print("\n" + paths["table1"].read_text(), end="")
        assert all(r.status == "ok" and r.steps == 200 for r in rows.values()), [r.error for r in rows.values()]
        times = [rows[f"vpfd{L}"].wall_time for L in range(5)]
        foot = [rows[f"vpfd{L}"].analytic_footprint for L in range(5)]
        ratio = rows["vwd"].wall_time / rows["vpfd1"].wall_time
        d["times_s"] = "/".join(f"{t:.1f}" for t in times)
        d["vwd_s"] = round(rows["vwd"].wall_time, 1)
        d["vwd_over_vpfd1"] = round(ratio, 2)
        assert all(a < b for a, b in zip(times, times[1:])), "time not strictly monotone in L"
        assert all(a < b for a, b in zip(foot, foot[1:])), "footprint not strictly monotone in L"
        assert ratio >= 2


# ---------------------------------------------------------------- 7


@pytest.mark.slow
def test_criterion_7_end_to_end_distillation(pipeline, distilled, capsys):
    with criterion(7, "end-to-end VPFD_1 distillation, 500 steps", 3600, capsys) as d:
        d["extra_seconds"] = sum(pipeline.timings.values())
        hist = distilled.history
        init, final = hist[0]["mel_l1_teacher"], hist[-1]["mel_l1_teacher"]
        decrease = 1 - final / init
        d["vocoder_mel_l1"] = f"{pipeline.vocoder_meta['init_mel_l1']:.3f}->{pipeline.vocoder_meta['final_mel_l1']:.3f}"
        d["teacher_eps_mse"] = f"{pipeline.teacher_meta['init_eps_mse']:.3f}->{pipeline.teacher_meta['final_eps_mse']:.3f}"
        d["mel_l1_teacher"] = f"{init:.4f}->{final:.4f}"
        d["decrease"] = f"{100 * decrease:.1f}%"
        assert hist[-1]["step"] == 500 and len(distilled.loss_log) == 500
        assert pipeline.vocoder_meta["final_mel_l1"] < pipeline.vocoder_meta["init_mel_l1"]
        assert pipeline.teacher_meta["final_eps_mse"] < pipeline.teacher_meta["init_eps_mse"]
        assert decrease >= 0.20


# ---------------------------------------------------------------- 8


def test_criterion_8_determinism(cli_roots, capsys):
    with criterion(8, "byte-identical checkpoints and logs across reruns", 600, capsys) as d:
        a, b = cli_roots
        compared = 0
        subdirs = {"gen-data": "data", "pretrain-vocoder": "vocoder", "pretrain-teacher": "teacher", "distill": "distill"}
        for cmd in TRAINING_COMMANDS:
            files = sorted(p.relative_to(a) for p in (a / subdirs[cmd]).rglob("*") if p.is_file())
            kinds = {p.suffix for p in files}
            assert ".safetensors" in kinds or ".wav" in kinds, cmd
            for rel in files:
                assert (a / rel).read_bytes() == (b / rel).read_bytes(), f"{cmd}: {rel} differs"
                compared += 1
        d["files_compared"] = compared
        d["entry_points"] = len(TRAINING_COMMANDS)
