import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from oracles import expected_head
from vpfd.discriminators import (
    MELD_PRESETS,
    MelDConfig,
    MelDDiscriminator,
    MelDiscriminator,
    PeriodDiscriminator,
    VPFDConfig,
    VPFDDiscriminator,
    VWDConfig,
    VWDDiscriminator,
    WaveformDiscriminator,
    build_vpfd,
    dump_architecture,
    extractor_layer_counts,
    has_weight_norm,
    meld_score,
    parse_architecture,
    reshape_for_period,
    vpfd_score,
    vwd_score,
)
from vpfd.vocoder import Vocoder, VocoderConfig

VCFG = VocoderConfig()


@pytest.fixture(scope="module")
def vocoder():
    torch.manual_seed(0)
    return Vocoder(VCFG)


@pytest.mark.parametrize("L", range(5))
def test_head_structure_matches_closed_form(L):
    head = build_vpfd(VCFG, L)
    rows = parse_architecture(dump_architecture(head))
    got = [(r["role"], r["kernel"], r["stride"], r["in_channels"], r["out_channels"]) for r in rows]
    assert got == expected_head(VCFG, L)
    assert all(r["weight_norm"] for r in rows)
    assert head.rates == list(reversed(VCFG.upsample_rates[:L]))
    convs = [m for m in head.modules() if isinstance(m, torch.nn.Conv1d)]
    assert len(convs) == len(rows) and all(has_weight_norm(c) for c in convs)


def test_head_examples():
    assert [r["kernel"] for r in build_vpfd(VCFG, 1).describe() if r["role"] == "down"] == [8]
    assert [r["kernel"] for r in build_vpfd(VCFG, 2).describe() if r["role"] == "down"] == [8, 8]
    zero = build_vpfd(VCFG, 0).describe()
    assert not [r for r in zero if r["role"] == "down"] and {r["kernel"] for r in zero} == {21}
    with pytest.raises(ValueError):
        build_vpfd(VCFG, 5)
    with pytest.raises(ValueError):
        build_vpfd(VCFG, 1, channel_rule="other")


def test_layers_channel_rule(vocoder):
    convs = lambda m: sum(isinstance(x, (torch.nn.Conv1d, torch.nn.ConvTranspose1d)) for x in m.modules())
    counted = [convs(vocoder.conv_pre)] + [convs(s) for s in vocoder.stages[:2]]
    head = build_vpfd(VCFG, 2, channel_rule="layers")
    assert head.widths == extractor_layer_counts(VCFG, 2) == counted


@pytest.mark.parametrize("L", range(5))
def test_score_length_is_frame_count(vocoder, L):
    torch.manual_seed(L)
    head = build_vpfd(VCFG, L)
    x = torch.randn(2, 80, 11)
    with torch.no_grad():
        out = vpfd_score(vocoder.pyramid(x, L), head)
    assert out.score.shape == (2, 1, 11)
    assert len(out.features) == head.n_layer_features
    assert all(torch.isfinite(f).all() for f in out.features)


def test_head_depth_mismatch(vocoder):
    with pytest.raises(ValueError):
        build_vpfd(VCFG, 2)(vocoder.pyramid(torch.randn(1, 80, 4), 1))


def test_head_batch_independence(vocoder):
    torch.manual_seed(0)
    disc = VPFDDiscriminator(vocoder, VPFDConfig(L=2))
    x = torch.randn(2, 80, 9)
    with torch.no_grad():
        both = disc(x)[0].score
        single = torch.cat([disc(x[i : i + 1])[0].score for i in range(2)])
    torch.testing.assert_close(both, single, atol=1e-6, rtol=0)


def test_period_reshape_arithmetic():
    x = torch.arange(2048.0).view(1, 1, 2048)
    y = reshape_for_period(x, 2)
    assert y.shape == (1, 1, 1024, 2)
    assert torch.equal(y[0, 0, 3], torch.tensor([6.0, 7.0]))


@given(st.integers(2, 11), st.integers(30, 90))
def test_period_padding_contract(period, n):
    torch.manual_seed(0)
    d = PeriodDiscriminator(period, (4, 4, 4, 4))
    x = torch.randn(1, 1, n)
    pad = (-n) % period
    pre = torch.nn.functional.pad(x, (0, pad), "reflect") if pad else x
    with torch.no_grad():
        assert torch.equal(d(x).score, d(pre).score)


def test_vwd_output_count_and_short_input():
    torch.manual_seed(0)
    cfg = VWDConfig()
    disc = WaveformDiscriminator(cfg)
    outs = vwd_score(torch.randn(2, 4096), disc)
    assert len(outs) == len(cfg.periods) + len(cfg.resolutions)
    assert all(len(o.features) >= 1 and torch.isfinite(o.score).all() for o in outs)
    with pytest.raises(ValueError):
        disc(torch.randn(1, 21))
    with pytest.raises(ValueError):
        VWDConfig(periods=(2, 2))
    with pytest.raises(ValueError):
        VWDConfig(periods=(1,))


def test_meld_presets():
    x = torch.randn(2, 80, 17)
    small, large = (MelDiscriminator(MelDConfig(MELD_PRESETS[k])) for k in ("small", "large"))
    a, b = meld_score(x, small), meld_score(x, large)
    assert a.score.shape == b.score.shape == (2, 1, *MelDiscriminator.score_shape(80, 17))
    assert MelDiscriminator.score_shape(80, 17) == (10, 17)
    count = lambda m: sum(p.numel() for p in m.parameters())
    assert count(large) > count(small)


@pytest.mark.parametrize("kind", ["vpfd", "vwd", "meld"])
def test_no_dead_path(vocoder, kind):
    torch.manual_seed(0)
    disc = {
        "vpfd": lambda: VPFDDiscriminator(vocoder, VPFDConfig(L=1)),
        "vwd": lambda: VWDDiscriminator(vocoder, VWDConfig()),
        "meld": lambda: MelDDiscriminator(MelDConfig()),
    }[kind]()
    x = torch.randn(1, 80, 40, requires_grad=True)
    outs = disc(x)
    sum(o.score.mean() for o in outs).backward()
    assert torch.isfinite(x.grad).all() and x.grad.abs().sum() > 0


def test_frozen_extractor_receives_no_update(vocoder):
    torch.manual_seed(0)
    disc = VPFDDiscriminator(vocoder, VPFDConfig(L=2), frozen=True)
    before = {k: v.clone() for k, v in disc.extractor.state_dict().items()}
    head_before = [p.clone() for p in disc.head.parameters()]
    opt = torch.optim.Adam(disc.trainable_parameters(), 1e-2)
    x = torch.randn(2, 80, 8, requires_grad=True)
    disc(x)[0].score.pow(2).mean().backward()
    assert x.grad.abs().sum() > 0
    assert all(p.grad is None for p in disc.extractor.parameters())
    opt.step()
    assert all(torch.equal(before[k], v) for k, v in disc.extractor.state_dict().items())
    assert any(not torch.equal(a, b) for a, b in zip(head_before, disc.head.parameters()))


def test_unfrozen_extractor_is_trainable(vocoder):
    disc = VPFDDiscriminator(vocoder, VPFDConfig(L=1), frozen=False)
    n_extract = sum(p.numel() for p in disc.extractor.parameters())
    assert sum(p.numel() for p in disc.trainable_parameters()) == n_extract + sum(p.numel() for p in disc.head.parameters())


def test_vwd_vocoder_is_frozen_copy(vocoder):
    disc = VWDDiscriminator(vocoder, VWDConfig())
    assert all(not p.requires_grad for p in disc.vocoder.parameters())
    assert all(p.requires_grad for p in vocoder.parameters())
