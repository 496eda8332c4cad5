import pytest
import torch
from hypothesis import settings

from vpfd.audio import TOY_MEL, MelConfig, SyntheticCorpusSpec, generate_corpus
from vpfd.conditioning import Providers
from vpfd.dataset import MelDataset

settings.register_profile("ci", deadline=None, max_examples=25)
settings.load_profile("ci")

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def toy_mel_cfg():
    return MelConfig(**TOY_MEL)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(SyntheticCorpusSpec(n_speakers=2, sentences_per_speaker=2, duration=0.5, seed=3))


@pytest.fixture(scope="session")
def small_dataset(small_corpus, toy_mel_cfg):
    return MelDataset(small_corpus, toy_mel_cfg, Providers.toy(toy_mel_cfg.n_mels))


@pytest.fixture(scope="session")
def pipeline():
    from pipeline import build_pipeline

    return build_pipeline()


@pytest.fixture(scope="session")
def distilled(pipeline):
    from pipeline import distill

    return distill(pipeline)


# smallest settings that still exercise every CLI stage
TINY_CLI = [
    "data.sentences_per_speaker=2", "data.duration=0.5",
    "vocoder_train.steps=4", "vocoder_train.batch_size=2", "vocoder_train.log_every=2",
    "denoiser.hidden=16", "teacher.steps=4", "teacher.batch_size=2", "teacher.segment_frames=32",
    "trainer.max_steps=3", "trainer.batch_size=2", "trainer.segment_frames=40", "trainer.eval_batch=2",
    "trainer.eval_steps=2", "trainer.eval_every=2", "trainer.checkpoint_every=2",
]
TRAINING_COMMANDS = ("gen-data", "pretrain-vocoder", "pretrain-teacher", "distill")


def run_cli(args, root):
    from vpfd.cli import main

    sets = [x for kv in TINY_CLI for x in ("--set", kv)]
    return main([*args, "--root", str(root), *sets])


@pytest.fixture(scope="session")
def cli_roots(tmp_path_factory):
    """Two independent runs of every training stage with identical seeds."""
    roots = [tmp_path_factory.mktemp(name) for name in ("cli_a", "cli_b")]
    for root in roots:
        for cmd in TRAINING_COMMANDS:
            assert run_cli([cmd], root) == 0, cmd
    return roots


ACCEPTANCE = {}  # criterion number -> result line, filled by test_acceptance


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
