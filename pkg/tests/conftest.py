import numpy as np
import pytest
import torch

from voxveil.corpus import synthesize_corpus
from voxveil.encoder import EncoderConfig, SpeakerEncoder, freeze


@pytest.fixture(scope="session")
def tiny_corpus():
    """Four speakers, three training and two test utterances each, short clips."""
    return synthesize_corpus(n_speakers=4, utts_per_speaker=5, test_per_speaker=2, duration=(0.6, 0.9), seed=3)


@pytest.fixture()
def small_encoder():
    torch.manual_seed(0)
    m = SpeakerEncoder(EncoderConfig(channels=16, embed_dim=12))
    # give the normalization layers non-trivial running statistics
    m.train()
    with torch.no_grad():
        m(torch.randn(8, 60, 40))
    return freeze(m)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in sorted(results, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {criterion:<3} {'PASS' if passed else 'FAIL'}  {detail}")
