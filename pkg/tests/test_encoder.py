import numpy as np
import pytest
import torch

from voxveil.encoder import (
    EncoderConfig,
    SpeakerEmbedding,
    SpeakerEncoder,
    cosine_score,
    embed,
    freeze,
    load_encoder,
    parameter_digest,
    save_encoder,
)
from voxveil.checkpoint import CheckpointError, save_checkpoint
from voxveil.signal import FeatureFrames, Waveform, features


def test_output_shape_and_min_frames(small_encoder):
    z = small_encoder(torch.randn(3, 50, 40))
    assert z.shape == (3, 12)
    with pytest.raises(ValueError, match="at least"):
        small_encoder(torch.randn(1, small_encoder.config.min_frames - 1, 40))


def test_default_dimension():
    assert SpeakerEncoder().config.embed_dim == 192


def test_frozen_encoder_ignores_train_mode(small_encoder):
    small_encoder.train()
    assert not small_encoder.training
    assert all(not p.requires_grad for p in small_encoder.parameters())


def test_embedding_independent_of_batch_companions(small_encoder):
    x = torch.randn(4, 40, 40)
    alone = small_encoder(x[:1])
    together = small_encoder(x)[:1]
    torch.testing.assert_close(alone, together)


def test_input_gradient_nonzero_when_frozen(small_encoder):
    x = torch.randn(1, 40, 40, dtype=torch.float32, requires_grad=True)
    small_encoder(x).pow(2).sum().backward()
    assert x.grad.abs().sum() > 0


def test_cosine_score_properties(rng):
    a = SpeakerEmbedding(rng.normal(size=8))
    b = SpeakerEmbedding(rng.normal(size=8))
    assert cosine_score(a, a) == pytest.approx(1.0)
    assert cosine_score(a, b) == pytest.approx(cosine_score(b, a))
    assert cosine_score(a, SpeakerEmbedding(-a.vector)) == pytest.approx(-1.0)
    with pytest.raises(ValueError):
        SpeakerEmbedding(np.zeros(3))
    with pytest.raises(ValueError):
        cosine_score(a, SpeakerEmbedding(np.ones(4)))


def test_embed_matches_forward(small_encoder, rng):
    f = features(Waveform(rng.uniform(-0.3, 0.3, 8000)))
    e = embed(f, small_encoder)
    with torch.no_grad():
        ref = small_encoder(torch.as_tensor(f.frames, dtype=torch.float32)[None])[0]
    np.testing.assert_allclose(e.vector, ref.double().numpy())


def test_checkpoint_round_trip(tmp_path, small_encoder):
    save_encoder(tmp_path / "e.pt", small_encoder)
    back = load_encoder(tmp_path / "e.pt")
    assert back.frozen
    assert parameter_digest(back) == parameter_digest(small_encoder)


def test_checkpoint_component_tag(tmp_path, small_encoder):
    save_checkpoint(tmp_path / "g.pt", "generator", {}, {})
    with pytest.raises(CheckpointError):
        load_encoder(tmp_path / "g.pt")
    with pytest.raises(FileNotFoundError):
        load_encoder(tmp_path / "missing.pt")


def test_freeze_is_idempotent_on_digest(small_encoder):
    d = parameter_digest(small_encoder)
    freeze(small_encoder)
    small_encoder(torch.randn(2, 30, 40))
    assert parameter_digest(small_encoder) == d


def test_cosine_scale_invariance(rng):
    a, b = rng.normal(size=6), rng.normal(size=6)
    base = cosine_score(SpeakerEmbedding(a), SpeakerEmbedding(b))
    assert cosine_score(SpeakerEmbedding(3.7 * a), SpeakerEmbedding(0.01 * b)) == pytest.approx(base, abs=1e-12)
    assert cosine_score(SpeakerEmbedding(np.array([1.0, 0])), SpeakerEmbedding(np.array([0.0, 1]))) == 0.0


def test_embedding_gradient_matches_finite_differences(small_encoder):
    m = small_encoder.double()
    g = torch.Generator().manual_seed(0)
    x0 = torch.randn(1, 16, 40, dtype=torch.float64, generator=g)
    v = torch.randn(12, dtype=torch.float64, generator=g)

    def f(x):
        return torch.dot(m(x)[0], v)

    x = x0.clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(f(x), x)
    h = 1e-3
    for idx in [(0, 0, 0), (0, 7, 13), (0, 15, 39), (0, 3, 22)]:
        e = torch.zeros_like(x0)
        e[idx] = h
        fd = (f(x0 + e) - f(x0 - e)) / (2 * h)
        assert abs(grad[idx] - fd) / max(abs(fd), 1e-12) < 1e-4


def test_reference_training_is_seeded(tiny_corpus):
    from voxveil.encoder import EncoderTrainConfig, train_reference_encoder

    train, _ = tiny_corpus
    cfg = EncoderTrainConfig(steps=5, batch_size=4, crop_frames=40, encoder=EncoderConfig(channels=8, embed_dim=8))
    a, ra = train_reference_encoder(train, cfg)
    b, rb = train_reference_encoder(train, cfg)
    assert ra.final_loss == pytest.approx(rb.final_loss, rel=1e-6)
    assert parameter_digest(a) == parameter_digest(b)


def test_reference_training_rejects_single_speaker(tiny_corpus):
    from voxveil.corpus import Corpus
    from voxveil.encoder import train_reference_encoder

    one = Corpus([u for u in tiny_corpus[0] if u.speaker == tiny_corpus[0].speakers[0]])
    with pytest.raises(ValueError, match="two speakers"):
        train_reference_encoder(one)
