"""Speaker encoders: embedding contract, cosine scoring and a trainable reference model.

Any ``torch.nn.Module`` mapping ``[B, T, n_mels]`` log filterbank frames to
``[B, D]`` embeddings satisfies the contract; :class:`SpeakerEncoder` is the
small dilated-convolution model used at desk scale.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import Corpus
from .signal import FbankConfig, FeatureFrames, StftConfig, features

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SpeakerEmbedding:
    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise ValueError("embedding must be a finite 1-D vector")
        if np.linalg.norm(v) == 0:
            raise ValueError("zero-norm embedding")
        object.__setattr__(self, "vector", v)

    @property
    def dim(self) -> int:
        return self.vector.shape[0]


@dataclass(frozen=True)
class EncoderConfig:
    n_mels: int = 40
    channels: int = 128
    kernel_sizes: tuple[int, ...] = (5, 3, 3)
    dilations: tuple[int, ...] = (1, 2, 3)
    embed_dim: int = 192

    @property
    def min_frames(self) -> int:
        return 1 + sum((k - 1) * d for k, d in zip(self.kernel_sizes, self.dilations))

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        d["kernel_sizes"] = tuple(d["kernel_sizes"])
        d["dilations"] = tuple(d["dilations"])
        return cls(**d)


class SpeakerEncoder(nn.Module):
    """Dilated 1-D convolutions, mean+std statistics pooling, normalized linear projection."""

    def __init__(self, config: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.config = config
        self.frozen = False
        layers = []
        width = config.n_mels
        for k, d in zip(config.kernel_sizes, config.dilations):
            layers += [nn.Conv1d(width, config.channels, k, dilation=d), nn.ReLU(), nn.BatchNorm1d(config.channels)]
            width = config.channels
        self.frames = nn.Sequential(*layers)
        # normalizing the projection centers embeddings so unrelated speakers score near zero
        self.project = nn.Sequential(nn.Linear(2 * config.channels, config.embed_dim), nn.BatchNorm1d(config.embed_dim))

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        if feats.dim() == 2:
            return self.forward(feats.unsqueeze(0)).squeeze(0)
        if feats.shape[-1] != self.config.n_mels:
            raise ValueError(f"expected {self.config.n_mels}-dim frames, got {feats.shape[-1]}")
        if feats.shape[-2] < self.config.min_frames:
            raise ValueError(f"need at least {self.config.min_frames} frames, got {feats.shape[-2]}")
        x = feats - feats.mean(dim=-2, keepdim=True)
        h = self.frames(x.transpose(1, 2))
        stats = torch.cat([h.mean(-1), torch.sqrt(h.var(-1, unbiased=False) + 1e-5)], dim=-1)
        return self.project(stats)

    def train(self, mode: bool = True):
        # a frozen encoder stays in inference mode so normalization statistics never move
        return super().train(mode and not self.frozen)


def freeze(m: SpeakerEncoder) -> SpeakerEncoder:
    m.frozen = True
    for p in m.parameters():
        p.requires_grad_(False)
    m.eval()
    return m


def parameter_digest(m: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(m.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def embed(f: FeatureFrames, m: SpeakerEncoder) -> SpeakerEmbedding:
    dtype = next(m.parameters()).dtype
    with torch.no_grad():
        z = m(torch.as_tensor(f.frames, dtype=dtype).unsqueeze(0))[0]
    return SpeakerEmbedding(z.double().numpy())


def cosine_score(a: SpeakerEmbedding, b: SpeakerEmbedding) -> float:
    va = a.vector if isinstance(a, SpeakerEmbedding) else np.asarray(a, dtype=np.float64)
    vb = b.vector if isinstance(b, SpeakerEmbedding) else np.asarray(b, dtype=np.float64)
    if va.shape != vb.shape:
        raise ValueError("embedding dimensions differ")
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0 or nb == 0:
        raise ValueError("zero-norm embedding")
    return float(np.clip(va @ vb / (na * nb), -1.0, 1.0))


# -- reference training -------------------------------------------------------


class AdditiveMarginHead(nn.Module):
    def __init__(self, embed_dim: int, n_classes: int, margin: float, scale: float):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(n_classes, embed_dim) * 0.01)
        self.margin = margin
        self.scale = scale

    def forward(self, z: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        cos = F.normalize(z, dim=-1) @ F.normalize(self.weight, dim=-1).T
        logits = self.scale * (cos - self.margin * F.one_hot(labels, cos.shape[1]))
        return F.cross_entropy(logits, labels)


@dataclass
class EncoderTrainConfig:
    steps: int = 600
    batch_size: int = 32
    crop_frames: int = 200
    lr: float = 2e-3
    weight_decay: float = 1e-4
    margin: float = 0.2
    scale: float = 30.0
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)


@dataclass
class EncoderReport:
    final_loss: float
    heldout_eer: float | None
    losses: list[float]


def _crop(frames: torch.Tensor, length: int, gen: torch.Generator) -> torch.Tensor:
    if frames.shape[0] <= length:
        reps = -(-length // frames.shape[0])
        return frames.repeat(reps, 1)[:length]
    start = int(torch.randint(0, frames.shape[0] - length + 1, (1,), generator=gen))
    return frames[start:start + length]


def train_reference_encoder(
    corpus: Corpus,
    cfg: EncoderTrainConfig = EncoderTrainConfig(),
    heldout: Corpus | None = None,
    stft_cfg: StftConfig = StftConfig(),
    fb: FbankConfig = FbankConfig(),
) -> tuple[SpeakerEncoder, EncoderReport]:
    """Classification-train an encoder; the margin-softmax head is discarded afterwards."""
    groups = corpus.by_speaker()
    if len(groups) < 2:
        raise ValueError("reference encoder training needs at least two speakers")
    if min(len(v) for v in groups.values()) < 2:
        raise ValueError("every speaker needs at least two utterances")
    speakers = sorted(groups)
    label_of = {s: i for i, s in enumerate(speakers)}
    feats = [torch.as_tensor(features(u.load(), stft_cfg, fb).frames, dtype=torch.float32) for u in corpus]
    labels = torch.tensor([label_of[u.speaker] for u in corpus])

    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    model = SpeakerEncoder(cfg.encoder)
    head = AdditiveMarginHead(cfg.encoder.embed_dim, len(speakers), cfg.margin, cfg.scale)
    opt = torch.optim.Adam(list(model.parameters()) + list(head.parameters()), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=cfg.lr, total_steps=cfg.steps, pct_start=0.1)
    losses = []
    model.train()
    for step in range(cfg.steps):
        idx = torch.randint(0, len(feats), (cfg.batch_size,), generator=gen)
        x = torch.stack([_crop(feats[i], cfg.crop_frames, gen) for i in idx.tolist()])
        loss = head(model(x), labels[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        losses.append(loss.item())
        if step % 100 == 0:
            logger.info("encoder step %d loss %.4f", step, losses[-1])
    model.eval()

    eer = None
    if heldout is not None:
        from .evaluation import evaluate_protocol

        eer = evaluate_protocol(heldout, model, protocol="original", seed=cfg.seed, stft_cfg=stft_cfg, fb=fb).eer
        logger.info("held-out original-speech EER %.4f", eer)
    return model, EncoderReport(losses[-1], eer, losses)


def save_encoder(path, m: SpeakerEncoder, **extra) -> None:
    save_checkpoint(path, "encoder", asdict(m.config), m.state_dict(), **extra)


def load_encoder(path) -> SpeakerEncoder:
    payload = load_checkpoint(path, "encoder")
    m = SpeakerEncoder(EncoderConfig.from_dict(payload["config"]))
    m.load_state_dict(payload["state_dict"])
    return freeze(m)
