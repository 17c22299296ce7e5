"""Mini-batch generator training against a frozen speaker encoder.

Each step draws K crops, perturbs their STFT magnitudes, and minimizes the
weighted perceptual + angular + batch-mean objective. Speaker labels ride
along in :class:`TrainingBatch` for logging only; :func:`batch_objective`
receives audio and models, nothing else.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

from .corpus import Corpus
from .encoder import SpeakerEncoder, parameter_digest
from .generator import GeneratorConfig, PerturbationGenerator, save_generator
from .checkpoint import load_checkpoint
from .losses import BatchLossBreakdown, DegenerateBatchError, LossWeights, total_loss
from .signal import SAMPLE_RATE, FbankConfig, StftConfig, clamp_magnitude, log_fbank_tensor, stft_tensor

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 32
    crop_seconds: float = 3.0
    peak_lr: float = 1e-3
    warmup_steps: int = 9600
    decay_rate: float = 0.9999
    total_steps: int = 100_000
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    grad_clip: float = 5.0
    checkpoint_every: int = 1000

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be at least 1")
        if not 0 < self.decay_rate <= 1:
            raise ValueError("decay_rate must be in (0, 1]")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        base = cls(crop_seconds=1.0, warmup_steps=50, decay_rate=0.999, total_steps=1000, checkpoint_every=250)
        return replace(base, **overrides)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up to ``peak_lr`` at ``warmup_steps``, exponential decay afterwards."""
    if step < 1:
        raise ValueError("steps are counted from 1")
    if step <= cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    return cfg.peak_lr * cfg.decay_rate ** (step - cfg.warmup_steps)


@dataclass
class TrainingBatch:
    audio: torch.Tensor
    speakers: list[str]
    utt_ids: list[str]
    padded: list[bool]


def sample_batch(corpus: Corpus, cfg: TrainConfig, seed: int, step: int) -> TrainingBatch:
    """The batch for ``step``; a pure function of (corpus, cfg, seed, step)."""
    rng = np.random.default_rng([seed, step])
    groups = corpus.by_speaker()
    speakers = sorted(groups)
    K = cfg.batch_size
    chosen = rng.choice(len(speakers), size=K, replace=len(speakers) < K)
    crop = int(round(cfg.crop_seconds * SAMPLE_RATE))
    rows, names, ids, padded = [], [], [], []
    for s in chosen:
        utts = groups[speakers[s]]
        u = utts[rng.integers(len(utts))]
        x = u.load().samples
        if x.size >= crop:
            start = int(rng.integers(0, x.size - crop + 1))
            rows.append(x[start:start + crop])
            padded.append(False)
        else:
            logger.info("utterance %s shorter than crop; zero-padded", u.utt_id)
            rows.append(np.pad(x, (0, crop - x.size)))
            padded.append(True)
        names.append(u.speaker)
        ids.append(u.utt_id)
    return TrainingBatch(torch.tensor(np.stack(rows), dtype=torch.float32), names, ids, padded)


def make_batches(corpus: Corpus, cfg: TrainConfig, seed: int | None = None, start_step: int = 1) -> Iterator[TrainingBatch]:
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    seed = cfg.seed if seed is None else seed
    step = start_step
    while True:
        yield sample_batch(corpus, cfg, seed, step)
        step += 1


def batch_objective(
    audio: torch.Tensor,
    generator: PerturbationGenerator,
    encoder: SpeakerEncoder,
    weights: LossWeights,
    stft_cfg: StftConfig = StftConfig(),
    fb: FbankConfig = FbankConfig(),
) -> BatchLossBreakdown:
    """Forward pass S -> P -> S~ -> F~ -> z~ and the weighted loss breakdown."""
    mag, _ = stft_tensor(audio, stft_cfg)
    with torch.no_grad():
        feats = log_fbank_tensor(mag, fb, stft_cfg)
        z = encoder(feats)
    mag_adv = clamp_magnitude(mag + generator(mag))
    feats_adv = log_fbank_tensor(mag_adv, fb, stft_cfg)
    z_adv = encoder(feats_adv)
    return total_loss(feats, feats_adv, z, z_adv, weights)


@dataclass
class StepResult:
    step: int
    lr: float
    breakdown: BatchLossBreakdown | None
    grad_norm: float | None = None
    clipped: bool = False

    def record(self, weights: LossWeights) -> dict:
        rec = {"step": self.step, "lr": self.lr}
        if self.breakdown is None:
            rec.update(skipped=True)
        else:
            rec.update(self.breakdown.scalars(), skipped=False, grad_norm=self.grad_norm, clipped=self.clipped)
        rec.update(alpha=weights.alpha, beta=weights.beta, gamma=weights.gamma)
        return rec


def train_step(
    batch: TrainingBatch,
    generator: PerturbationGenerator,
    encoder: SpeakerEncoder,
    optimizer: torch.optim.Optimizer,
    cfg: TrainConfig,
    step: int,
    stft_cfg: StftConfig = StftConfig(),
    fb: FbankConfig = FbankConfig(),
) -> StepResult:
    if not encoder.frozen:
        raise ValueError("the speaker encoder must be frozen before generator training")
    lr = lr_schedule(step, cfg)
    for group in optimizer.param_groups:
        group["lr"] = lr
    generator.train()
    try:
        breakdown = batch_objective(batch.audio, generator, encoder, cfg.loss_weights, stft_cfg, fb)
    except DegenerateBatchError as exc:
        logger.warning("step %d skipped: %s", step, exc)
        return StepResult(step, lr, None)
    optimizer.zero_grad()
    breakdown.total.backward()
    norm = float(torch.nn.utils.clip_grad_norm_(generator.parameters(), cfg.grad_clip))
    clipped = norm > cfg.grad_clip
    if clipped:
        logger.debug("step %d: gradient norm %.3f clipped to %.1f", step, norm, cfg.grad_clip)
    optimizer.step()
    return StepResult(step, lr, breakdown, norm, clipped)


def make_optimizer(generator: PerturbationGenerator, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(generator.parameters(), lr=lr_schedule(1, cfg))


def _checkpoint(path, generator, optimizer, step, cfg, digest):
    save_generator(
        path,
        generator,
        optimizer=optimizer.state_dict(),
        step=step,
        train_config=_config_record(cfg),
        encoder_digest=digest,
        rng_state=torch.get_rng_state(),
    )


def _config_record(cfg: TrainConfig) -> dict:
    rec = asdict(cfg)
    rec["loss_weights"] = asdict(cfg.loss_weights)
    return rec


def train_generator(
    corpus: Corpus,
    encoder: SpeakerEncoder,
    cfg: TrainConfig,
    out_dir,
    generator_cfg: GeneratorConfig = GeneratorConfig.desk(),
    stft_cfg: StftConfig = StftConfig(),
    fb: FbankConfig = FbankConfig(),
    stop_at: int | None = None,
) -> PerturbationGenerator:
    """Train to ``cfg.total_steps`` (or ``stop_at``), resuming from ``out_dir/last.pt`` if present.

    Writes ``metrics.jsonl`` (one record per completed step), periodic
    ``step_XXXXXX.pt`` checkpoints, ``last.pt`` and ``final.pt``.
    """
    if not encoder.frozen:
        raise ValueError("the speaker encoder must be frozen before generator training")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    last, metrics_path = out / "last.pt", out / "metrics.jsonl"
    digest = parameter_digest(encoder)

    torch.manual_seed(cfg.seed)
    generator = PerturbationGenerator(generator_cfg)
    optimizer = make_optimizer(generator, cfg)
    done = 0
    if last.exists():
        payload = load_checkpoint(last, "generator")
        if payload.get("encoder_digest") != digest:
            raise ValueError(f"{last} was trained against a different encoder")
        generator.load_state_dict(payload["state_dict"])
        optimizer.load_state_dict(payload["optimizer"])
        torch.set_rng_state(payload["rng_state"])
        done = int(payload["step"])
        logger.info("resuming from step %d", done)
    _truncate_metrics(metrics_path, done)

    end = min(cfg.total_steps, stop_at) if stop_at is not None else cfg.total_steps
    with metrics_path.open("a", encoding="utf-8") as log:
        for step in range(done + 1, end + 1):
            batch = sample_batch(corpus, cfg, cfg.seed, step)
            result = train_step(batch, generator, encoder, optimizer, cfg, step, stft_cfg, fb)
            log.write(json.dumps(result.record(cfg.loss_weights)) + "\n")
            log.flush()
            if step % cfg.checkpoint_every == 0 or step == end:
                _checkpoint(last, generator, optimizer, step, cfg, digest)
                if step % cfg.checkpoint_every == 0:
                    _checkpoint(out / f"step_{step:06d}.pt", generator, optimizer, step, cfg, digest)
            if step % 50 == 0 and result.breakdown is not None:
                logger.info("step %d lr %.2e %s", step, result.lr, result.breakdown.scalars())
    if parameter_digest(encoder) != digest:
        raise RuntimeError("frozen encoder parameters changed during training")
    if end == cfg.total_steps:
        _checkpoint(out / "final.pt", generator, optimizer, end, cfg, digest)
    generator.eval()
    return generator


def _truncate_metrics(path: Path, steps: int) -> None:
    if not path.exists():
        return
    lines = path.read_text(encoding="utf-8").splitlines(keepends=True)
    kept = [ln for ln in lines if json.loads(ln)["step"] <= steps]
    path.write_text("".join(kept), encoding="utf-8")
