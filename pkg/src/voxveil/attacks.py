"""Waveform-domain FGSM-family speaker attacks under an L-infinity budget.

The attack loss is the negative cosine between the reference embedding and
the embedding of the candidate waveform; every method ascends it, which
lowers speaker similarity. Gradients are computed in the encoder's dtype
while the iterate and the projection stay in float64, so the budget holds
to rounding of the final addition.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .encoder import SpeakerEncoder
from .signal import PCM_SCALE, FbankConfig, StftConfig, Waveform, load_waveform, save_waveform, waveform_features

logger = logging.getLogger(__name__)

GRAD_NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.0012
    step_size: float = 0.00012
    momentum: float = 1.4
    iterations: int = 10
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.step_size <= self.epsilon:
            raise ValueError("need 0 < step_size <= epsilon")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.momentum < 0:
            raise ValueError("momentum must be nonnegative")


@dataclass(frozen=True)
class GraConfig:
    """Hyperparameters of the gradient relevance attack; parsed but not executable."""

    nearby_samples: int = 10
    epsilon: float = 0.0012
    step_size: float = 0.00012
    iterations: int = 10


@dataclass
class GradientState:
    accumulated: torch.Tensor
    iteration: int = 0


@dataclass
class AttackResult:
    waveform: Waveform
    final_loss: float
    iterations: int
    trajectory: list[np.ndarray] | None = None

    @property
    def samples(self) -> np.ndarray:
        return self.waveform.samples


def clip_linf(candidate, origin, epsilon: float):
    """Project ``candidate`` onto the ``epsilon`` L-inf ball around ``origin``, then onto [-1, 1]."""
    as_wave = isinstance(candidate, Waveform)
    c = candidate.samples if as_wave else candidate
    o = origin.samples if isinstance(origin, Waveform) else origin
    if c.shape != o.shape:
        raise ValueError(f"length mismatch {c.shape} vs {o.shape}")
    if isinstance(c, torch.Tensor):
        o = torch.as_tensor(o, dtype=c.dtype)
        out = torch.minimum(torch.maximum(c, o - epsilon), o + epsilon).clamp(-1.0, 1.0)
        # o +/- epsilon rounds; step offending entries one ulp back toward the origin
        for _ in range(8):
            bad = (out - o).abs() > epsilon
            if not bool(bad.any()):
                break
            out = torch.where(bad, torch.nextafter(out, o), out)
    else:
        out = np.clip(np.minimum(np.maximum(c, o - epsilon), o + epsilon), -1.0, 1.0)
        for _ in range(8):
            bad = np.abs(out - o) > epsilon
            if not bad.any():
                break
            out = np.where(bad, np.nextafter(out, o), out)
    return Waveform(out, candidate.sample_rate) if as_wave else out


def _model_dtype(m):
    return next(m.parameters()).dtype


def reference_embedding(w, m: SpeakerEncoder, stft_cfg=StftConfig(), fb=FbankConfig()) -> torch.Tensor:
    x = torch.as_tensor(w.samples if isinstance(w, Waveform) else w, dtype=_model_dtype(m))
    with torch.no_grad():
        return m(waveform_features(x, stft_cfg, fb).unsqueeze(0))[0]


def untargeted_speaker_loss(w_adv, z_ref, m: SpeakerEncoder, stft_cfg=StftConfig(), fb=FbankConfig()) -> torch.Tensor:
    """``-cos(z_ref, embed(features(w_adv)))``; differentiable in ``w_adv`` when it is a leaf tensor."""
    x = w_adv if isinstance(w_adv, torch.Tensor) else torch.as_tensor(
        w_adv.samples if isinstance(w_adv, Waveform) else w_adv, dtype=_model_dtype(m)
    )
    z_adv = m(waveform_features(x, stft_cfg, fb).unsqueeze(0))[0]
    z_ref = torch.as_tensor(z_ref, dtype=z_adv.dtype)
    return -torch.dot(z_ref, z_adv) / (torch.linalg.vector_norm(z_ref) * torch.linalg.vector_norm(z_adv))


def _loss_and_grad(x64: torch.Tensor, z_ref, m, stft_cfg, fb):
    x = x64.to(_model_dtype(m)).requires_grad_(True)
    loss = untargeted_speaker_loss(x, z_ref, m, stft_cfg, fb)
    (grad,) = torch.autograd.grad(loss, x)
    return loss.item(), grad.to(torch.float64)


def _prepare(w: Waveform, m, stft_cfg, fb):
    if not getattr(m, "frozen", False):
        raise ValueError("attacks require a frozen encoder")
    x = torch.from_numpy(w.samples.copy())
    return x, reference_embedding(x, m, stft_cfg, fb)


def mi_fgsm(
    w: Waveform,
    m: SpeakerEncoder,
    cfg: AttackConfig = AttackConfig(),
    stft_cfg: StftConfig = StftConfig(),
    fb: FbankConfig = FbankConfig(),
    return_trajectory: bool = False,
) -> AttackResult:
    """Momentum iterative FGSM starting from the clean waveform.

    ``g <- momentum * g + grad / ||grad||_1`` then ``x <- clip(x + step * sign(g))``.
    A gradient with L1 norm below 1e-12 contributes nothing.
    """
    x, z_ref = _prepare(w, m, stft_cfg, fb)
    x_adv = x.clone()
    state = GradientState(torch.zeros_like(x))
    traj = [x_adv.numpy().copy()] if return_trajectory else None
    for i in range(cfg.iterations):
        _, grad = _loss_and_grad(x_adv, z_ref, m, stft_cfg, fb)
        l1 = float(grad.abs().sum())
        normalized = grad / l1 if l1 >= GRAD_NORM_FLOOR else torch.zeros_like(grad)
        state.accumulated = cfg.momentum * state.accumulated + normalized
        state.iteration = i + 1
        x_adv = clip_linf(x_adv + cfg.step_size * torch.sign(state.accumulated), x, cfg.epsilon)
        if traj is not None:
            traj.append(x_adv.numpy().copy())
    final = float(untargeted_speaker_loss(x_adv.to(_model_dtype(m)), z_ref, m, stft_cfg, fb).detach())
    return AttackResult(Waveform(x_adv.numpy(), w.sample_rate), final, cfg.iterations, traj)


def i_fgsm(
    w: Waveform,
    m: SpeakerEncoder,
    cfg: AttackConfig = AttackConfig(),
    stft_cfg: StftConfig = StftConfig(),
    fb: FbankConfig = FbankConfig(),
    return_trajectory: bool = False,
) -> AttackResult:
    """Iterative FGSM: repeated signed-gradient steps, no momentum (``cfg.momentum`` is ignored)."""
    x, z_ref = _prepare(w, m, stft_cfg, fb)
    x_adv = x.clone()
    traj = [x_adv.numpy().copy()] if return_trajectory else None
    for _ in range(cfg.iterations):
        _, grad = _loss_and_grad(x_adv, z_ref, m, stft_cfg, fb)
        if float(grad.abs().sum()) < GRAD_NORM_FLOOR:
            grad = torch.zeros_like(grad)
        x_adv = clip_linf(x_adv + cfg.step_size * torch.sign(grad), x, cfg.epsilon)
        if traj is not None:
            traj.append(x_adv.numpy().copy())
    final = float(untargeted_speaker_loss(x_adv.to(_model_dtype(m)), z_ref, m, stft_cfg, fb).detach())
    return AttackResult(Waveform(x_adv.numpy(), w.sample_rate), final, cfg.iterations, traj)


def fgsm(
    w: Waveform,
    m: SpeakerEncoder,
    cfg: AttackConfig = AttackConfig(),
    stft_cfg: StftConfig = StftConfig(),
    fb: FbankConfig = FbankConfig(),
) -> AttackResult:
    """Single signed-gradient step of size ``cfg.epsilon``."""
    x, z_ref = _prepare(w, m, stft_cfg, fb)
    _, grad = _loss_and_grad(x, z_ref, m, stft_cfg, fb)
    if float(grad.abs().sum()) < GRAD_NORM_FLOOR:
        grad = torch.zeros_like(grad)
    x_adv = clip_linf(x + cfg.epsilon * torch.sign(grad), x, cfg.epsilon)
    final = float(untargeted_speaker_loss(x_adv.to(_model_dtype(m)), z_ref, m, stft_cfg, fb).detach())
    return AttackResult(Waveform(x_adv.numpy(), w.sample_rate), final, 1)


def gra(*args, **kwargs):
    raise NotImplementedError("GRA is not implemented: its update rule is unspecified here")


METHODS = {"fgsm": fgsm, "i-fgsm": i_fgsm, "mi-fgsm": mi_fgsm, "gra": gra}


def run_attack(method: str, w: Waveform, m: SpeakerEncoder, cfg: AttackConfig, stft_cfg=StftConfig(), fb=FbankConfig()) -> AttackResult:
    if method not in METHODS:
        raise ValueError(f"unknown attack {method!r}; choose from {sorted(METHODS)}")
    return METHODS[method](w, m, cfg, stft_cfg, fb)


def snap_to_pcm(adv: Waveform, origin: Waveform) -> Waveform:
    """Round the perturbation toward zero onto the 16-bit grid so writing never widens it."""
    delta = np.trunc((adv.samples - origin.samples) * PCM_SCALE) / PCM_SCALE
    return Waveform(np.clip(origin.samples + delta, -1.0, 1.0), adv.sample_rate)


def attack_manifest(method: str, entries, root, out_dir, m: SpeakerEncoder, cfg: AttackConfig) -> list[dict]:
    """Attack every manifest entry; writes WAVs mirroring the relative paths plus ``attack_records.jsonl``.

    The L-inf bound is re-checked against the written 16-bit audio.
    """
    root, out_dir = Path(root), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for rel in entries:
        src = root / rel
        rec = {"input": str(rel), "method": method}
        try:
            w = load_waveform(src)
            res = run_attack(method, w, m, cfg)
            dst = out_dir / rel
            dst.parent.mkdir(parents=True, exist_ok=True)
            save_waveform(snap_to_pcm(res.waveform, w), dst)
            linf = float(np.max(np.abs(load_waveform(dst).samples - w.samples)))
            rec.update(
                output=str(Path(rel)),
                final_loss=res.final_loss,
                iterations=res.iterations,
                linf=linf,
                within_bound=linf <= cfg.epsilon,
            )
        except NotImplementedError:
            raise
        except Exception as exc:  # per-file failures are recorded, the batch continues
            logger.error("%s: %s", rel, exc)
            rec.update(error=str(exc))
        records.append(rec)
    with (out_dir / "attack_records.jsonl").open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    return records
