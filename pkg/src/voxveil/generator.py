"""Conformer perturbation generator and the STFT-domain anonymization pipeline.

The generator reads a magnitude spectrogram ``S`` (``[T, n_bins]``) and emits
a frame-synchronous additive perturbation ``P`` in linear magnitude units.
Anonymized audio is ``istft(max(S + P, 0), original phase)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, save_checkpoint
from .signal import StftConfig, Waveform, clamp_magnitude, istft_tensor, stft_tensor

_ACTIVATIONS = {"relu": nn.ReLU, "swish": nn.SiLU, "gelu": nn.GELU}


@dataclass(frozen=True)
class GeneratorConfig:
    n_blocks: int = 6
    conv_kernel: int = 31
    n_heads: int = 4
    hidden_size: int = 1024
    io_size: int = 256
    attention_dim: int = 256
    activation: str = "relu"
    dropout: float = 0.0

    def __post_init__(self):
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd")
        if self.attention_dim % self.n_heads:
            raise ValueError("n_heads must divide attention_dim")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @classmethod
    def desk(cls, **overrides) -> "GeneratorConfig":
        return replace(cls(n_blocks=2, hidden_size=256, n_heads=2, attention_dim=128), **overrides)


@dataclass(frozen=True)
class Perturbation:
    values: np.ndarray


# -- Conformer pieces ---------------------------------------------------------


class FeedForward(nn.Module):
    def __init__(self, dim, hidden, activation, dropout):
        super().__init__()
        self.net = nn.Sequential(
            nn.LayerNorm(dim),
            nn.Linear(dim, hidden),
            _ACTIVATIONS[activation](),
            nn.Dropout(dropout),
            nn.Linear(hidden, dim),
            nn.Dropout(dropout),
        )

    def forward(self, x):
        return self.net(x)


def relative_sinusoids(length: int, dim: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Sinusoidal encodings of relative offsets ``length-1, ..., -(length-1)``."""
    pos = torch.arange(length - 1, -length, -1, dtype=dtype, device=device).unsqueeze(1)
    freq = torch.exp(torch.arange(0, dim, 2, dtype=dtype, device=device) * (-math.log(10000.0) / dim))
    enc = torch.zeros(2 * length - 1, dim, dtype=dtype, device=device)
    enc[:, 0::2] = torch.sin(pos * freq)
    enc[:, 1::2] = torch.cos(pos * freq)
    return enc


class RelPositionSelfAttention(nn.Module):
    """Multi-head self-attention with Transformer-XL style relative position terms."""

    def __init__(self, dim, n_heads, dropout):
        super().__init__()
        self.h = n_heads
        self.d_k = dim // n_heads
        self.norm = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.pos = nn.Linear(dim, dim, bias=False)
        self.bias_u = nn.Parameter(torch.zeros(n_heads, self.d_k))
        self.bias_v = nn.Parameter(torch.zeros(n_heads, self.d_k))
        nn.init.xavier_uniform_(self.bias_u)
        nn.init.xavier_uniform_(self.bias_v)
        self.out = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        B, T, D = x.shape
        q, k, v = self.qkv(self.norm(x)).view(B, T, 3, self.h, self.d_k).permute(2, 0, 3, 1, 4)
        p = self.pos(relative_sinusoids(T, D, x.dtype, x.device)).view(2 * T - 1, self.h, self.d_k).transpose(0, 1)
        content = torch.matmul(q + self.bias_u[None, :, None], k.transpose(-1, -2))
        position = torch.matmul(q + self.bias_v[None, :, None], p.transpose(-1, -2))
        # column r of `position` encodes offset (T-1-r); gather offset i-j for query i, key j
        idx = (T - 1) - (torch.arange(T, device=x.device)[:, None] - torch.arange(T, device=x.device)[None, :])
        position = position.gather(-1, idx.expand(B, self.h, T, T))
        attn = torch.softmax((content + position) / math.sqrt(self.d_k), dim=-1)
        y = torch.matmul(self.drop(attn), v).transpose(1, 2).reshape(B, T, D)
        return self.drop(self.out(y))


class ConvModule(nn.Module):
    def __init__(self, dim, kernel, activation, dropout):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.pointwise_in = nn.Conv1d(dim, 2 * dim, 1)
        self.depthwise = nn.Conv1d(dim, dim, kernel, padding=kernel // 2, groups=dim)
        # per-frame channel normalization keeps outputs independent of batch composition
        self.depth_norm = nn.LayerNorm(dim)
        self.act = _ACTIVATIONS[activation]()
        self.pointwise_out = nn.Conv1d(dim, dim, 1)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        y = self.norm(x).transpose(1, 2)
        y = F.glu(self.pointwise_in(y), dim=1)
        y = self.depthwise(y)
        y = self.act(self.depth_norm(y.transpose(1, 2))).transpose(1, 2)
        return self.drop(self.pointwise_out(y).transpose(1, 2))


class ConformerBlock(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        d = cfg.attention_dim
        self.ff1 = FeedForward(d, cfg.hidden_size, cfg.activation, cfg.dropout)
        self.attn = RelPositionSelfAttention(d, cfg.n_heads, cfg.dropout)
        self.conv = ConvModule(d, cfg.conv_kernel, cfg.activation, cfg.dropout)
        self.ff2 = FeedForward(d, cfg.hidden_size, cfg.activation, cfg.dropout)
        self.norm = nn.LayerNorm(d)

    def forward(self, x):
        x = x + 0.5 * self.ff1(x)
        x = x + self.attn(x)
        x = x + self.conv(x)
        x = x + 0.5 * self.ff2(x)
        return self.norm(x)


class PerturbationGenerator(nn.Module):
    def __init__(self, config: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.config = config
        self.inp = nn.Linear(config.io_size, config.attention_dim)
        self.blocks = nn.ModuleList(ConformerBlock(config) for _ in range(config.n_blocks))
        self.out = nn.Linear(config.attention_dim, config.io_size)
        # identity anonymizer at initialization
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, magnitude: torch.Tensor) -> torch.Tensor:
        """``[B, T, io_size]`` linear magnitudes -> ``[B, T, io_size]`` additive perturbation."""
        if magnitude.shape[-1] != self.config.io_size:
            raise ValueError(f"expected {self.config.io_size} bins, got {magnitude.shape[-1]}")
        if magnitude.dim() == 2:
            return self.forward(magnitude.unsqueeze(0)).squeeze(0)
        h = self.inp(torch.log1p(magnitude))
        for block in self.blocks:
            h = block(h)
        return self.out(h)


# -- pipeline -----------------------------------------------------------------


def generate_perturbation(S: np.ndarray, g: PerturbationGenerator) -> Perturbation:
    S = np.asarray(S)
    if S.ndim != 2 or S.shape[0] < 1:
        raise ValueError("magnitude must be [T, n_bins] with T >= 1")
    dtype = next(g.parameters()).dtype
    was_training = g.training
    g.eval()
    with torch.no_grad():
        P = g(torch.as_tensor(S, dtype=dtype))
    g.train(was_training)
    return Perturbation(P.double().numpy())


def perturb(S, P):
    """``max(S + P, 0)``; accepts arrays, tensors or a :class:`Perturbation`."""
    P = P.values if isinstance(P, Perturbation) else P
    if tuple(np.shape(S)) != tuple(np.shape(P)):
        raise ValueError(f"shape mismatch {np.shape(S)} vs {np.shape(P)}")
    if isinstance(S, torch.Tensor):
        return clamp_magnitude(S + torch.as_tensor(P, dtype=S.dtype))
    return clamp_magnitude(np.asarray(S, dtype=np.float64) + np.asarray(P, dtype=np.float64))


def anonymize(w: Waveform, g: PerturbationGenerator, cfg: StftConfig = StftConfig()) -> Waveform:
    """STFT -> perturb magnitude -> iSTFT with the original phase."""
    x = torch.from_numpy(w.samples)
    mag, phase = stft_tensor(x, cfg)
    P = generate_perturbation(mag.numpy(), g).values
    mag_adv = perturb(mag, torch.from_numpy(P))
    out = istft_tensor(mag_adv, phase, cfg, length=len(w))
    return Waveform(out.numpy(), w.sample_rate)


def save_generator(path, g: PerturbationGenerator, **extra) -> None:
    save_checkpoint(path, "generator", asdict(g.config), g.state_dict(), **extra)


def load_generator(path) -> PerturbationGenerator:
    payload = load_checkpoint(path, "generator")
    g = PerturbationGenerator(GeneratorConfig(**payload["config"]))
    g.load_state_dict(payload["state_dict"])
    return g.eval()
