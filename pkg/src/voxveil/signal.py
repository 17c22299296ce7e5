"""Waveform I/O, STFT analysis/synthesis and log mel filterbank features.

The numpy-facing functions (:func:`stft`, :func:`istft`, :func:`log_filterbank`)
wrap tensor kernels (:func:`stft_tensor`, :func:`istft_tensor`,
:func:`log_fbank_tensor`) that stay differentiable, so the training loop and the
waveform attacks share exactly the same feature pipeline as evaluation.
"""

from __future__ import annotations

import logging
import wave
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
PCM_SCALE = 32768.0


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"waveform must be 1-D, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    """Analysis/synthesis parameters.

    The default 510-point transform yields exactly 256 one-sided bins, so the
    spectrogram width matches the generator and the round trip stays exact.
    """

    fft_size: int = 510
    win_length: int = 400
    hop_length: int = 160
    window: str = "hann"
    n_bins: int = 256

    def __post_init__(self):
        if not 0 < self.hop_length <= self.win_length <= self.fft_size:
            raise ValueError("need 0 < hop_length <= win_length <= fft_size")
        if not 0 < self.n_bins <= self.fft_size // 2 + 1:
            raise ValueError(f"n_bins must be in [1, {self.fft_size // 2 + 1}]")
        if self.window not in _WINDOWS:
            raise ValueError(f"unknown window {self.window!r}")
        # overlap-add of the squared window must not vanish anywhere
        w2 = _window_array(self.window, self.win_length) ** 2
        acc = np.zeros(self.hop_length)
        for start in range(0, self.win_length, self.hop_length):
            seg = w2[start:start + self.hop_length]
            acc[: seg.shape[0]] += seg
        if acc.min() < 1e-8:
            raise ValueError("window does not satisfy overlap-add at this hop")

    @property
    def full_bins(self) -> int:
        return self.fft_size // 2 + 1

    def num_frames(self, num_samples: int) -> int:
        return 1 + num_samples // self.hop_length


@dataclass(frozen=True)
class Spectrogram:
    """Magnitude/phase pair, both shaped ``[T, n_bins]``.

    ``num_samples`` records the source length so synthesis can restore it.
    """

    magnitude: np.ndarray
    phase: np.ndarray
    num_samples: int | None = None

    def __post_init__(self):
        if self.magnitude.shape != self.phase.shape:
            raise ValueError("magnitude and phase shapes differ")
        if self.magnitude.ndim != 2:
            raise ValueError("spectrogram must be [T, n_bins]")
        if np.any(self.magnitude < 0):
            raise ValueError("magnitude must be nonnegative")

    @property
    def num_frames(self) -> int:
        return self.magnitude.shape[0]


@dataclass(frozen=True)
class FbankConfig:
    n_mels: int = 40
    f_min: float = 20.0
    f_max: float = 7600.0
    log_floor: float = 1e-10
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.n_mels <= 0:
            raise ValueError("n_mels must be positive")
        if not 0 <= self.f_min < self.f_max <= self.sample_rate / 2:
            raise ValueError("need 0 <= f_min < f_max <= sample_rate/2")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")


@dataclass(frozen=True)
class FeatureFrames:
    frames: np.ndarray

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]


# -- waveform I/O -------------------------------------------------------------


def load_waveform(path) -> Waveform:
    """Read a 16-bit PCM mono WAV at 16 kHz."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such audio file: {path}")
    try:
        with wave.open(str(path), "rb") as fh:
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        raise ValueError(f"{path}: unsupported encoding ({exc})") from exc
    if channels != 1:
        raise ValueError(f"{path}: expected mono audio, found {channels} channels")
    if width != 2:
        raise ValueError(f"{path}: expected 16-bit PCM, found {8 * width}-bit")
    if rate != SAMPLE_RATE:
        raise ValueError(f"{path}: expected {SAMPLE_RATE} Hz, found {rate} Hz")
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / PCM_SCALE, rate)


def save_waveform(w: Waveform, path) -> None:
    pcm = np.clip(np.round(w.samples * PCM_SCALE), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.tobytes())


# -- windows and filter matrices ----------------------------------------------


def _hann(n):
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _hamming(n):
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * np.arange(n) / n)


_WINDOWS = {"hann": _hann, "hamming": _hamming}


def _window_array(name, length):
    return _WINDOWS[name](length)


def window_tensor(cfg: StftConfig, dtype=torch.float64, device=None) -> torch.Tensor:
    return torch.as_tensor(_window_array(cfg.window, cfg.win_length), dtype=dtype, device=device)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=16)
def _mel_matrix_cached(fb: FbankConfig, stft_cfg: StftConfig) -> np.ndarray:
    freqs = np.arange(stft_cfg.n_bins) * fb.sample_rate / stft_cfg.fft_size
    edges = mel_to_hz(np.linspace(hz_to_mel(fb.f_min), hz_to_mel(fb.f_max), fb.n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    mat = np.maximum(0.0, np.minimum(rising, falling))
    mat.setflags(write=False)
    return mat


def mel_matrix(fb: FbankConfig, stft_cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Triangular mel filters, shape ``[n_mels, n_bins]``."""
    return _mel_matrix_cached(fb, stft_cfg)


# -- tensor kernels -----------------------------------------------------------


def stft_tensor(x: torch.Tensor, cfg: StftConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Differentiable STFT of ``[..., N]`` samples -> (magnitude, phase), each ``[..., T, n_bins]``."""
    if x.shape[-1] < cfg.win_length:
        raise ValueError(f"signal of {x.shape[-1]} samples is shorter than one window ({cfg.win_length})")
    lead = x.shape[:-1]
    flat = x.reshape(-1, x.shape[-1])
    spec = torch.stft(
        flat,
        n_fft=cfg.fft_size,
        hop_length=cfg.hop_length,
        win_length=cfg.win_length,
        window=window_tensor(cfg, flat.dtype, flat.device),
        center=True,
        pad_mode="reflect",
        return_complex=True,
    )
    spec = spec[:, : cfg.n_bins, :].transpose(1, 2)
    spec = spec.reshape(*lead, spec.shape[-2], spec.shape[-1])
    return spec.abs(), spec.angle()


def istft_tensor(
    magnitude: torch.Tensor, phase: torch.Tensor, cfg: StftConfig, length: int | None = None
) -> torch.Tensor:
    """Overlap-add synthesis of ``[..., T, n_bins]`` spectra; missing high bins are zero-filled."""
    if magnitude.shape != phase.shape:
        raise ValueError("magnitude and phase shapes differ")
    if magnitude.shape[-1] != cfg.n_bins:
        raise ValueError(f"expected {cfg.n_bins} bins, got {magnitude.shape[-1]}")
    lead = magnitude.shape[:-2]
    spec = torch.polar(magnitude, phase).reshape(-1, *magnitude.shape[-2:]).transpose(1, 2)
    if cfg.n_bins < cfg.full_bins:
        pad = spec.new_zeros(spec.shape[0], cfg.full_bins - cfg.n_bins, spec.shape[2])
        spec = torch.cat([spec, pad], dim=1)
    out = torch.istft(
        spec,
        n_fft=cfg.fft_size,
        hop_length=cfg.hop_length,
        win_length=cfg.win_length,
        window=window_tensor(cfg, magnitude.dtype, magnitude.device),
        center=True,
        length=length,
    )
    return out.reshape(*lead, out.shape[-1]).clamp(-1.0, 1.0)


def log_fbank_tensor(magnitude: torch.Tensor, fb: FbankConfig, stft_cfg: StftConfig = StftConfig()) -> torch.Tensor:
    """``log(max(M @ |S|^2, floor))`` framewise; ``[..., T, n_bins] -> [..., T, n_mels]``."""
    mat = torch.tensor(mel_matrix(fb, stft_cfg), dtype=magnitude.dtype, device=magnitude.device)
    if magnitude.shape[-1] != mat.shape[1]:
        raise ValueError(f"expected {mat.shape[1]} bins, got {magnitude.shape[-1]}")
    energies = (magnitude * magnitude) @ mat.T
    return torch.log(torch.clamp(energies, min=fb.log_floor))


def waveform_features(x: torch.Tensor, stft_cfg: StftConfig, fb: FbankConfig) -> torch.Tensor:
    """Samples -> log filterbank frames, differentiable end to end."""
    mag, _ = stft_tensor(x, stft_cfg)
    return log_fbank_tensor(mag, fb, stft_cfg)


# -- numpy-facing operations --------------------------------------------------


def stft(w: Waveform, cfg: StftConfig = StftConfig()) -> Spectrogram:
    mag, phase = stft_tensor(torch.from_numpy(w.samples), cfg)
    return Spectrogram(mag.numpy(), phase.numpy(), num_samples=len(w))


def istft(s: Spectrogram, cfg: StftConfig = StftConfig(), sample_rate: int = SAMPLE_RATE) -> Waveform:
    out = istft_tensor(
        torch.as_tensor(s.magnitude, dtype=torch.float64),
        torch.as_tensor(s.phase, dtype=torch.float64),
        cfg,
        length=s.num_samples,
    )
    return Waveform(out.numpy(), sample_rate)


def log_filterbank(s: Spectrogram, cfg: FbankConfig = FbankConfig(), stft_cfg: StftConfig = StftConfig()) -> FeatureFrames:
    frames = log_fbank_tensor(torch.as_tensor(s.magnitude, dtype=torch.float64), cfg, stft_cfg)
    return FeatureFrames(frames.numpy())


def features(w: Waveform, stft_cfg: StftConfig = StftConfig(), fb: FbankConfig = FbankConfig()) -> FeatureFrames:
    return log_filterbank(stft(w, stft_cfg), fb, stft_cfg)


def clamp_magnitude(m):
    """Entrywise ``max(m, 0)``; keeps tensors differentiable (unit slope above zero)."""
    if isinstance(m, torch.Tensor):
        return torch.clamp(m, min=0.0)
    return np.maximum(np.asarray(m, dtype=np.float64), 0.0)
