"""Privacy evaluation: trial construction, cosine scoring, EER and robustness transforms.

Protocols:

* ``original``: unmodified recordings on both sides (reference ASV accuracy);
* ``de-id``: original enrollment, anonymized test;
* ``unlinkability``: anonymized enrollment and anonymized test.

A trial is a target trial when both utterances come from the same original
speaker. Higher EER under ``de-id``/``unlinkability`` means better protection.
"""

from __future__ import annotations

import logging
import shutil
import subprocess
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from scipy import ndimage
from scipy import signal as sps

from .corpus import Corpus, Utterance
from .encoder import SpeakerEncoder
from .signal import FbankConfig, StftConfig, Waveform, features, load_waveform, save_waveform

logger = logging.getLogger(__name__)

PROTOCOLS = ("original", "de-id", "unlinkability")

Transform = Callable[[Waveform], Waveform]


@dataclass(frozen=True)
class Trial:
    enroll: str
    test: str
    is_target: bool


@dataclass
class TrialList:
    protocol: str
    trials: list[Trial]

    def __len__(self):
        return len(self.trials)

    def __iter__(self):
        return iter(self.trials)

    @property
    def n_target(self) -> int:
        return sum(t.is_target for t in self.trials)

    @property
    def n_nontarget(self) -> int:
        return len(self.trials) - self.n_target


@dataclass
class ScoreSet:
    protocol: str
    scores: list[tuple[Trial, float]]

    def __post_init__(self):
        if not self.scores:
            raise ValueError("empty score set")
        if not all(np.isfinite(s) for _, s in self.scores):
            raise ValueError("non-finite score")

    def split(self) -> tuple[np.ndarray, np.ndarray]:
        tgt = np.array([s for t, s in self.scores if t.is_target], dtype=np.float64)
        non = np.array([s for t, s in self.scores if not t.is_target], dtype=np.float64)
        return tgt, non


# -- trials -------------------------------------------------------------------


def make_trials(corpus: Corpus, protocol: str, seed: int = 0, max_per_class: int | None = None) -> TrialList:
    """Enumerate same/different-speaker pairs and balance the two classes.

    ``de-id`` pairs are ordered (enrollment and test play different roles);
    the symmetric protocols use unordered pairs. Self-pairs never occur.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}; choose from {PROTOCOLS}")
    utts = list(corpus)
    if len({u.speaker for u in utts}) < 2:
        raise ValueError("trial construction needs at least two speakers")
    ordered = protocol == "de-id"
    targets, nontargets = [], []
    for i, u in enumerate(utts):
        for j, v in enumerate(utts):
            if i == j or (not ordered and j < i):
                continue
            (targets if u.speaker == v.speaker else nontargets).append(Trial(u.utt_id, v.utt_id, u.speaker == v.speaker))
    rng = np.random.default_rng(seed)
    n = min(len(targets), len(nontargets))
    if max_per_class is not None:
        n = min(n, max_per_class)
    if n == 0:
        raise ValueError("corpus yields no target or no nontarget trials")

    def pick(pool):
        if len(pool) == n:
            return pool
        keep = np.sort(rng.choice(len(pool), size=n, replace=False))
        return [pool[k] for k in keep]

    return TrialList(protocol, pick(targets) + pick(nontargets))


def write_trials(path, trials: TrialList, root=None) -> None:
    root = Path(root) if root is not None else None

    def name(u):
        return str(root / u) if root is not None else u

    lines = [f"{'target' if t.is_target else 'nontarget'} {name(t.enroll)} {name(t.test)}\n" for t in trials]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_trials(path, protocol: str) -> TrialList:
    trials = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3 or parts[0] not in ("target", "nontarget"):
            raise ValueError(f"{path}:{n}: expected '<target|nontarget> <enroll> <test>'")
        trials.append(Trial(parts[1], parts[2], parts[0] == "target"))
    return TrialList(protocol, trials)


def write_scores(path, scores: ScoreSet) -> None:
    lines = [f"{s:.6f} {t.enroll} {t.test}\n" for t, s in scores.scores]
    Path(path).write_text("".join(lines), encoding="utf-8")


# -- scoring ------------------------------------------------------------------


class EmbeddingCache:
    """Per-(utterance, condition) embedding store; concurrent reads, serialized writes."""

    def __init__(self):
        self._data: dict[tuple[str, str], np.ndarray] = {}
        self._lock = threading.Lock()
        self.computed = 0

    def get(self, key, compute):
        hit = self._data.get(key)
        if hit is not None:
            return hit
        value = compute()
        with self._lock:
            if key not in self._data:
                self._data[key] = value
                self.computed += 1
            return self._data[key]


def embed_waveform(w: Waveform, encoder: SpeakerEncoder, stft_cfg: StftConfig = StftConfig(), fb: FbankConfig = FbankConfig()) -> np.ndarray:
    dtype = next(encoder.parameters()).dtype
    frames = torch.as_tensor(features(w, stft_cfg, fb).frames, dtype=dtype)
    with torch.no_grad():
        return encoder(frames.unsqueeze(0))[0].double().numpy()


def _cos(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("zero-norm embedding")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def score_trials(
    trials: TrialList,
    corpus: Corpus,
    encoder: SpeakerEncoder,
    anonymizer: Transform | None = None,
    transforms: Sequence[Transform] = (),
    stft_cfg: StftConfig = StftConfig(),
    fb: FbankConfig = FbankConfig(),
    cache: EmbeddingCache | None = None,
    transform_tag: str = "",
) -> ScoreSet:
    """Cosine-score every trial, embedding each (utterance, condition) once.

    The anonymizer and the transform chain apply to the sides the protocol
    marks as released audio; for ``original`` the transforms act on the test side.
    """
    index = {u.utt_id: u for u in corpus}
    cache = cache if cache is not None else EmbeddingCache()
    protocol = trials.protocol
    if protocol != "original" and anonymizer is None:
        raise ValueError(f"protocol {protocol!r} needs an anonymizer")

    def released(u: Utterance) -> Waveform:
        w = u.load()
        if protocol != "original":
            w = anonymizer(w)
        for t in transforms:
            w = t(w)
        return w

    def side(utt_id: str, is_test: bool) -> np.ndarray:
        if utt_id not in index:
            raise FileNotFoundError(f"missing audio for utterance {utt_id}")
        u = index[utt_id]
        modified = (protocol == "unlinkability") or (is_test and (protocol == "de-id" or transforms))
        if not modified:
            return cache.get((utt_id, "original"), lambda: embed_waveform(u.load(), encoder, stft_cfg, fb))
        tag = ("anonymized" if protocol != "original" else "original") + transform_tag
        return cache.get((utt_id, tag), lambda: embed_waveform(released(u), encoder, stft_cfg, fb))

    scores = [(t, _cos(side(t.enroll, False), side(t.test, True))) for t in trials]
    return ScoreSet(protocol, scores)


# -- EER ----------------------------------------------------------------------


def compute_eer(scores) -> float:
    """Equal error rate of a :class:`ScoreSet` or a ``(target, nontarget)`` pair.

    FAR(th) counts nontargets with score >= th, FRR(th) targets with score < th.
    Thresholds sweep the distinct scores plus +inf; the EER is read off the
    segment joining the two adjacent operating points where FAR - FRR changes sign.
    """
    tgt, non = scores.split() if isinstance(scores, ScoreSet) else map(np.asarray, scores)
    tgt = np.sort(np.asarray(tgt, dtype=np.float64))
    non = np.sort(np.asarray(non, dtype=np.float64))
    if tgt.size == 0 or non.size == 0:
        raise ValueError("EER needs at least one target and one nontarget score")
    thresholds = np.append(np.unique(np.concatenate([tgt, non])), np.inf)
    frr = np.searchsorted(tgt, thresholds, side="left") / tgt.size
    far = (non.size - np.searchsorted(non, thresholds, side="left")) / non.size
    diff = far - frr
    i = int(np.argmax(diff <= 0))
    if diff[i] == 0:
        return float(far[i])
    t = diff[i - 1] / (diff[i - 1] - diff[i])
    return float(far[i - 1] + t * (far[i] - far[i - 1]))


# -- robustness transforms ----------------------------------------------------


def median_smooth(w: Waveform, kernel: int = 3) -> Waveform:
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError("median kernel must be a positive odd integer")
    if kernel == 1:
        return Waveform(w.samples.copy(), w.sample_rate)
    return Waveform(ndimage.median_filter(w.samples, size=kernel, mode="reflect"), w.sample_rate)


def quantize(w: Waveform, levels: int = 256) -> Waveform:
    """Snap to the nearest of ``levels`` uniformly spaced values spanning [-1, 1]."""
    if levels < 2:
        raise ValueError("quantization needs at least two levels")
    step = 2.0 / (levels - 1)
    k = np.clip(np.round((w.samples + 1.0) / step), 0, levels - 1)
    return Waveform(np.clip(k * step - 1.0, -1.0, 1.0), w.sample_rate)


def lowpass_taps(passband_hz: float, stopband_hz: float, sample_rate: int, attenuation_db: float = 65.0) -> np.ndarray:
    nyq = sample_rate / 2
    if not 0 < passband_hz < stopband_hz < nyq:
        raise ValueError("need 0 < passband < stopband < Nyquist")
    numtaps, beta = sps.kaiserord(attenuation_db, (stopband_hz - passband_hz) / nyq)
    numtaps |= 1  # odd length keeps an integer group delay
    return sps.firwin(numtaps, (passband_hz + stopband_hz) / 2, window=("kaiser", beta), fs=sample_rate)


def low_pass_filter(w: Waveform, passband_hz: float = 500.0, stopband_hz: float = 1000.0) -> Waveform:
    """Linear-phase Kaiser FIR low-pass; output is delay-compensated and aligned with the input."""
    taps = lowpass_taps(passband_hz, stopband_hz, w.sample_rate)
    out = sps.fftconvolve(w.samples, taps, mode="same")
    return Waveform(np.clip(out, -1.0, 1.0), w.sample_rate)


def aac_available() -> bool:
    return shutil.which("ffmpeg") is not None


def aac_compress(w: Waveform, bitrate: str = "32k") -> Waveform:
    """Round-trip through an external AAC encoder (ffmpeg); raises if none is installed."""
    if not aac_available():
        raise RuntimeError("AAC compression unavailable: no ffmpeg on PATH")
    with tempfile.TemporaryDirectory() as tmp:
        src, enc, dst = (Path(tmp) / n for n in ("in.wav", "enc.m4a", "out.wav"))
        save_waveform(w, src)
        subprocess.run(["ffmpeg", "-y", "-loglevel", "error", "-i", src, "-c:a", "aac", "-b:a", bitrate, enc], check=True)
        subprocess.run(["ffmpeg", "-y", "-loglevel", "error", "-i", enc, "-ar", str(w.sample_rate), "-ac", "1", dst], check=True)
        out = load_waveform(dst).samples
    n = len(w)
    out = np.pad(out, (0, max(0, n - out.size)))[:n]
    return Waveform(out, w.sample_rate)


def parse_transform(spec: str) -> Transform:
    """Parse ``median-smooth:3``, ``quantize:256``, ``low-pass:500:1000`` or ``aac[:bitrate]``."""
    name, *args = spec.split(":")
    if name == "median-smooth":
        k = int(args[0]) if args else 3
        return lambda w: median_smooth(w, k)
    if name == "quantize":
        lv = int(args[0]) if args else 256
        return lambda w: quantize(w, lv)
    if name == "low-pass":
        fp, fs = (float(args[0]), float(args[1])) if args else (500.0, 1000.0)
        return lambda w: low_pass_filter(w, fp, fs)
    if name == "aac":
        rate = args[0] if args else "32k"
        return lambda w: aac_compress(w, rate)
    raise ValueError(f"unknown transform {spec!r}")


def parse_chain(specs: Iterable[str]) -> list[Transform]:
    return [parse_transform(s) for s in specs]


# -- perceptual proxy ---------------------------------------------------------


def spectral_similarity(a: Waveform, b: Waveform, stft_cfg: StftConfig = StftConfig(), fb: FbankConfig = FbankConfig()) -> float:
    """Mean framewise cosine between the log filterbank frames of two signals."""
    n = min(len(a), len(b))
    if n < stft_cfg.win_length:
        raise ValueError("signals overlap by less than one analysis window")
    fa = features(Waveform(a.samples[:n], a.sample_rate), stft_cfg, fb).frames
    fb_ = features(Waveform(b.samples[:n], b.sample_rate), stft_cfg, fb).frames
    num = (fa * fb_).sum(1)
    den = np.linalg.norm(fa, axis=1) * np.linalg.norm(fb_, axis=1)
    return float(np.mean(num / den))


# -- one-call protocol evaluation ---------------------------------------------


@dataclass
class EvalReport:
    protocol: str
    n_target: int
    n_nontarget: int
    eer: float
    mean_target_score: float
    mean_nontarget_score: float
    transforms: list[str] = field(default_factory=list)
    spectral_similarity: dict | None = None
    scores: ScoreSet | None = field(default=None, repr=False)

    def as_record(self) -> dict:
        rec = {k: v for k, v in self.__dict__.items() if k != "scores"}
        return rec


def evaluate_protocol(
    corpus: Corpus,
    encoder: SpeakerEncoder,
    protocol: str,
    anonymizer: Transform | None = None,
    transforms: Sequence[str] = (),
    seed: int = 0,
    trials: TrialList | None = None,
    stft_cfg: StftConfig = StftConfig(),
    fb: FbankConfig = FbankConfig(),
    cache: EmbeddingCache | None = None,
    similarity: bool = False,
) -> EvalReport:
    trials = trials if trials is not None else make_trials(corpus, protocol, seed)
    if trials.protocol != protocol:
        raise ValueError("trial list protocol does not match")
    tag = "".join(f"|{t}" for t in transforms)
    scores = score_trials(trials, corpus, encoder, anonymizer, parse_chain(transforms), stft_cfg, fb, cache, tag)
    tgt, non = scores.split()
    sim = None
    if similarity and anonymizer is not None:
        vals = [spectral_similarity(u.load(), anonymizer(u.load()), stft_cfg, fb) for u in corpus]
        sim = {"mean": float(np.mean(vals)), "min": float(np.min(vals)), "n": len(vals)}
    return EvalReport(protocol, tgt.size, non.size, compute_eer(scores), float(tgt.mean()), float(non.mean()), list(transforms), sim, scores)
