"""Speaker-labelled corpora: manifest loading and a synthetic desk-scale corpus.

On disk a corpus is a directory of ``<speaker>/<utterance>.wav`` files plus
split manifests (``train.lst``, ``test.lst``) holding one relative path per
line. The speaker label of an utterance is its parent directory name.

The synthetic corpus is a source-filter voice model: a glottal pulse train
with per-speaker pitch, spectral tilt, jitter and breathiness, shaped by
vowel formants scaled by a per-speaker vocal-tract factor. Speakers differ in
timbre; utterances differ in vowel sequence, prosody and level.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .signal import SAMPLE_RATE, Waveform, load_waveform, save_waveform

logger = logging.getLogger(__name__)

# F1-F4 (Hz) for a reference vocal tract
VOWELS = np.array(
    [
        [270, 2290, 3010, 3500],
        [530, 1840, 2480, 3500],
        [730, 1090, 2440, 3500],
        [570, 840, 2410, 3500],
        [300, 870, 2240, 3500],
        [660, 1720, 2410, 3500],
        [440, 1020, 2240, 3500],
    ],
    dtype=np.float64,
)


@dataclass(frozen=True)
class Utterance:
    utt_id: str
    speaker: str
    path: Path | None = None
    waveform: Waveform | None = field(default=None, repr=False, compare=False)

    def load(self) -> Waveform:
        if self.waveform is not None:
            return self.waveform
        if self.path is None:
            raise FileNotFoundError(f"utterance {self.utt_id} has neither audio nor path")
        return load_waveform(self.path)


@dataclass
class Corpus:
    utterances: list[Utterance]

    def __len__(self):
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    @property
    def speakers(self) -> list[str]:
        return sorted({u.speaker for u in self.utterances})

    def by_speaker(self) -> dict[str, list[Utterance]]:
        out: dict[str, list[Utterance]] = {}
        for u in self.utterances:
            out.setdefault(u.speaker, []).append(u)
        return out

    def preload(self) -> "Corpus":
        """Return a copy with every waveform held in memory."""
        return Corpus([Utterance(u.utt_id, u.speaker, u.path, u.load()) for u in self.utterances])


def read_manifest(path) -> list[str]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    lines = [ln.strip() for ln in path.read_text(encoding="utf-8").splitlines()]
    return [ln for ln in lines if ln and not ln.startswith("#")]


def write_manifest(path, entries) -> None:
    Path(path).write_text("".join(f"{e}\n" for e in entries), encoding="utf-8")


def load_corpus(manifest, root=None) -> Corpus:
    """Load a split manifest; paths resolve against ``root`` (default: the manifest's directory)."""
    manifest = Path(manifest)
    root = Path(root) if root is not None else manifest.parent
    utts = []
    for rel in read_manifest(manifest):
        p = Path(rel)
        utts.append(Utterance(utt_id=p.with_suffix("").as_posix(), speaker=p.parent.name, path=root / p))
    return Corpus(utts)


# -- synthetic voices ---------------------------------------------------------


@dataclass(frozen=True)
class VoiceProfile:
    name: str
    f0: float
    tract_scale: float
    formant_jitter: tuple[float, float, float, float]
    bandwidth_scale: float
    tilt: float
    breathiness: float
    jitter: float


def random_profile(name: str, rng: np.random.Generator) -> VoiceProfile:
    high = rng.random() < 0.5
    f0 = rng.uniform(165, 250) if high else rng.uniform(85, 150)
    scale = rng.uniform(1.08, 1.22) if high else rng.uniform(0.88, 1.02)
    return VoiceProfile(
        name=name,
        f0=float(f0),
        tract_scale=float(scale),
        formant_jitter=tuple(float(v) for v in rng.uniform(0.92, 1.08, 4)),
        bandwidth_scale=float(rng.uniform(0.7, 1.6)),
        tilt=float(rng.uniform(0.80, 0.97)),
        breathiness=float(rng.uniform(0.0, 0.25)),
        jitter=float(rng.uniform(0.002, 0.02)),
    )


def _resonator(x, freq, bw, sr):
    r = np.exp(-np.pi * bw / sr)
    theta = 2 * np.pi * freq / sr
    a = [1.0, -2 * r * np.cos(theta), r * r]
    b = [1.0 - r]
    return sps.lfilter(b, a, x)


def synthesize_utterance(voice: VoiceProfile, rng: np.random.Generator, duration: float, sr: int = SAMPLE_RATE) -> np.ndarray:
    n = int(round(duration * sr))
    out = np.zeros(n)
    t = int(rng.uniform(0.05, 0.15) * sr)
    while t < n - int(0.08 * sr):
        seg_len = min(int(rng.uniform(0.12, 0.32) * sr), n - t)
        # pitch contour with drift, vibrato-like wobble and per-cycle jitter
        k = np.arange(seg_len) / sr
        f0 = voice.f0 * rng.uniform(0.9, 1.1) * (1 + 0.06 * np.sin(2 * np.pi * rng.uniform(2, 5) * k + rng.uniform(0, 6.3)))
        f0 *= 1 + voice.jitter * rng.standard_normal(seg_len).cumsum() / np.sqrt(np.arange(1, seg_len + 1))
        phase = np.cumsum(f0) / sr
        pulses = np.diff(np.floor(phase), prepend=np.floor(phase[0])).astype(np.float64)
        source = sps.lfilter([1.0], [1.0, -voice.tilt], pulses)
        source += voice.breathiness * 0.05 * rng.standard_normal(seg_len)
        formants = VOWELS[rng.integers(len(VOWELS))] * voice.tract_scale * np.asarray(voice.formant_jitter)
        bws = np.array([60.0, 90.0, 120.0, 160.0]) * voice.bandwidth_scale
        y = source
        for f, bw in zip(formants, bws):
            if f < sr / 2 - 200:
                y = _resonator(y, f, bw, sr)
        env = np.sin(np.pi * np.arange(seg_len) / seg_len) ** 0.5
        out[t:t + seg_len] += y * env
        t += seg_len + int(rng.uniform(0.01, 0.12) * sr)
    peak = np.max(np.abs(out)) or 1.0
    out = out / peak * rng.uniform(0.3, 0.7)
    out += 1e-3 * rng.standard_normal(n)
    return np.clip(out, -1.0, 1.0)


def synthesize_corpus(
    n_speakers: int = 20,
    utts_per_speaker: int = 18,
    test_per_speaker: int = 6,
    duration: tuple[float, float] = (2.0, 3.5),
    seed: int = 0,
) -> tuple[Corpus, Corpus]:
    """Build an in-memory (train, test) pair; test holds the last utterances of every speaker."""
    if n_speakers < 2:
        raise ValueError("need at least two speakers")
    if not 0 < test_per_speaker < utts_per_speaker:
        raise ValueError("test_per_speaker must leave at least one training utterance")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for s in range(n_speakers):
        voice = random_profile(f"spk{s:03d}", rng)
        for u in range(utts_per_speaker):
            samples = synthesize_utterance(voice, rng, rng.uniform(*duration))
            utt = Utterance(f"{voice.name}/utt{u:02d}", voice.name, None, Waveform(samples))
            (test if u >= utts_per_speaker - test_per_speaker else train).append(utt)
    return Corpus(train), Corpus(test)


def write_corpus(root, train: Corpus, test: Corpus) -> tuple[Path, Path]:
    """Write WAVs and ``train.lst``/``test.lst`` under ``root``; returns the manifest paths."""
    root = Path(root)
    manifests = []
    for name, corpus in (("train", train), ("test", test)):
        entries = []
        for u in corpus:
            rel = Path(u.utt_id).with_suffix(".wav")
            (root / rel).parent.mkdir(parents=True, exist_ok=True)
            save_waveform(u.load(), root / rel)
            entries.append(rel.as_posix())
        write_manifest(root / f"{name}.lst", entries)
        manifests.append(root / f"{name}.lst")
    return manifests[0], manifests[1]
