"""Synthetic labelled corpora with per-speaker distortions.

Two representations are available:

``features``
    frames are ``spectral_dim``-dimensional log-spectral vectors drawn from
    per-class templates plus frequency-correlated noise, then passed through
    a per-speaker affine map ``A_s x + b_s``.
``spectra``
    frames are linear power spectra. Each class has a formant-like log
    envelope; a speaker stretches the frequency axis by a warp factor and adds
    a smooth log-gain channel curve. The feature pipeline turns these into
    log-mel frames, optionally undoing the warp with the speaker's factor.

Labels come in segments of several frames so temporal context is
informative. Everything is a pure function of the :class:`CorpusSpec`.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .. import rng
from ..features import FilterbankConfig, UtteranceFeatures, hz_to_mel, vtln_warp

REPRESENTATIONS = ("features", "spectra")


@dataclass
class CorpusSpec:
    num_speakers: int = 20
    utterances_per_speaker: int = 10
    frames_per_utterance: int = 200
    num_classes: int = 10
    spectral_dim: int = 40
    test_speakers: int = 4
    heldout_fraction: float = 0.1
    separation: float = 1.0
    noise: float = 1.5
    distortion: bool = True
    mixing: float = 0.3  # spread of A_s around the identity
    offset: float = 0.4  # scale of b_s
    max_condition: float = 10.0
    segment_frames: tuple = (4, 12)
    representation: str = "features"
    fft_bins: int = 257
    warp_spread: float = 0.1  # speaker warp factors drawn from 1 +- warp_spread
    master_seed: int = 0

    def __post_init__(self):
        self.segment_frames = tuple(self.segment_frames)

    def problems(self):
        out = []
        for name in ("num_speakers", "utterances_per_speaker", "frames_per_utterance", "num_classes",
                     "spectral_dim"):
            if getattr(self, name) < 1:
                out.append((name, "must be >= 1"))
        if self.test_speakers < 0:
            out.append(("test_speakers", "must be >= 0"))
        if not 0.0 <= self.heldout_fraction < 1.0:
            out.append(("heldout_fraction", "must be in [0, 1)"))
        if self.noise < 0 or self.separation < 0:
            out.append(("noise", "noise and separation must be >= 0"))
        if self.max_condition < 1.0:
            out.append(("max_condition", "must be >= 1"))
        if len(self.segment_frames) != 2 or not 1 <= self.segment_frames[0] <= self.segment_frames[1]:
            out.append(("segment_frames", "must be (min, max) with 1 <= min <= max"))
        if self.representation not in REPRESENTATIONS:
            out.append(("representation", f"must be one of {REPRESENTATIONS}"))
        if not 0.0 <= self.warp_spread <= 0.2:
            out.append(("warp_spread", "must be in [0, 0.2]"))
        return out

    def validate(self):
        problems = self.problems()
        if problems:
            raise ValueError("; ".join(f"corpus.{p}: {m}" for p, m in problems))
        return self

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["segment_frames"] = list(self.segment_frames)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"corpus: unknown fields {unknown}")
        return cls(**d)

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class SpeakerDistortion:
    A: np.ndarray
    b: np.ndarray
    warp_factor: float = 1.0


@dataclass
class Corpus:
    spec: CorpusSpec
    train: list
    heldout: list
    test: list
    speakers: dict = field(default_factory=dict)  # speaker_id -> SpeakerDistortion

    @property
    def hash(self):
        return self.spec.hash()

    def split(self, name):
        try:
            return {"train": self.train, "heldout": self.heldout, "test": self.test}[name]
        except KeyError:
            raise ValueError(f"unknown split {name!r}") from None

    def warp_factor(self, speaker_id):
        return self.speakers[speaker_id].warp_factor


def _smooth(x, width):
    """Moving average along the last axis with edge replication."""
    if width <= 1:
        return x
    kernel = np.ones(width) / width
    pad = width // 2
    padded = np.pad(x, [(0, 0)] * (x.ndim - 1) + [(pad, width - 1 - pad)], mode="edge")
    return np.apply_along_axis(lambda r: np.convolve(r, kernel, mode="valid"), -1, padded)


def class_templates(spec):
    """``num_classes x spectral_dim`` smooth templates with unit spread times ``separation``."""
    g = rng.generator(spec.master_seed, "templates")
    raw = _smooth(g.standard_normal((spec.num_classes, spec.spectral_dim)), 5)
    raw -= raw.mean(axis=1, keepdims=True)
    raw /= raw.std(axis=1, keepdims=True) + 1e-12
    return spec.separation * raw


def speaker_distortion(spec, speaker_id):
    """Random invertible affine map with condition number at most ``max_condition``."""
    D = spec.spectral_dim
    g = rng.generator(spec.master_seed, "speaker", speaker_id)
    G = g.standard_normal((D, D)) / np.sqrt(D)
    b = spec.offset * _smooth(g.standard_normal((1, D)), 5)[0] * np.sqrt(5)
    warp = 1.0 + spec.warp_spread * (2.0 * g.random() - 1.0)
    if not spec.distortion:
        return SpeakerDistortion(np.eye(D), np.zeros(D), 1.0)
    scale = spec.mixing
    while True:
        A = np.eye(D) + scale * G
        s = np.linalg.svd(A, compute_uv=False)
        if s[-1] > 0 and s[0] / s[-1] <= spec.max_condition:
            break
        scale *= 0.8
    return SpeakerDistortion(A, b, warp)


def _segment_labels(g, T, spec):
    labels = np.empty(T, dtype=np.int64)
    t, prev = 0, -1
    lo, hi = spec.segment_frames
    while t < T:
        n = int(g.integers(lo, hi + 1))
        c = int(g.integers(spec.num_classes - 1)) if spec.num_classes > 1 else 0
        if spec.num_classes > 1 and c >= prev >= 0:
            c += 1  # never repeat the previous class
        labels[t:t + n] = c
        prev = c
        t += n
    return labels


def _spectral_envelopes(spec, freqs):
    """Per-class log envelopes on the given frequency grid: three Gaussian bumps in mel."""
    g = rng.generator(spec.master_seed, "envelopes")
    mel = hz_to_mel(freqs)
    top = hz_to_mel(8000.0)
    out = np.zeros((spec.num_classes, len(freqs)))
    for c in range(spec.num_classes):
        for _ in range(3):
            mu = g.uniform(0.05, 0.9) * top
            width = g.uniform(0.03, 0.08) * top
            amp = spec.separation * g.uniform(1.0, 3.0)
            out[c] += amp * np.exp(-0.5 * ((mel - mu) / width) ** 2)
    return out


def _utterance(spec, templates, speaker_id, distortion, index):
    g = rng.generator(spec.master_seed, "utterance", speaker_id, index)
    T = spec.frames_per_utterance
    labels = _segment_labels(g, T, spec)
    uid = f"{speaker_id}-u{index:03d}"
    if spec.representation == "features":
        noise = spec.noise * _smooth(g.standard_normal((T, spec.spectral_dim)), 3) * np.sqrt(3)
        clean = templates[labels] + noise
        frames = clean @ distortion.A.T + distortion.b
        return UtteranceFeatures(uid, speaker_id, frames[:, :, None], labels)
    config = FilterbankConfig(num_filters=spec.spectral_dim, fft_bins=spec.fft_bins)
    freqs = config.bin_frequencies()
    # speaker spectrum S_s(f) = S(g^-1(f)); sample the class envelope at g^-1(f)
    grid = np.linspace(0.0, config.nyquist, 4 * spec.fft_bins)
    source = np.interp(freqs, vtln_warp(grid, distortion.warp_factor, config.nyquist), grid)
    envelopes = templates  # class envelopes on the source grid, see generate_corpus
    log_env = np.array([np.interp(source, grid, envelopes[c]) for c in range(spec.num_classes)])
    channel = np.interp(np.linspace(0, 1, spec.fft_bins), np.linspace(0, 1, spec.spectral_dim), distortion.b)
    noise = spec.noise * _smooth(g.standard_normal((T, spec.fft_bins)), 9) * 3.0
    gain = 0.5 * g.standard_normal((T, 1))
    power = np.exp(log_env[labels] + channel + noise + gain)
    return UtteranceFeatures(uid, speaker_id, power[:, :, None], labels)


def generate_corpus(spec: CorpusSpec) -> Corpus:
    """Train / held-out / test splits; test speakers are never seen in training."""
    spec.validate()
    if spec.representation == "features":
        templates = class_templates(spec)
    else:
        nyquist = FilterbankConfig(fft_bins=spec.fft_bins).nyquist
        templates = _spectral_envelopes(spec, np.linspace(0.0, nyquist, 4 * spec.fft_bins))
    speakers = {}
    train_all, test = [], []
    total = spec.num_speakers + spec.test_speakers
    for s in range(total):
        sid = f"spk{s:03d}"
        speakers[sid] = distortion = speaker_distortion(spec, sid)
        utts = [_utterance(spec, templates, sid, distortion, i) for i in range(spec.utterances_per_speaker)]
        (train_all if s < spec.num_speakers else test).extend(utts)
    n_held = int(round(spec.heldout_fraction * len(train_all)))
    if spec.heldout_fraction > 0:
        n_held = max(1, n_held)
    picked = set(rng.generator(spec.master_seed, "heldout").choice(len(train_all), n_held, replace=False).tolist())
    train = [u for i, u in enumerate(train_all) if i not in picked]
    heldout = [u for i, u in enumerate(train_all) if i in picked]
    return Corpus(spec, train, heldout, test, speakers)
