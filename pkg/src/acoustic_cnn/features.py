"""Log-mel filterbank front end.

Turns power spectra into the network input representation: (optionally
VTLN-warped) log mel filterbank energies, regression deltas, an optional
energy row, global mean/variance normalization and temporal splicing.

Frames are stored time-major as ``T x F x C`` arrays where the channel axis is
``[static, delta, double-delta]`` once deltas have been computed.
"""

import dataclasses
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-10
WARP_RANGE = (0.8, 1.2)
WARP_BREAKPOINT = 0.8  # fraction of Nyquist
DEFAULT_DELTA_WINDOW = 2


def hz_to_mel(hz):
    return 1127.0 * np.log1p(np.asarray(hz, dtype=float) / 700.0)


def mel_to_hz(mel):
    return 700.0 * np.expm1(np.asarray(mel, dtype=float) / 1127.0)


def vtln_warp(freqs, warp_factor, nyquist):
    """Piecewise-linear frequency warp.

    Frequencies below the breakpoint are scaled by ``warp_factor``; above it a
    straight segment joins the scaled breakpoint to Nyquist, so the warp maps
    ``[0, nyquist]`` onto itself.
    """
    freqs = np.asarray(freqs, dtype=float)
    if warp_factor == 1.0:
        return freqs.copy()
    fb = WARP_BREAKPOINT * nyquist
    upper = warp_factor * fb + (nyquist - warp_factor * fb) * (freqs - fb) / (nyquist - fb)
    return np.where(freqs <= fb, warp_factor * freqs, upper)


@dataclass(frozen=True)
class FilterbankConfig:
    num_filters: int = 40
    sample_rate: float = 16000.0
    fft_bins: int = 257
    freq_range: tuple = (0.0, 8000.0)
    warp_factor: float = 1.0
    include_energy: bool = False

    def __post_init__(self):
        lo, hi = self.freq_range
        if self.num_filters < 1:
            raise ValueError("num_filters must be >= 1")
        if self.fft_bins < 2:
            raise ValueError("fft_bins must be >= 2")
        if not 0.0 <= lo < hi <= self.sample_rate / 2:
            raise ValueError(f"freq_range {self.freq_range} must satisfy 0 <= low < high <= sample_rate/2")
        if not WARP_RANGE[0] <= self.warp_factor <= WARP_RANGE[1]:
            raise ValueError(f"warp_factor {self.warp_factor} outside {WARP_RANGE}")

    @property
    def nyquist(self):
        return self.sample_rate / 2.0

    def bin_frequencies(self):
        return np.linspace(0.0, self.nyquist, self.fft_bins)

    def edge_frequencies(self):
        """Left edge, centers and right edge of every filter, after warping."""
        lo, hi = self.freq_range
        mels = np.linspace(hz_to_mel(lo), hz_to_mel(hi), self.num_filters + 2)
        return vtln_warp(mel_to_hz(mels), self.warp_factor, self.nyquist)

    def weights(self):
        """``num_filters x fft_bins`` triangular weights, each row summing to 1."""
        edges = self.edge_frequencies()
        f = self.bin_frequencies()
        w = np.zeros((self.num_filters, self.fft_bins))
        for m in range(self.num_filters):
            left, center, right = edges[m], edges[m + 1], edges[m + 2]
            rising = (f > left) & (f <= center)
            falling = (f > center) & (f < right)
            w[m, rising] = (f[rising] - left) / (center - left)
            w[m, falling] = (right - f[falling]) / (right - center)
            total = w[m].sum()
            if total <= 0.0:
                raise ValueError(f"filter {m} covers no FFT bin; increase fft_bins or reduce num_filters")
            w[m] /= total
        return w


def apply_warp(config, warp_factor):
    """Return ``config`` with an additional VTLN warp applied.

    Warps compose multiplicatively on the stored factor, so a factor of 1.0
    returns an identical configuration.
    """
    if not WARP_RANGE[0] <= warp_factor <= WARP_RANGE[1]:
        raise ValueError(f"warp_factor {warp_factor} outside {WARP_RANGE}")
    return dataclasses.replace(config, warp_factor=config.warp_factor * warp_factor)


def _check_spectra(spectra, fft_bins):
    spectra = np.asarray(spectra, dtype=float)
    if spectra.ndim != 2 or spectra.shape[1] != fft_bins:
        raise ValueError(f"expected T x {fft_bins} power spectra, got shape {spectra.shape}")
    if not np.all(np.isfinite(spectra)):
        raise ValueError("power spectra contain non-finite values")
    if np.any(spectra < 0):
        raise ValueError("power spectra must be nonnegative")
    return spectra


def mel_filterbank(power_spectrum_frames, config):
    """Log mel filterbank energies, ``T x num_filters``."""
    spectra = _check_spectra(power_spectrum_frames, config.fft_bins)
    return np.log(spectra @ config.weights().T + LOG_FLOOR)


def frame_log_energy(power_spectrum_frames):
    """Log of total spectral power per frame."""
    spectra = np.asarray(power_spectrum_frames, dtype=float)
    return np.log(spectra.sum(axis=1) + LOG_FLOOR)


def _regression_delta(x, window):
    T = x.shape[0]
    padded = np.pad(x, [(window, window)] + [(0, 0)] * (x.ndim - 1), mode="edge")
    num = np.zeros_like(x, dtype=float)
    for n in range(1, window + 1):
        num += n * (padded[window + n:window + n + T] - padded[window - n:window - n + T])
    return num / (2.0 * sum(n * n for n in range(1, window + 1)))


def compute_deltas(frames, window=DEFAULT_DELTA_WINDOW):
    """Stack statics with regression deltas and double deltas.

    ``frames`` is ``T x F`` (or ``T x F x 1``); the result is ``T x F x 3``.
    Edges are handled by replicating the first and last frame.
    """
    if window < 1:
        raise ValueError("delta window must be >= 1")
    x = np.asarray(frames, dtype=float)
    if x.ndim == 3:
        if x.shape[2] != 1:
            raise ValueError("compute_deltas expects static frames only")
        x = x[:, :, 0]
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"expected T x F frames with T >= 1, got {x.shape}")
    d = _regression_delta(x, window)
    dd = _regression_delta(d, window)
    return np.stack([x, d, dd], axis=2)


def append_energy(frames, per_frame_energy, window=DEFAULT_DELTA_WINDOW):
    """Append energy as one extra frequency row.

    For ``T x F x 3`` frames the new row carries the energy and its deltas, so
    channels stay aligned.
    """
    frames = np.asarray(frames, dtype=float)
    energy = np.asarray(per_frame_energy, dtype=float).reshape(-1)
    if frames.shape[0] != energy.shape[0]:
        raise ValueError(f"{frames.shape[0]} frames but {energy.shape[0]} energies")
    if frames.ndim == 2:
        return np.concatenate([frames, energy[:, None]], axis=1)
    C = frames.shape[2]
    if C == 1 or energy.shape[0] == 0:
        row = np.repeat(energy[:, None, None], C, axis=2)
        if C > 1:
            row[:, :, 1:] = 0.0
    elif C == 3:
        row = compute_deltas(energy[:, None], window)
    else:
        raise ValueError(f"unsupported channel count {C}")
    return np.concatenate([frames, row], axis=1)


def remove_energy(frames):
    """Inverse of :func:`append_energy`: ``(frames, energy)``."""
    frames = np.asarray(frames)
    if frames.ndim == 2:
        return frames[:, :-1], frames[:, -1]
    return frames[:, :-1], frames[:, -1, 0]


@dataclass
class UtteranceFeatures:
    utterance_id: str
    speaker_id: str
    frames: np.ndarray
    labels: Optional[np.ndarray] = None
    nonlocal_rows: int = 0  # trailing frequency rows that carry no locality (energy)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=float)
        if self.frames.ndim == 2:
            self.frames = self.frames[:, :, None]
        if self.frames.ndim != 3:
            raise ValueError(f"frames must be T x F x C, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError(f"utterance {self.utterance_id}: non-finite frames")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.frames.shape[0],):
                raise ValueError("labels must have one entry per frame")

    @property
    def num_frames(self):
        return self.frames.shape[0]

    def with_frames(self, frames, nonlocal_rows=None):
        return UtteranceFeatures(
            self.utterance_id, self.speaker_id, frames, self.labels,
            self.nonlocal_rows if nonlocal_rows is None else nonlocal_rows)


@dataclass
class NormalizationStats:
    mean: np.ndarray
    variance: np.ndarray
    constant: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.constant is None:
            self.constant = self.variance <= 0.0

    @property
    def scale(self):
        return np.where(self.constant, 1.0, np.sqrt(np.where(self.constant, 1.0, self.variance)))

    def apply(self, frames):
        return (np.asarray(frames, dtype=float) - self.mean) / self.scale

    def to_text(self):
        shape = self.mean.shape
        lines = [f"# dims {' '.join(str(s) for s in shape)}"]
        for i, (m, v) in enumerate(zip(self.mean.ravel(), self.variance.ravel())):
            lines.append(f"{i} {float(m)!r} {float(v)!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        lines = [ln for ln in text.splitlines() if ln.strip()]
        shape = tuple(int(s) for s in lines[0].split()[2:])
        rows = np.array([[float(x) for x in ln.split()[1:]] for ln in lines[1:]])
        return cls(rows[:, 0].reshape(shape), rows[:, 1].reshape(shape))


def corpus_statistics(corpus, variance_tol=1e-12):
    if len(corpus) == 0:
        raise ValueError("cannot normalize an empty corpus")
    data = np.concatenate([u.frames for u in corpus], axis=0)
    mean = data.mean(axis=0)
    variance = data.var(axis=0)
    constant = variance <= variance_tol * (1.0 + mean ** 2)
    if np.any(constant):
        logger.warning("normalization: %d zero-variance dimension(s) left unscaled: %s",
                       int(constant.sum()), np.argwhere(constant).tolist())
    return NormalizationStats(mean, variance, constant)


def normalize_corpus(corpus, stats=None):
    """Global mean/variance normalization.

    Statistics are computed from ``corpus`` unless ``stats`` is given (the
    apply-at-test path). Returns ``(normalized_corpus, stats)``.
    """
    if stats is None:
        stats = corpus_statistics(corpus)
    return [u.with_frames(stats.apply(u.frames)) for u in corpus], stats


def splice_context(frames, context):
    """Replicate-padded temporal windows: ``T x (2c+1) x F x C``."""
    if context < 0:
        raise ValueError("context must be >= 0")
    frames = np.asarray(frames)
    T = frames.shape[0]
    idx = np.clip(np.arange(T)[:, None] + np.arange(-context, context + 1)[None, :], 0, T - 1)
    return frames[idx]


# Binary feature container ------------------------------------------------------

_MAGIC = b"ACFT"
_VERSION = 1
_HEADER = struct.Struct("<4sHHIIIIHH")
_FLAG_LABELS = 1


def write_features(path, utt):
    """Write one utterance: header, ids, float32 frames (t, f, c), int32 labels."""
    uid = utt.utterance_id.encode("utf-8")
    sid = utt.speaker_id.encode("utf-8")
    T, F, C = utt.frames.shape
    flags = _FLAG_LABELS if utt.labels is not None else 0
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, flags, T, F, C, utt.nonlocal_rows, len(uid), len(sid)))
        fh.write(uid)
        fh.write(sid)
        fh.write(np.ascontiguousarray(utt.frames, dtype="<f4").tobytes())
        if utt.labels is not None:
            fh.write(np.ascontiguousarray(utt.labels, dtype="<i4").tobytes())


def read_features(path):
    data = Path(path).read_bytes()
    magic, version, flags, T, F, C, nonlocal_rows, lu, ls = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise ValueError(f"{path}: not a feature file")
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    pos = _HEADER.size
    uid = data[pos:pos + lu].decode("utf-8")
    pos += lu
    sid = data[pos:pos + ls].decode("utf-8")
    pos += ls
    n = T * F * C
    frames = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(T, F, C)
    pos += 4 * n
    labels = None
    if flags & _FLAG_LABELS:
        labels = np.frombuffer(data, dtype="<i4", count=T, offset=pos).astype(np.int64)
    return UtteranceFeatures(uid, sid, frames.astype(np.float64), labels, nonlocal_rows)


def write_corpus(directory, corpus: Sequence[UtteranceFeatures]):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for utt in corpus:
        name = f"{utt.utterance_id}.feat"
        write_features(directory / name, utt)
        names.append(name)
    (directory / "manifest.txt").write_text("\n".join(names) + "\n")
    return names


def read_corpus(directory):
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if manifest.exists():
        names = [n for n in manifest.read_text().split() if n]
    else:
        names = sorted(p.name for p in directory.glob("*.feat"))
    return [read_features(directory / n) for n in names]
