"""Feature pipeline for experiments: statics, adaptation, deltas, energy, normalization.

The adaptation chain (GMM, STC, per-speaker fMLLR) and the normalization
statistics are fitted on the training split and applied to every split.
fMLLR is estimated for every speaker from that speaker's own frames, which
for test speakers means unsupervised adaptation on the test data.
"""

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from ..adaptation import FMLLRTransform, adapt_features, estimate_fmllr, estimate_stc, train_diag_gmm
from ..features import (FilterbankConfig, NormalizationStats, append_energy, compute_deltas, frame_log_energy,
                        mel_filterbank, normalize_corpus)

logger = logging.getLogger(__name__)


@dataclass
class FeatureOptions:
    warp: bool = False  # spectra corpora only: undo each speaker's warp with its factor
    adapt: bool = False  # STC + per-speaker fMLLR chain on the statics
    deltas: bool = True
    energy: bool = False  # spectra corpora only
    context: int = 4
    gmm_components: int = 64
    gmm_iters: int = 10
    stc_iters: int = 5
    fmllr_iters: int = 5
    seed: int = 0

    def problems(self, representation="features"):
        out = []
        if self.context < 0:
            out.append(("context", "must be >= 0"))
        if self.gmm_components < 1:
            out.append(("gmm_components", "must be >= 1"))
        for name in ("gmm_iters", "stc_iters", "fmllr_iters"):
            if getattr(self, name) < 0:
                out.append((name, "must be >= 0"))
        if representation != "spectra":
            if self.warp:
                out.append(("warp", "needs a spectra corpus"))
            if self.energy:
                out.append(("energy", "needs a spectra corpus"))
        return out

    @property
    def channels(self):
        return 3 if self.deltas else 1

    @property
    def nonlocal_rows(self):
        return 1 if self.energy else 0

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"features: unknown fields {unknown}")
        return cls(**d)


@dataclass
class FittedPipeline:
    options: FeatureOptions
    representation: str
    stc: object = None
    gmm: object = None
    fmllr: dict = field(default_factory=dict)
    stats: NormalizationStats = None
    warps: dict = field(default_factory=dict)

    def input_shape(self, spectral_dim):
        o = self.options
        return (spectral_dim + o.nonlocal_rows, 2 * o.context + 1, o.channels)


def _statics(utt, representation, warp_factor, fft_bins, num_filters):
    """``(T x D statics, per-frame energy or None)``."""
    if representation == "features":
        return utt.frames[:, :, 0], None
    spectra = utt.frames[:, :, 0]
    config = FilterbankConfig(num_filters=num_filters, fft_bins=fft_bins, warp_factor=warp_factor)
    return mel_filterbank(spectra, config), frame_log_energy(spectra)


class FeaturePipeline:
    def __init__(self, options: FeatureOptions, corpus):
        self.options = options
        self.corpus = corpus
        spec = corpus.spec
        problems = options.problems(spec.representation)
        if problems:
            raise ValueError("; ".join(f"features.{p}: {m}" for p, m in problems))
        self.representation = spec.representation
        self.fft_bins = spec.fft_bins
        self.num_filters = spec.spectral_dim

    def _static_split(self, utts):
        out = []
        for u in utts:
            warp = self.corpus.warp_factor(u.speaker_id) if self.options.warp else 1.0
            out.append(_statics(u, self.representation, warp, self.fft_bins, self.num_filters))
        return out

    def extract(self, utterances):
        """Statics (+ deltas, + energy) without adaptation or normalization."""
        if self.options.adapt:
            raise ValueError("extract does not adapt; use fit_transform")
        statics = self._static_split(utterances)
        return [self._assemble(u, s, e, None) for u, (s, e) in zip(utterances, statics)]

    def fit_transform(self):
        """Fit on the training split; returns ``(FittedPipeline, {split: utterances})``."""
        o = self.options
        splits = {name: self.corpus.split(name) for name in ("train", "heldout", "test")}
        statics = {name: self._static_split(utts) for name, utts in splits.items()}
        fitted = FittedPipeline(o, self.representation)
        if o.warp:
            fitted.warps = {sid: d.warp_factor for sid, d in self.corpus.speakers.items()}
        if o.adapt:
            pooled = np.concatenate([s for s, _ in statics["train"]], axis=0)
            gmm = train_diag_gmm(pooled, o.gmm_components, o.gmm_iters, seed=o.seed)
            stc = estimate_stc(gmm, pooled, outer_iters=o.stc_iters)
            space = stc.transformed_gmm()
            fitted.gmm, fitted.stc = gmm, stc
            by_speaker = {}
            for name in ("train", "heldout", "test"):
                for u, (s, _) in zip(splits[name], statics[name]):
                    by_speaker.setdefault(u.speaker_id, []).append(s)
            for sid in sorted(by_speaker):
                X = stc.transform(np.concatenate(by_speaker[sid], axis=0))
                fitted.fmllr[sid] = estimate_fmllr(space, X, iters=o.fmllr_iters, speaker_id=sid)
        assembled = {}
        for name, utts in splits.items():
            assembled[name] = [self._assemble(u, s, e, fitted) for u, (s, e) in zip(utts, statics[name])]
        assembled["train"], fitted.stats = normalize_corpus(assembled["train"])
        for name in ("heldout", "test"):
            if assembled[name]:
                assembled[name], _ = normalize_corpus(assembled[name], fitted.stats)
        return fitted, assembled

    def _assemble(self, utt, static, energy, fitted):
        o = self.options
        if o.adapt:
            static = adapt_features(static, fitted.stc, fitted.fmllr.get(
                utt.speaker_id, FMLLRTransform.identity(utt.speaker_id, static.shape[1])))
        frames = compute_deltas(static) if o.deltas else static[:, :, None]
        nonlocal_rows = 0
        if o.energy:
            frames = append_energy(frames, energy)
            nonlocal_rows = 1
        return utt.with_frames(frames, nonlocal_rows)
