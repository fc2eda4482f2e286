"""Deterministic dropout masks.

A mask is a pure function of a 64-bit seed and a shape. Seeds come either
from a key path (``master_seed``, salt, utterance, layer) or from a seed
registry written once per HF iteration. A :class:`DropoutContext` tells the
network which utterance and frame every row of a batch belongs to, so a
frame sees the same mask no matter how batches are cut.
"""

from dataclasses import dataclass, field

import numpy as np

from .. import rng

MODES = ("per_presentation", "fixed_per_utterance", "per_cg_iteration", "none")


class DropoutMismatchError(RuntimeError):
    """Curvature products were requested with masks other than the gradient's."""


@dataclass
class DropoutPlan:
    per_layer_probability: dict = field(default_factory=dict)
    master_seed: int = 0
    mode: str = "per_presentation"

    def __post_init__(self):
        for layer_id, p in self.per_layer_probability.items():
            if not 0.0 <= p < 1.0:
                raise ValueError(f"dropout probability for {layer_id} must be in [0, 1), got {p}")
        if self.mode not in MODES:
            raise ValueError(f"unknown dropout mode {self.mode!r}")

    def probability(self, layer_id):
        try:
            return self.per_layer_probability[layer_id]
        except KeyError:
            raise KeyError(f"layer {layer_id!r} has no dropout probability in the plan") from None

    def mask(self, utterance_id, layer_id, shape):
        """Keep-mask (True = kept) for one utterance and layer."""
        p = self.probability(layer_id)
        return keep_mask(rng.derive_seed(self.master_seed, utterance_id, layer_id), shape, p)


def keep_mask(seed, shape, p):
    return rng.generator_from_seed(seed).random(shape) < (1.0 - p)


def dropout_apply(y, plan, utterance_id, layer_id, training=True):
    """Mask and rescale ``y`` (rows are frames of one utterance).

    At test time the input is returned untouched.
    """
    y = np.asarray(y, dtype=float)
    p = plan.probability(layer_id)
    if not training or p == 0.0:
        return y
    return y * plan.mask(utterance_id, layer_id, y.shape) * (1.0 / (1.0 - p))


class DropoutContext:
    """Source of keyed uniforms for one batch.

    ``groups`` is a list of ``(key, rows, positions)``: the batch rows that
    draw from the stream identified by ``key`` and their row index within that
    stream. ``seed_fn(key, layer_id)`` turns a stream key into a seed.
    ``signature`` identifies where the seeds come from; two contexts with the
    same signature and groups produce the same masks.
    """

    training = True

    def __init__(self, groups, seed_fn, signature, batch_size):
        self.groups = groups
        self.seed_fn = seed_fn
        self.signature = signature
        self.batch_size = batch_size
        self._memo = {}

    @classmethod
    def per_utterance(cls, utterance_ids, frame_index, seed_fn, signature):
        utterance_ids = np.asarray(utterance_ids, dtype=object)
        frame_index = np.asarray(frame_index, dtype=np.int64)
        groups = []
        order = {}
        for row, u in enumerate(utterance_ids):
            order.setdefault(u, []).append(row)
        for u, rows in order.items():
            rows = np.asarray(rows)
            groups.append((u, rows, frame_index[rows]))
        return cls(groups, seed_fn, signature, len(utterance_ids))

    @classmethod
    def keyed(cls, master_seed, salt, utterance_ids, frame_index):
        """Seeds derived from ``(master_seed, *salt, utterance, layer)``."""
        salt = tuple(salt)
        return cls.per_utterance(
            utterance_ids, frame_index,
            lambda u, layer: rng.derive_seed(master_seed, *salt, u, layer),
            ("keyed", master_seed) + salt)

    @classmethod
    def from_registry(cls, registry, hf_iteration, utterance_ids, frame_index):
        def seed_fn(u, layer):
            try:
                return registry[(hf_iteration, u, layer)]
            except KeyError:
                raise DropoutMismatchError(
                    f"no registered seed for hf_iteration={hf_iteration}, utterance={u!r}, layer={layer!r}") from None
        return cls.per_utterance(utterance_ids, frame_index, seed_fn, ("registry", id(registry), hf_iteration))

    @classmethod
    def whole_batch(cls, master_seed, salt, batch_size):
        """One stream for the whole batch (per-presentation SGD masks)."""
        salt = tuple(salt)
        return cls([("batch", np.arange(batch_size), np.arange(batch_size))],
                   lambda u, layer: rng.derive_seed(master_seed, *salt, layer),
                   ("batch", master_seed) + salt, batch_size)

    def uniforms(self, layer_id, width):
        key = (layer_id, width)
        if key not in self._memo:
            out = np.empty((self.batch_size, width))
            for stream, rows, positions in self.groups:
                draws = rng.generator_from_seed(self.seed_fn(stream, layer_id)).random(
                    (int(positions.max()) + 1, width))
                out[rows] = draws[positions]
            self._memo[key] = out
        return self._memo[key]

    def subset(self, rows):
        """Context for a row subset of this batch (same streams, same positions)."""
        rows = np.asarray(rows)
        remap = np.full(self.batch_size, -1)
        remap[rows] = np.arange(len(rows))
        groups = []
        for stream, grows, pos in self.groups:
            keep = remap[grows] >= 0
            if keep.any():
                groups.append((stream, remap[grows[keep]], pos[keep]))
        return DropoutContext(groups, self.seed_fn, self.signature, len(rows))
