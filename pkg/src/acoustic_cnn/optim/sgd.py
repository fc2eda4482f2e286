"""Minibatch SGD on frame cross-entropy with held-out annealing.

After every pass over the training frames the held-out loss is measured. If
it improved by less than ``patience`` the learning rate is divided by
``anneal_factor``; training stops after ``max_anneals`` such reductions.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .. import rng
from ..network.dropout import DropoutContext
from ..network.model import CROSS_ENTROPY

logger = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    """Loss became non-finite; ``params`` holds the last good parameters."""

    def __init__(self, message, params, history):
        super().__init__(message)
        self.params = params
        self.history = history


@dataclass
class SGDSchedule:
    initial_rate: float = 0.05
    anneal_factor: float = 2.0
    patience: float = 1e-3
    max_anneals: int = 5
    minibatch_size: int = 256
    max_epochs: int = 50
    momentum: float = 0.0

    def __post_init__(self):
        if self.initial_rate <= 0:
            raise ValueError("initial_rate must be positive")
        if self.anneal_factor <= 1:
            raise ValueError("anneal_factor must be > 1")
        if self.minibatch_size < 1 or self.max_epochs < 1 or self.max_anneals < 0:
            raise ValueError("minibatch_size and max_epochs must be >= 1, max_anneals >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")


@dataclass
class AnnealTracker:
    """Learning-rate schedule driven by a sequence of held-out losses."""

    schedule: SGDSchedule
    rate: float = 0.0
    anneals: int = 0
    best: float = np.inf
    rates: list = field(default_factory=list)

    def __post_init__(self):
        self.rate = self.schedule.initial_rate
        self.rates = [self.rate]

    @property
    def finished(self):
        return self.anneals >= self.schedule.max_anneals

    def observe(self, heldout_loss):
        """Record one epoch's held-out loss; returns True if the rate was annealed."""
        improvement = self.best - heldout_loss
        self.best = min(self.best, heldout_loss)
        if improvement < self.schedule.patience:
            self.rate /= self.schedule.anneal_factor
            self.anneals += 1
            self.rates.append(self.rate)
            return True
        return False


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    heldout_loss: float
    rate: float
    annealed: bool


def mean_loss(net, params, data, ctx_fn=None, loss=CROSS_ENTROPY, chunk_rows=2048):
    """Mean per-frame loss over a :class:`FrameData` set (no dropout by default)."""
    total = 0.0
    for rows in data.utterance_chunks(chunk_rows):
        ctx = None if ctx_fn is None else ctx_fn(rows)
        total += net.loss(params, data.inputs[rows], data.targets[rows], ctx, loss)
    return total / len(data)


def sgd_train(net, params, train, heldout, schedule: SGDSchedule, master_seed=0, loss=CROSS_ENTROPY,
              heldout_loss_fn=None, callback=None):
    """Train until the rate has been annealed ``max_anneals`` times or ``max_epochs`` pass.

    Frames are shuffled with a keyed generator per epoch and fresh dropout
    masks are drawn for every minibatch. ``heldout_loss_fn(params)`` replaces
    the default held-out measurement (used to rig schedule tests).

    Returns ``(params, history)`` with one :class:`EpochRecord` per epoch.
    """
    params = np.array(params, dtype=float)
    tracker = AnnealTracker(schedule)
    history = []
    velocity = np.zeros_like(params)
    if heldout_loss_fn is None:
        heldout_loss_fn = lambda p: mean_loss(net, p, heldout, loss=loss)
    randomized = bool(net.random_layer_ids)
    n = len(train)
    for epoch in range(schedule.max_epochs):
        if tracker.finished:
            break
        good = params.copy()
        order = rng.generator(master_seed, "sgd-shuffle", epoch).permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, schedule.minibatch_size)):
            rows = order[start:start + schedule.minibatch_size]
            ctx = DropoutContext.whole_batch(master_seed, ("sgd", epoch, b), len(rows)) if randomized else None
            value, grad = net.loss_and_gradient(params, train.inputs[rows], train.targets[rows], ctx, loss)
            if not np.isfinite(value):
                raise TrainingDiverged(f"SGD epoch {epoch} minibatch {b}: non-finite loss", good, history)
            total += value
            velocity = schedule.momentum * velocity - tracker.rate * grad / len(rows)
            params = params + velocity
        held = float(heldout_loss_fn(params))
        if not np.isfinite(held):
            raise TrainingDiverged(f"SGD epoch {epoch}: non-finite held-out loss", good, history)
        rate = tracker.rate
        annealed = tracker.observe(held)
        record = EpochRecord(epoch, total / n, held, rate, annealed)
        history.append(record)
        logger.info("epoch %d loss %.6f heldout %.6f rate %g%s", epoch, record.loss, held, rate,
                    " (annealed)" if annealed else "")
        if callback is not None:
            callback(record, params)
    return params, history
