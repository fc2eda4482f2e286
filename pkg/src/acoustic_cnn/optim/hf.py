"""Hessian-free optimization with Levenberg-Marquardt damping.

One HF iteration computes the gradient on the whole training set, runs CG on
the damped Gauss-Newton model over a fixed curvature batch, and accepts or
rejects the step based on the reduction ratio.

Dropout modes:

``fixed_per_utterance``
    one seed per (utterance, random layer) is registered before CG starts;
    gradient, every curvature product and the step test all use those masks.
``per_cg_iteration``
    gradient and step test use one mask realization, but each CG iteration
    draws fresh masks for its curvature product. The traced ``phi`` is then
    measured with the gradient's masks so both modes are judged on the same
    quadratic.
``none``
    no dropout (and stochastic pooling in its deterministic test mode).
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .. import rng
from ..network.dropout import DropoutContext, DropoutMismatchError
from ..network.model import CROSS_ENTROPY
from .cg import CGBreakdown, run_cg

logger = logging.getLogger(__name__)

HF_DROPOUT_MODES = ("fixed_per_utterance", "per_cg_iteration", "none")


def update_lambda(lam, rho, low=0.25, high=0.75, increase=1.5, decrease=2.0 / 3.0):
    """Levenberg-Marquardt damping update from the reduction ratio."""
    if not math.isfinite(rho):
        raise ValueError("reduction ratio must be finite")
    if rho < low:
        return lam * increase
    if rho > high:
        return lam * decrease
    return lam


def assign_dropout_seeds(utterance_ids, layers, hf_iteration, master_seed, registry=None):
    """Register one seed per (utterance, layer) for an HF iteration.

    Seeds are a pure hash of ``(master_seed, hf_iteration, utterance, layer)``.
    Returns the registry (a new dict unless one is passed in).
    """
    registry = {} if registry is None else registry
    if any(key[0] == hf_iteration for key in registry):
        raise RuntimeError(f"seed registry already populated for HF iteration {hf_iteration}")
    seen = {}
    for u in utterance_ids:
        for layer in layers:
            seed = rng.derive_seed(master_seed, "hf-dropout", hf_iteration, u, layer)
            if seed in seen:
                raise RuntimeError(f"seed collision between {seen[seed]} and {(u, layer)}")
            seen[seed] = (u, layer)
            registry[(hf_iteration, u, layer)] = seed
    return registry


@dataclass
class HFState:
    lam: float = 1.0
    cg_tolerance: float = 5e-4
    cg_max_iters: int = 250
    dropout_mode: str = "fixed_per_utterance"
    curvature_fraction: float = 0.25
    master_seed: int = 0
    iteration: int = 0
    seed_registry: dict = field(default_factory=dict)
    chunk_rows: int = 2048
    cache_rows: int = 4096  # keep forward traces of the curvature batch when it has at most this many rows

    def __post_init__(self):
        if self.dropout_mode not in HF_DROPOUT_MODES:
            raise ValueError(f"unknown HF dropout mode {self.dropout_mode!r}")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")

    def to_dict(self):
        return {"lam": self.lam, "cg_tolerance": self.cg_tolerance, "cg_max_iters": self.cg_max_iters,
                "dropout_mode": self.dropout_mode, "curvature_fraction": self.curvature_fraction,
                "master_seed": self.master_seed, "iteration": self.iteration, "chunk_rows": self.chunk_rows,
                "cache_rows": self.cache_rows}


@dataclass
class HFResult:
    params: np.ndarray
    trace: object
    lam: float
    accepted: bool
    loss: float  # mean training loss before the step, with this iteration's masks
    new_loss: float
    rho: float
    predicted: float
    cg_restarts: int = 0


class NetworkHFProblem:
    """Mean frame cross-entropy of a network on a :class:`FrameData` set."""

    def __init__(self, net, data, loss=CROSS_ENTROPY):
        self.net = net
        self.data = data
        self.loss_fn = loss
        self.randomized = bool(net.random_layer_ids)

    def begin_iteration(self, params, state):
        it = state.iteration
        data = self.data
        mode = state.dropout_mode if self.randomized else "none"
        self.mode = mode
        if mode == "fixed_per_utterance":
            assign_dropout_seeds(data.utterance_ids, self.net.random_layer_ids, it, state.master_seed,
                                 state.seed_registry)
            self._grad_ctx = lambda rows: DropoutContext.from_registry(
                state.seed_registry, it, data.row_utterance[rows], data.row_frame[rows])
        elif mode == "per_cg_iteration":
            self._grad_ctx = lambda rows: DropoutContext.keyed(
                state.master_seed, ("hf", it), data.row_utterance[rows], data.row_frame[rows])
        else:
            self._grad_ctx = lambda rows: None
        n_utt = len(data.utterance_ids)
        n_curv = max(1, int(round(state.curvature_fraction * n_utt)))
        picked = rng.generator(state.master_seed, "curvature-batch", it).choice(n_utt, n_curv, replace=False)
        self.curvature_utterances = tuple(sorted(int(i) for i in picked))
        self._curv_chunks = list(data.utterance_chunks(state.chunk_rows, self.curvature_utterances))
        self._curv_rows = sum(len(c) for c in self._curv_chunks)
        self._grad_chunks = list(data.utterance_chunks(state.chunk_rows))
        self.gradient_signature = None
        if mode == "fixed_per_utterance":
            self.gradient_signature = self._grad_ctx(self._grad_chunks[0][:1]).signature
        self._it = it
        self._master = state.master_seed
        self._cache_ok = self._curv_rows <= state.cache_rows
        self._traces = {}

    def loss_and_gradient(self, params):
        total, grad = 0.0, np.zeros(self.net.num_params)
        for rows in self._grad_chunks:
            l, g = self.net.loss_and_gradient(params, self.data.inputs[rows], self.data.targets[rows],
                                              self._grad_ctx(rows), self.loss_fn)
            total += l
            grad += g
        n = len(self.data)
        return total / n, grad / n

    def loss(self, params):
        total = 0.0
        for rows in self._grad_chunks:
            total += self.net.loss(params, self.data.inputs[rows], self.data.targets[rows],
                                   self._grad_ctx(rows), self.loss_fn)
        return total / len(self.data)

    def _curvature_ctx(self, rows, cg_iteration):
        if self.mode == "per_cg_iteration" and cg_iteration is not None:
            return DropoutContext.keyed(self._master, ("hf", self._it, "cg", cg_iteration),
                                        self.data.row_utterance[rows], self.data.row_frame[rows])
        return self._grad_ctx(rows)

    def curvature(self, params, v, cg_iteration=None):
        """Mean Gauss-Newton product over the curvature batch.

        ``cg_iteration=None`` selects the gradient's masks.
        """
        total = np.zeros(self.net.num_params)
        fresh = self.mode == "per_cg_iteration" and cg_iteration is not None
        for k, rows in enumerate(self._curv_chunks):
            ctx = self._curvature_ctx(rows, cg_iteration)
            if self.gradient_signature is not None and ctx.signature != self.gradient_signature:
                raise DropoutMismatchError("curvature masks differ from gradient masks")
            x = self.data.inputs[rows]
            trace = None
            if self._cache_ok and not fresh:
                if k not in self._traces:
                    self._traces[k] = self.net.forward_trace(params, x, ctx)
                trace = self._traces[k]
            total += self.net.gauss_newton_product(params, v, x, self.data.targets[rows], ctx, self.loss_fn, trace)
        return total / self._curv_rows

    @property
    def fixed_operator(self):
        return self.mode != "per_cg_iteration"


class QuadraticProblem:
    """``L(x) = 1/2 x.A x - b.x``; exact curvature, used as a test rig."""

    fixed_operator = True

    def __init__(self, A, b):
        self.A = np.asarray(A, dtype=float)
        self.b = np.asarray(b, dtype=float)

    def begin_iteration(self, params, state):
        pass

    def loss(self, x):
        return float(0.5 * x @ self.A @ x - self.b @ x)

    def loss_and_gradient(self, x):
        return self.loss(x), self.A @ x - self.b

    def curvature(self, params, v, cg_iteration=None):
        return self.A @ v


def hf_step(problem, params, state):
    """One HF iteration on any problem exposing gradient and curvature products."""
    problem.begin_iteration(params, state)
    loss, grad = problem.loss_and_gradient(params)
    if not np.isfinite(loss):
        raise FloatingPointError(f"HF iteration {state.iteration}: non-finite training loss")

    def operator(v, i):
        return problem.curvature(params, v, i)

    phi_operator = None
    if not problem.fixed_operator:
        phi_operator = lambda v, i: problem.curvature(params, v, None)

    restarts = 0
    lam = state.lam
    while True:
        try:
            d, trace = run_cg(grad, operator, lam, state.cg_tolerance, state.cg_max_iters, phi_operator)
            break
        except CGBreakdown as exc:
            if restarts >= 1:
                raise
            restarts += 1
            lam = max(lam * 10.0, 1e-4)
            logger.warning("HF iteration %d: %s; raising lambda to %g and restarting CG", state.iteration, exc, lam)

    predicted = trace.phi[trace.best_iteration - 1] if trace.best_iteration > 0 else 0.0
    candidate = params + d
    new_loss = problem.loss(candidate)
    actual = new_loss - loss
    rho = actual / predicted if predicted < 0 else -np.inf
    if not np.isfinite(new_loss):
        rho = -np.inf
    new_lam = update_lambda(lam, rho if np.isfinite(rho) else -1.0)
    accepted = bool(np.isfinite(new_loss) and actual <= 0.0 and predicted < 0)
    state.lam = new_lam
    state.iteration += 1
    return HFResult(candidate if accepted else params, trace, new_lam, accepted, loss,
                    new_loss if accepted else loss, float(rho), float(predicted), restarts)


def hf_iteration(net, params, corpus, state, loss=CROSS_ENTROPY):
    """One HF iteration of a network on a :class:`FrameData` training set."""
    return hf_step(NetworkHFProblem(net, corpus, loss), params, state)
