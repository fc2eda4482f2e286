"""Speaker adaptation in a decorrelated feature space.

The chain is: a diagonal-covariance GMM trained on pooled frames, a
semi-tied covariance (STC) transform ``S`` that makes the frames closer to
diagonal-Gaussian, a per-speaker fMLLR transform ``x -> A x + b`` estimated in
the ``S``-space, and finally the map back ``f -> S^-1 (A S f + b)`` so the
features keep their spectral locality.

Both STC and fMLLR use the usual row-by-row cofactor updates; each row update
is the exact maximizer of the auxiliary function with the other rows fixed.
"""

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import rng
from .features import compute_deltas

logger = logging.getLogger(__name__)

VARIANCE_FLOOR_RATIO = 1e-4
LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class DiagonalGMM:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    history: list = field(default_factory=list, compare=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=float))
        if self.means.shape != self.variances.shape or self.means.shape[0] != self.weights.shape[0]:
            raise ValueError("inconsistent GMM parameter shapes")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-8:
            raise ValueError("GMM weights must be nonnegative and sum to 1")
        if np.any(self.variances <= 0):
            raise ValueError("GMM variances must be positive")

    @property
    def num_components(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    def component_log_likelihoods(self, frames):
        """``N x K`` matrix of ``log w_k + log N(x | mu_k, diag(var_k))``."""
        X = np.atleast_2d(np.asarray(frames, dtype=float))
        prec = 1.0 / self.variances
        # expand the quadratic form to stay O(N K D)
        quad = (X ** 2) @ prec.T - 2.0 * X @ (self.means * prec).T + np.sum(self.means ** 2 * prec, axis=1)
        logdet = np.sum(np.log(self.variances), axis=1)
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        return logw - 0.5 * (self.dim * LOG_2PI + logdet + quad)

    def posteriors(self, frames):
        """Component posteriors and the total log-likelihood."""
        ll = self.component_log_likelihoods(frames)
        norm = logsumexp(ll, axis=1)
        return np.exp(ll - norm[:, None]), float(norm.sum())

    def log_likelihood(self, frames):
        return float(logsumexp(self.component_log_likelihoods(frames), axis=1).sum())

    def checksum(self):
        h = hashlib.sha256()
        for a in (self.weights, self.means, self.variances):
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    def to_text(self):
        return "gmm\n" + "".join(_matrix_text(a) for a in (self.weights[None, :], self.means, self.variances))

    @classmethod
    def from_text(cls, text):
        lines = _lines(text, "gmm")
        w = _read_matrix(lines)
        return cls(w[0], _read_matrix(lines), _read_matrix(lines))


def _kmeanspp_init(X, K, gen):
    N = X.shape[0]
    centers = [X[gen.integers(N)]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            idx = gen.integers(N)
        else:
            idx = int(np.searchsorted(np.cumsum(d2), gen.random() * total, side="right"))
            idx = min(idx, N - 1)
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return np.array(centers)


def train_diag_gmm(frames, K, iters, seed=0, variance_floor_ratio=VARIANCE_FLOOR_RATIO):
    """Maximum-likelihood diagonal GMM by EM.

    Initialization uses k-means++ seeding keyed on ``seed``. Variances are
    floored at ``variance_floor_ratio`` times the global per-dimension
    variance. ``gmm.history`` holds the total log-likelihood before the first
    iteration and after every iteration.
    """
    X = np.atleast_2d(np.asarray(frames, dtype=float))
    N, D = X.shape
    if D < 1:
        raise ValueError("frames must have at least one dimension")
    if N < K:
        raise ValueError(f"need at least K={K} frames, got {N}")
    global_var = X.var(axis=0)
    floor = np.maximum(variance_floor_ratio * global_var, 1e-12)

    means = _kmeanspp_init(X, K, rng.generator(seed, "gmm-init", K))
    variances = np.tile(np.maximum(global_var, floor), (K, 1))
    gmm = DiagonalGMM(np.full(K, 1.0 / K), means, variances)

    history = []
    for it in range(iters):
        gamma, ll = gmm.posteriors(X)
        history.append(ll)
        counts = gamma.sum(axis=0)
        empty = counts < 1e-6 * N / K
        safe = np.where(empty, 1.0, counts)
        means = (gamma.T @ X) / safe[:, None]
        variances = (gamma.T @ X ** 2) / safe[:, None] - means ** 2
        variances = np.maximum(variances, floor)
        weights = counts / counts.sum()
        for k in np.flatnonzero(empty):
            donor = int(np.argmax(counts))
            logger.info("gmm iter %d: component %d empty, reseeded from %d", it, k, donor)
            jitter = rng.generator(seed, "gmm-reseed", it, int(k)).standard_normal(D)
            means[k] = means[donor] + 0.1 * np.sqrt(variances[donor]) * jitter
            variances[k] = variances[donor]
            weights[k] = weights[donor] = 0.5 * weights[donor]
        gmm = DiagonalGMM(weights / weights.sum(), means, variances)
    history.append(gmm.log_likelihood(X))
    gmm.history = history
    return gmm


# STC ---------------------------------------------------------------------------

@dataclass
class STCTransform:
    S: np.ndarray
    variances: np.ndarray  # K x D, diagonal variances in the transformed space
    means: np.ndarray  # K x D, untransformed component means
    weights: np.ndarray
    gmm_tag: str = ""
    history: list = field(default_factory=list, compare=False)

    def __post_init__(self):
        self.S = np.asarray(self.S, dtype=float)
        if abs(np.linalg.det(self.S)) <= 1e-12:
            raise ValueError("STC matrix is singular")

    def transform(self, frames):
        return np.asarray(frames, dtype=float) @ self.S.T

    def transformed_gmm(self):
        """The diagonal GMM expressed in the decorrelated space."""
        return DiagonalGMM(self.weights, self.means @ self.S.T, self.variances)

    def to_text(self):
        return (f"stc {self.gmm_tag or '-'}\n" + _matrix_text(self.S) + _matrix_text(self.variances)
                + _matrix_text(self.means) + _matrix_text(self.weights[None, :]))

    @classmethod
    def from_text(cls, text):
        lines = _lines(text, "stc")
        tag = lines.header[1] if len(lines.header) > 1 and lines.header[1] != "-" else ""
        S = _read_matrix(lines)
        var = _read_matrix(lines)
        means = _read_matrix(lines)
        w = _read_matrix(lines)[0]
        return cls(S, var, means, w, tag)


def _stc_objective(S, W, beta_m):
    var = np.einsum("id,mde,ie->mi", S, W, S)
    beta = beta_m.sum()
    _, logdet = np.linalg.slogdet(S)
    return float(beta * logdet - 0.5 * np.sum(beta_m[:, None] * np.log(var))), var


def estimate_stc(gmm, frames, outer_iters=10, row_iters=2, variance_floor=1e-10):
    """Estimate a semi-tied transform ``S`` from frames and a diagonal GMM.

    Component posteriors come from ``gmm`` and stay fixed; each component's
    scatter matrix gets the GMM variance floor added to its diagonal. Each outer
    iteration re-estimates the per-component diagonal variances given ``S``
    and then sweeps the rows of ``S`` ``row_iters`` times in ascending order.
    ``history`` records the objective
    ``beta log|det S| - 1/2 sum_m beta_m sum_i log var_mi`` after each outer
    iteration (and once before the first).
    """
    X = np.atleast_2d(np.asarray(frames, dtype=float))
    D = X.shape[1]
    if D != gmm.dim:
        raise ValueError(f"frames have dim {D}, GMM has {gmm.dim}")
    gamma, _ = gmm.posteriors(X)
    beta_m = gamma.sum(axis=0)
    keep = beta_m > 1e-8
    beta_m = beta_m[keep]
    means = gmm.means[keep]
    # sparse components give rank-deficient scatter; floor the diagonal as in GMM training
    floor = np.diag(np.maximum(VARIANCE_FLOOR_RATIO * X.var(axis=0), 1e-12))
    W = np.empty((beta_m.shape[0], D, D))
    for j, k in enumerate(np.flatnonzero(keep)):
        diff = X - gmm.means[k]
        W[j] = (diff * gamma[:, k:k + 1]).T @ diff / beta_m[j] + floor
    beta = beta_m.sum()

    S = np.eye(D)
    obj, var = _stc_objective(S, W, beta_m)
    history = [obj]
    for it in range(outer_iters):
        var = np.maximum(np.einsum("id,mde,ie->mi", S, W, S), variance_floor)
        for _ in range(row_iters):
            for i in range(D):
                G = np.einsum("m,mde->de", beta_m / var[:, i], W)
                c = np.linalg.inv(S)[:, i]
                try:
                    Ginv_c = np.linalg.solve(G, c)
                except np.linalg.LinAlgError:
                    logger.warning("stc iter %d: singular statistics for row %d, row kept", it, i)
                    continue
                denom = float(c @ Ginv_c)
                if not np.isfinite(denom) or denom <= 0:
                    logger.warning("stc iter %d: degenerate cofactor system for row %d, row kept", it, i)
                    continue
                S[i] = Ginv_c * np.sqrt(beta / denom)
        obj, var = _stc_objective(S, W, beta_m)
        history.append(obj)
    var = np.maximum(var, variance_floor)
    full_var = np.empty_like(gmm.variances)
    full_var[keep] = var
    # components without data keep their old variance, rotated approximately
    full_var[~keep] = gmm.variances[~keep]
    return STCTransform(S.copy(), full_var, gmm.means.copy(), gmm.weights.copy(), gmm.checksum(), history)


# fMLLR -------------------------------------------------------------------------

@dataclass
class FMLLRTransform:
    speaker_id: str
    A: np.ndarray
    b: np.ndarray
    objective_history: list = field(default_factory=list, compare=False)
    aux_history: list = field(default_factory=list, compare=False)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.b = np.asarray(self.b, dtype=float).reshape(-1)

    @classmethod
    def identity(cls, speaker_id, dim):
        return cls(speaker_id, np.eye(dim), np.zeros(dim))

    def apply(self, frames):
        return np.asarray(frames, dtype=float) @ self.A.T + self.b

    def to_text(self):
        return f"fmllr {self.speaker_id}\n" + _matrix_text(self.A) + _matrix_text(self.b[None, :])

    @classmethod
    def from_text(cls, text):
        lines = _lines(text, "fmllr")
        speaker = " ".join(lines.header[1:])
        A = _read_matrix(lines)
        return cls(speaker, A, _read_matrix(lines)[0])


def fmllr_objective(gmm, frames, A, b):
    """``sum_t log p(A f_t + b) + T log|det A|``."""
    X = np.atleast_2d(np.asarray(frames, dtype=float))
    _, logdet = np.linalg.slogdet(A)
    return gmm.log_likelihood(X @ A.T + b) + X.shape[0] * logdet


def estimate_fmllr(gmm, frames, iters=10, row_iters=2, speaker_id="", min_frames=None):
    """Per-speaker fMLLR transform in the space of ``gmm``.

    Each iteration recomputes component posteriors for the adapted frames and
    then sweeps the rows of ``W = [A b]`` ``row_iters`` times. The
    likelihood objective per iteration goes into ``objective_history`` and the
    auxiliary value after every row sweep into ``aux_history`` (one list per
    iteration, starting with the value before the first sweep).
    """
    X = np.atleast_2d(np.asarray(frames, dtype=float))
    N, D = X.shape
    if D != gmm.dim:
        raise ValueError(f"frames have dim {D}, GMM has {gmm.dim}")
    min_frames = D if min_frames is None else min_frames
    if N < min_frames:
        logger.info("fmllr %s: %d frames < %d, identity transform", speaker_id, N, min_frames)
        return FMLLRTransform.identity(speaker_id, D)
    if iters == 0:
        return FMLLRTransform.identity(speaker_id, D)

    xi = np.hstack([X, np.ones((N, 1))])
    outer = (xi[:, :, None] * xi[:, None, :]).reshape(N, -1)  # fixed across iterations
    Wt = np.hstack([np.eye(D), np.zeros((D, 1))])
    prec = 1.0 / gmm.variances
    scaled_means = gmm.means * prec
    objective = [fmllr_objective(gmm, X, Wt[:, :D], Wt[:, D])]
    aux_history = []
    for it in range(iters):
        gamma, _ = gmm.posteriors(xi @ Wt.T)
        beta = gamma.sum()
        w = gamma @ prec  # N x D
        G = (w.T @ outer).reshape(D, D + 1, D + 1)
        K = (gamma @ scaled_means).T @ xi  # D x (D+1)

        def aux(Wm):
            _, logdet = np.linalg.slogdet(Wm[:, :D])
            return float(beta * logdet + np.sum(Wm * K) - 0.5 * np.einsum("ij,ijk,ik->", Wm, G, Wm))

        Ginvs = [None] * D
        for i in range(D):
            try:
                Ginvs[i] = np.linalg.inv(G[i])
            except np.linalg.LinAlgError:
                logger.warning("fmllr %s iter %d: singular statistics for row %d", speaker_id, it, i)

        sweep = [aux(Wt)]
        for _ in range(row_iters):
            for i in range(D):
                Ginv = Ginvs[i]
                try:
                    cof = np.linalg.inv(Wt[:, :D])[:, i]
                except np.linalg.LinAlgError:
                    cof = None
                if Ginv is None or cof is None:
                    logger.warning("fmllr %s iter %d: ill-conditioned row %d skipped", speaker_id, it, i)
                    continue
                p = np.append(cof, 0.0)
                e1 = float(p @ Ginv @ p)
                e2 = float(p @ Ginv @ K[i])
                if not np.isfinite(e1) or e1 <= 0:
                    logger.warning("fmllr %s iter %d: ill-conditioned row %d skipped", speaker_id, it, i)
                    continue
                disc = np.sqrt(e2 * e2 + 4.0 * beta * e1)
                best = None
                for alpha in ((-e2 + disc) / (2 * e1), (-e2 - disc) / (2 * e1)):
                    val = beta * np.log(abs(alpha * e1 + e2)) - 0.5 * alpha * alpha * e1
                    if best is None or val > best[0]:
                        best = (val, alpha)
                Wt[i] = (best[1] * p + K[i]) @ Ginv
            sweep.append(aux(Wt))
        aux_history.append(sweep)
        objective.append(fmllr_objective(gmm, X, Wt[:, :D], Wt[:, D]))
    return FMLLRTransform(speaker_id, Wt[:, :D].copy(), Wt[:, D].copy(), objective, aux_history)


def adapt_features(frames, stc, fmllr):
    """``S^-1 (A S f + b)`` applied to every row of a ``T x D`` static block."""
    X = np.atleast_2d(np.asarray(frames, dtype=float))
    y = fmllr.apply(stc.transform(X))
    return np.linalg.solve(stc.S, y.T).T


def unadapt_features(frames, stc, fmllr):
    """Inverse of :func:`adapt_features`."""
    Y = np.atleast_2d(np.asarray(frames, dtype=float))
    inner = np.linalg.solve(fmllr.A, (Y @ stc.S.T - fmllr.b).T).T
    return np.linalg.solve(stc.S, inner.T).T


def adapt_utterance(utt, stc, fmllr, delta_window=2):
    """Adapt the static channel of an utterance and recompute its deltas.

    Non-local trailing rows (energy) are carried through unchanged.
    """
    if fmllr.speaker_id and fmllr.speaker_id != utt.speaker_id:
        raise ValueError(f"fMLLR transform for {fmllr.speaker_id!r} applied to speaker {utt.speaker_id!r}")
    F = utt.frames.shape[1] - utt.nonlocal_rows
    static = adapt_features(utt.frames[:, :F, 0], stc, fmllr)
    if utt.frames.shape[2] == 3:
        local = compute_deltas(static, delta_window)
    else:
        local = static[:, :, None]
    frames = np.concatenate([local, utt.frames[:, F:, :]], axis=1)
    return utt.with_frames(frames)


# structured text helpers ------------------------------------------------------

def _matrix_text(a):
    a = np.atleast_2d(a)
    rows = "\n".join(" ".join(f"{v:.17g}" for v in row) for row in a)
    return f"{a.shape[0]} {a.shape[1]}\n{rows}\n"


class _lines:
    def __init__(self, text, kind):
        self.rows = [ln.split() for ln in text.splitlines() if ln.strip()]
        self.header = self.rows[0]
        if self.header[0] != kind:
            raise ValueError(f"expected a {kind} file, found {self.header[0]!r}")
        self.pos = 1

    def take(self):
        row = self.rows[self.pos]
        self.pos += 1
        return row


def _read_matrix(lines):
    r, c = (int(v) for v in lines.take())
    return np.array([[float(v) for v in lines.take()] for _ in range(r)]).reshape(r, c)


def read_transform(path):
    """Load a GMM, STC or fMLLR file by its header tag."""
    with open(path) as fh:
        text = fh.read()
    kind = text.split(None, 1)[0]
    return {"gmm": DiagonalGMM, "stc": STCTransform, "fmllr": FMLLRTransform}[kind].from_text(text)


def write_transform(path, obj):
    with open(path, "w") as fh:
        fh.write(obj.to_text())
