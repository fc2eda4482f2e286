"""Layer kernels.

Spatial activations are batch-first ``N x F x T x C`` arrays (frequency,
time, channels). Each layer implements three passes:

``forward(x, params, ctx) -> (y, cache)``
``backward(dy, cache, params, need_dx) -> (dx, grads)``
``rforward(rx, cache, params, vparams) -> ry``

``rforward`` is the directional derivative of the output when the input
moves along ``rx`` and the parameters along ``vparams`` (``rx`` may be
``None`` for the network input). It is what the Gauss-Newton product needs.

Convolution is a correlation (no kernel flip).
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_AXIS = {"frequency": 1, "time": 2}


# Pooling on a single region ------------------------------------------------------
# The layer versions below vectorize these over all regions.

def pool_max(region):
    """Max of a region and the (lowest) index where it occurs."""
    region = np.asarray(region, dtype=float)
    if region.size == 0:
        raise ValueError("empty pooling region")
    idx = int(np.argmax(region))
    return float(region[idx]), idx


def pool_lp(region, p, normalize=False, absolute=False):
    """``(sum a_i^p)^(1/p)``; with ``normalize`` the sum becomes a mean."""
    a = np.asarray(region, dtype=float)
    if absolute:
        a = np.abs(a)
    elif np.any(a < 0):
        raise ValueError("lp pooling needs nonnegative activations (or absolute=True)")
    m = a.max()
    if m == 0:
        return 0.0
    s = np.sum((a / m) ** p)
    if normalize:
        s /= a.size
    return float(m * s ** (1.0 / p))


def stochastic_probabilities(region):
    a = np.asarray(region, dtype=float)
    if np.any(a < 0):
        raise ValueError("stochastic pooling needs nonnegative activations")
    total = a.sum()
    if total == 0:
        return np.full(a.shape, 1.0 / a.size)
    return a / total


def pool_stochastic(region, generator=None, phase="train"):
    """Stochastic pooling of one region.

    Training draws a location from the activation-proportional multinomial and
    returns ``(value, index)``; the test phase returns the probability-weighted
    average and ``None``.
    """
    a = np.asarray(region, dtype=float)
    probs = stochastic_probabilities(a)
    if phase == "test":
        return float(np.sum(probs * a)) if a.sum() > 0 else 0.0, None
    u = generator.random()
    idx = min(int(np.searchsorted(np.cumsum(probs), u, side="right")), a.size - 1)
    return float(a[idx]), idx


# Layers ----------------------------------------------------------------------------

class Layer:
    has_params = False
    random = False

    def __init__(self, spec, in_shape):
        self.spec = spec
        self.id = spec.id
        self.in_shape = tuple(in_shape)
        self.out_shape = self.in_shape

    def param_shapes(self):
        return []

    def init_params(self, gen):
        return {}

    def describe(self):
        return self.spec.type


class Conv(Layer):
    has_params = True

    def __init__(self, spec, in_shape):
        super().__init__(spec, in_shape)
        F, T, C = in_shape
        self.kf, self.kt = spec.filter_size
        self.sf, self.st = spec.stride
        self.M = spec.feature_maps
        self.K = self.kf * self.kt * C
        Fo, To = (F - self.kf) // self.sf + 1, (T - self.kt) // self.st + 1
        self.out_shape = (Fo, To, self.M)
        if spec.sharing == "limited":
            from .spec import band_ownership
            self.owner = np.asarray(band_ownership(spec.bands, F, self.kf, self.sf))
            self.num_bands = len(spec.bands)
        else:
            self.owner = np.zeros(Fo, dtype=int)
            self.num_bands = 1

    def param_shapes(self):
        return [("W", (self.num_bands, self.K, self.M)), ("b", (self.num_bands, self.M))]

    def init_params(self, gen):
        W = gen.standard_normal((self.num_bands, self.K, self.M)) * np.sqrt(2.0 / self.K)
        return {"W": W, "b": np.zeros((self.num_bands, self.M))}

    def describe(self):
        share = "FWS" if self.spec.sharing == "full" else f"LWS x{self.num_bands}"
        return f"conv {self.spec.filter_size} stride {self.spec.stride} {share}"

    def _patches(self, x):
        N = x.shape[0]
        win = sliding_window_view(x, (self.kf, self.kt), axis=(1, 2))[:, ::self.sf, ::self.st]
        Fo, To = win.shape[1], win.shape[2]
        # (N, Fo, To, C, kf, kt) -> (Fo, N*To, K) with K ordered (kf, kt, c)
        return np.ascontiguousarray(win.transpose(1, 0, 2, 4, 5, 3)).reshape(Fo, N * To, self.K)

    def _apply(self, P, W, b, N):
        Fo, To, M = self.out_shape
        Y = np.matmul(P, W[self.owner])
        if b is not None:
            Y += b[self.owner][:, None, :]
        return np.ascontiguousarray(Y.reshape(Fo, N, To, M).transpose(1, 0, 2, 3))

    def forward(self, x, params, ctx):
        P = self._patches(x)
        return self._apply(P, params["W"], params["b"], x.shape[0]), (P, x.shape)

    def backward(self, dy, cache, params, need_dx=True):
        P, xshape = cache
        N = xshape[0]
        Fo, To, M = self.out_shape
        dY = np.ascontiguousarray(dy.transpose(1, 0, 2, 3)).reshape(Fo, N * To, M)
        dWpos = np.matmul(P.transpose(0, 2, 1), dY)
        dbpos = dY.sum(axis=1)
        dW = np.zeros((self.num_bands, self.K, self.M))
        db = np.zeros((self.num_bands, self.M))
        np.add.at(dW, self.owner, dWpos)
        np.add.at(db, self.owner, dbpos)
        dx = None
        if need_dx:
            W = params["W"][self.owner]
            dP = np.matmul(dY, W.transpose(0, 2, 1))
            C = xshape[3]
            dP = dP.reshape(Fo, N, To, self.kf, self.kt, C).transpose(1, 0, 2, 3, 4, 5)
            dx = np.zeros(xshape)
            for i in range(self.kf):
                fs = slice(i, i + self.sf * (Fo - 1) + 1, self.sf)
                for j in range(self.kt):
                    ts = slice(j, j + self.st * (To - 1) + 1, self.st)
                    dx[:, fs, ts, :] += dP[:, :, :, i, j, :]
        return dx, {"W": dW, "b": db}

    def rforward(self, rx, cache, params, vparams):
        P, xshape = cache
        N = xshape[0]
        ry = self._apply(P, vparams["W"], vparams["b"], N)
        if rx is not None:
            ry += self._apply(self._patches(rx), params["W"], None, N)
        return ry


class Pool(Layer):
    def __init__(self, spec, in_shape):
        super().__init__(spec, in_shape)
        self.axis = _AXIS[spec.axis]
        self.size, self.stride = spec.size, spec.stride
        shape = list(in_shape)
        shape[self.axis - 1] = (shape[self.axis - 1] - self.size) // self.stride + 1
        self.out_shape = tuple(shape)
        self.random = spec.kind == "stochastic"

    def describe(self):
        extra = f" p={self.spec.p_exponent:g}" if self.spec.kind == "lp" else ""
        return f"pool {self.spec.kind}{extra} size {self.size} stride {self.stride} ({self.spec.axis})"

    def _windows(self, x):
        win = sliding_window_view(x, self.size, axis=self.axis)
        sl = [slice(None)] * 4
        sl[self.axis] = slice(None, None, self.stride)
        return win[tuple(sl)]  # (N, F', T, C, size) or (N, F, T', C, size)

    def _scatter(self, contrib, xshape):
        dx = np.zeros(xshape)
        n_out = contrib.shape[self.axis]
        for k in range(self.size):
            sl = [slice(None)] * 4
            sl[self.axis] = slice(k, k + self.stride * (n_out - 1) + 1, self.stride)
            dx[tuple(sl)] += contrib[..., k]
        return dx

    def _jacobian(self, win, y):
        """d y / d window entries for the smooth pooling kinds."""
        spec = self.spec
        if spec.kind == "lp":
            p = spec.p_exponent
            a = np.abs(win) if spec.absolute else win
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(y[..., None] > 0, a / y[..., None], 0.0)
            if p == 1.0:
                J = np.where(y[..., None] > 0, 1.0, 1.0 if not spec.absolute else 0.0) * np.ones_like(win)
            else:
                J = ratio ** (p - 1.0)
            if spec.absolute:
                J = J * np.sign(win)
            if spec.normalize:
                J = J / self.size
            return J
        # stochastic, test phase: y = sum a^2 / sum a
        s1 = win.sum(axis=-1, keepdims=True)
        s2 = (win * win).sum(axis=-1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(s1 > 0, (2.0 * win * s1 - s2) / (s1 * s1), 0.0)

    def forward(self, x, params, ctx):
        spec = self.spec
        win = self._windows(x)
        training = ctx is not None and ctx.training
        if spec.kind == "max":
            idx = np.argmax(win, axis=-1)
            y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
            return y, ("index", idx, x.shape)
        if spec.kind == "lp":
            if not spec.absolute and np.any(win < 0):
                raise ValueError(f"{self.id}: lp pooling needs nonnegative inputs (enable absolute)")
            a = np.abs(win) if spec.absolute else win
            m = a.max(axis=-1)
            safe = np.where(m > 0, m, 1.0)
            s = np.sum((a / safe[..., None]) ** spec.p_exponent, axis=-1)
            if spec.normalize:
                s = s / self.size
            y = np.where(m > 0, m * s ** (1.0 / spec.p_exponent), 0.0)
            return y, ("smooth", win, y, x.shape)
        if np.any(win < 0):
            raise ValueError(f"{self.id}: stochastic pooling needs nonnegative inputs")
        total = win.sum(axis=-1)
        if not training:
            with np.errstate(divide="ignore", invalid="ignore"):
                y = np.where(total > 0, (win * win).sum(axis=-1) / total, 0.0)
            return y, ("smooth", win, y, x.shape)
        probs = np.where(total[..., None] > 0, win / np.where(total > 0, total, 1.0)[..., None], 1.0 / self.size)
        N = x.shape[0]
        u = ctx.uniforms(self.id, int(np.prod(total.shape[1:]))).reshape(total.shape)
        cdf = np.cumsum(probs, axis=-1)
        idx = np.minimum((cdf <= u[..., None]).sum(axis=-1), self.size - 1)
        y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return y, ("index", idx, x.shape)

    def backward(self, dy, cache, params, need_dx=True):
        if not need_dx:
            return None, {}
        if cache[0] == "index":
            _, idx, xshape = cache
            onehot = np.arange(self.size) == idx[..., None]
            return self._scatter(dy[..., None] * onehot, xshape), {}
        _, win, y, xshape = cache
        return self._scatter(dy[..., None] * self._jacobian(win, y), xshape), {}

    def rforward(self, rx, cache, params, vparams):
        if rx is None:
            shape = cache[1].shape if cache[0] == "index" else cache[2].shape
            return np.zeros(shape)
        rwin = self._windows(rx)
        if cache[0] == "index":
            return np.take_along_axis(rwin, cache[1][..., None], axis=-1)[..., 0]
        _, win, y, _ = cache
        return np.sum(self._jacobian(win, y) * rwin, axis=-1)


class Full(Layer):
    has_params = True

    def __init__(self, spec, in_shape):
        super().__init__(spec, in_shape)
        self.D = int(np.prod(in_shape))
        self.out_shape = (spec.units,)

    def param_shapes(self):
        return [("W", (self.D, self.spec.units)), ("b", (self.spec.units,))]

    def init_params(self, gen):
        return {"W": gen.standard_normal((self.D, self.spec.units)) * np.sqrt(2.0 / self.D),
                "b": np.zeros(self.spec.units)}

    def describe(self):
        return f"full {self.D} -> {self.spec.units}"

    def forward(self, x, params, ctx):
        x2 = x.reshape(x.shape[0], -1)
        return x2 @ params["W"] + params["b"], (x2, x.shape)

    def backward(self, dy, cache, params, need_dx=True):
        x2, xshape = cache
        grads = {"W": x2.T @ dy, "b": dy.sum(axis=0)}
        dx = (dy @ params["W"].T).reshape(xshape) if need_dx else None
        return dx, grads

    def rforward(self, rx, cache, params, vparams):
        x2, _ = cache
        ry = x2 @ vparams["W"] + vparams["b"]
        if rx is not None:
            ry += rx.reshape(rx.shape[0], -1) @ params["W"]
        return ry


class Activation(Layer):
    def describe(self):
        return self.spec.kind

    def forward(self, x, params, ctx):
        if self.spec.kind == "relu":
            y = np.maximum(x, 0.0)
            return y, x > 0
        y = 0.5 * (1.0 + np.tanh(0.5 * x))
        return y, y * (1.0 - y)

    def backward(self, dy, cache, params, need_dx=True):
        return (dy * cache if need_dx else None), {}

    def rforward(self, rx, cache, params, vparams):
        return None if rx is None else rx * cache


class Dropout(Layer):
    random = True

    def __init__(self, spec, in_shape, p=None):
        super().__init__(spec, in_shape)
        self.p = spec.p if p is None else p
        self.width = int(np.prod(in_shape))

    def describe(self):
        return f"dropout p={self.p:g}"

    def forward(self, x, params, ctx):
        if ctx is None or not ctx.training or self.p == 0.0:
            return x, None
        keep = ctx.uniforms(self.id, self.width).reshape(x.shape) < (1.0 - self.p)
        scale = keep * (1.0 / (1.0 - self.p))
        return x * scale, scale

    def backward(self, dy, cache, params, need_dx=True):
        return (dy if cache is None else dy * cache), {}

    def rforward(self, rx, cache, params, vparams):
        if rx is None or cache is None:
            return rx
        return rx * cache


LAYER_CLASSES = {"conv": Conv, "pool": Pool, "full": Full, "activation": Activation, "dropout": Dropout}


def make_layer(spec, in_shape, **kwargs):
    return LAYER_CLASSES[spec.type](spec, in_shape, **kwargs)
