"""Network assembly, flat parameter vectors and the three passes.

``Network`` turns a :class:`NetworkSpec` into layer objects and a
:class:`ParameterLayout`. All public passes take a flat parameter vector and
return sums over the batch (not means), so gradients and curvature products
of disjoint batches can simply be added.
"""

import hashlib
import json

import numpy as np

from .. import rng
from .layers import Full, make_layer
from .spec import FullSpec, NetworkSpec, validate_network_spec


class ParameterLayout:
    """Offset table for a flat parameter vector."""

    def __init__(self, entries):
        self.entries = []
        offset = 0
        for layer_id, name, shape in entries:
            size = int(np.prod(shape))
            self.entries.append((layer_id, name, tuple(shape), offset, size))
            offset += size
        self.size = offset

    def unflatten(self, vector):
        """Dict of per-layer dicts of *views* into ``vector``."""
        vector = np.asarray(vector)
        if vector.shape != (self.size,):
            raise ValueError(f"parameter vector has shape {vector.shape}, layout expects ({self.size},)")
        out = {}
        for layer_id, name, shape, offset, size in self.entries:
            out.setdefault(layer_id, {})[name] = vector[offset:offset + size].reshape(shape)
        return out

    def flatten(self, tree):
        vector = np.zeros(self.size)
        for layer_id, name, shape, offset, size in self.entries:
            part = tree.get(layer_id, {}).get(name)
            if part is not None:
                vector[offset:offset + size] = np.asarray(part).reshape(-1)
        return vector

    def to_list(self):
        return [[layer_id, name, list(shape), offset, size] for layer_id, name, shape, offset, size in self.entries]

    def layer_sizes(self):
        sizes = {}
        for layer_id, _, _, _, size in self.entries:
            sizes[layer_id] = sizes.get(layer_id, 0) + size
        return sizes


class SoftmaxCrossEntropy:
    """Summed frame cross-entropy; targets are class indices."""

    name = "cross_entropy"

    @staticmethod
    def outputs(z):
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def value(self, z, targets):
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return float(-logp[np.arange(z.shape[0]), targets].sum())

    def gradient(self, z, targets):
        g = self.outputs(z)
        g[np.arange(z.shape[0]), targets] -= 1.0
        return g

    def hessian_product(self, z, targets, rz):
        p = self.outputs(z)
        return p * rz - p * np.sum(p * rz, axis=1, keepdims=True)


class SquaredError:
    """``1/2 ||z - t||^2`` summed over the batch; used for linear rigs."""

    name = "squared_error"

    @staticmethod
    def outputs(z):
        return z

    def value(self, z, targets):
        return float(0.5 * np.sum((z - targets) ** 2))

    def gradient(self, z, targets):
        return z - targets

    def hessian_product(self, z, targets, rz):
        return rz


CROSS_ENTROPY = SoftmaxCrossEntropy()


class Trace:
    def __init__(self):
        self.caches = {}
        self.stream_shapes = []
        self.logits = None


class Network:
    def __init__(self, spec: NetworkSpec, dropout_probabilities=None):
        validate_network_spec(spec)
        self.spec = spec
        probs = dropout_probabilities or {}
        F, T, C = spec.input_shape
        self.local_rows = F - spec.nonlocal_rows
        self.streams = []
        self.crop = []
        merge_dim = 0
        for stream in spec.streams:
            has_conv = any(l.type == "conv" for l in stream)
            crop = has_conv and not spec.nonlocal_to_conv and spec.nonlocal_rows > 0
            shape = (self.local_rows, T, C) if crop else (F, T, C)
            layers = []
            for lspec in stream:
                extra = {"p": probs[lspec.id]} if lspec.type == "dropout" and lspec.id in probs else {}
                layer = make_layer(lspec, shape, **extra)
                layers.append(layer)
                shape = layer.out_shape
            self.streams.append(layers)
            self.crop.append(crop)
            merge_dim += int(np.prod(shape))
        self.passthrough = any(self.crop)
        if self.passthrough:
            merge_dim += spec.nonlocal_rows * T * C
        self.merge_dim = merge_dim
        shape = (merge_dim,)
        self.trunk = []
        for lspec in spec.trunk:
            extra = {"p": probs[lspec.id]} if lspec.type == "dropout" and lspec.id in probs else {}
            layer = make_layer(lspec, shape, **extra)
            self.trunk.append(layer)
            shape = layer.out_shape
        self.output = Full(FullSpec(spec.num_classes, id="output"), shape)
        self.trunk.append(self.output)
        self.layers = [l for s in self.streams for l in s] + self.trunk
        self.layout = ParameterLayout(
            [(l.id, name, shape) for l in self.layers for name, shape in l.param_shapes()])
        self.random_layer_ids = [l.id for l in self.layers if l.random]

    @property
    def num_params(self):
        return self.layout.size

    def init_params(self, seed=0):
        tree = {l.id: l.init_params(rng.generator(seed, "init", l.id)) for l in self.layers if l.has_params}
        return self.layout.flatten(tree)

    def describe(self):
        """Per-layer output shapes and parameter counts."""
        sizes = self.layout.layer_sizes()
        rows = [("input", "", tuple(self.spec.input_shape), 0)]
        for i, stream in enumerate(self.streams):
            for l in stream:
                rows.append((l.id, f"[s{i}] {l.describe()}", l.out_shape, sizes.get(l.id, 0)))
        rows.append(("merge", "concat", (self.merge_dim,), 0))
        for l in self.trunk:
            rows.append((l.id, l.describe(), l.out_shape, sizes.get(l.id, 0)))
        lines = [f"{'layer':<10} {'kind':<44} {'output':<16} {'params':>10}"]
        for lid, kind, shape, n in rows:
            lines.append(f"{lid:<10} {kind:<44} {'x'.join(str(s) for s in shape):<16} {n:>10}")
        lines.append(f"total parameters: {self.num_params}")
        return "\n".join(lines)

    # passes --------------------------------------------------------------------

    def _check_input(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 3:
            x = x[None]
        if x.shape[1:] != tuple(self.spec.input_shape):
            raise ValueError(f"input: expected examples of shape {tuple(self.spec.input_shape)}, got {x.shape[1:]}")
        return x

    def _forward(self, P, x, ctx):
        x = self._check_input(x)
        N = x.shape[0]
        trace = Trace()
        outs = []
        for layers, crop in zip(self.streams, self.crop):
            h = x[:, :self.local_rows] if crop else x
            for l in layers:
                try:
                    h, trace.caches[l.id] = l.forward(h, P.get(l.id), ctx)
                except ValueError as exc:
                    raise ValueError(f"layer {l.id}: {exc}") from exc
            trace.stream_shapes.append(h.shape)
            outs.append(h.reshape(N, -1))
        if self.passthrough:
            outs.append(x[:, self.local_rows:].reshape(N, -1))
        h = np.concatenate(outs, axis=1) if len(outs) > 1 else outs[0]
        for l in self.trunk:
            try:
                h, trace.caches[l.id] = l.forward(h, P.get(l.id), ctx)
            except ValueError as exc:
                raise ValueError(f"layer {l.id}: {exc}") from exc
        trace.logits = h
        return trace

    def _backward(self, P, trace, dz):
        grads = {}
        d = dz
        for l in reversed(self.trunk):
            d, grads[l.id] = l.backward(d, trace.caches[l.id], P.get(l.id), True)
        offset = 0
        for layers, shape in zip(self.streams, trace.stream_shapes):
            width = int(np.prod(shape[1:]))
            ds = d[:, offset:offset + width].reshape(shape)
            offset += width
            for k in range(len(layers) - 1, -1, -1):
                l = layers[k]
                ds, grads[l.id] = l.backward(ds, trace.caches[l.id], P.get(l.id), k > 0)
        return self.layout.flatten(grads)

    def _rforward(self, P, V, trace):
        N = trace.logits.shape[0]
        outs = []
        for layers, shape in zip(self.streams, trace.stream_shapes):
            r = None
            for l in layers:
                r = l.rforward(r, trace.caches[l.id], P.get(l.id), V.get(l.id))
            outs.append(np.zeros((N, int(np.prod(shape[1:])))) if r is None else r.reshape(N, -1))
        if self.passthrough:
            outs.append(np.zeros((N, self.spec.nonlocal_rows * int(np.prod(self.spec.input_shape[1:])))))
        r = np.concatenate(outs, axis=1) if len(outs) > 1 else outs[0]
        for l in self.trunk:
            r = l.rforward(r, trace.caches[l.id], P.get(l.id), V.get(l.id))
        return r

    def logits(self, params, x, ctx=None):
        return self._forward(self.layout.unflatten(params), x, ctx).logits

    def forward(self, params, x, ctx=None, loss=CROSS_ENTROPY):
        """Output posteriors (softmax for cross-entropy)."""
        return loss.outputs(self.logits(params, x, ctx))

    def loss(self, params, x, targets, ctx=None, loss=CROSS_ENTROPY):
        return loss.value(self.logits(params, x, ctx), targets)

    def loss_and_gradient(self, params, x, targets, ctx=None, loss=CROSS_ENTROPY):
        P = self.layout.unflatten(params)
        trace = self._forward(P, x, ctx)
        return loss.value(trace.logits, targets), self._backward(P, trace, loss.gradient(trace.logits, targets))

    def gradient(self, params, x, targets, ctx=None, loss=CROSS_ENTROPY):
        return self.loss_and_gradient(params, x, targets, ctx, loss)[1]

    def gauss_newton_product(self, params, v, x, targets=None, ctx=None, loss=CROSS_ENTROPY, trace=None):
        """``J^T H J v`` summed over the batch (undamped).

        ``trace`` from :meth:`forward_trace` with the same params, inputs and
        context skips the forward pass.
        """
        P = self.layout.unflatten(params)
        V = self.layout.unflatten(np.asarray(v, dtype=float))
        if trace is None:
            trace = self._forward(P, x, ctx)
        rz = self._rforward(P, V, trace)
        return self._backward(P, trace, loss.hessian_product(trace.logits, targets, rz))

    def forward_trace(self, params, x, ctx=None):
        """Forward pass state, reusable across curvature products at fixed params."""
        return self._forward(self.layout.unflatten(params), x, ctx)

    def jacobian_vector_product(self, params, v, x, ctx=None):
        """Directional derivative of the logits along ``v``."""
        P = self.layout.unflatten(params)
        trace = self._forward(P, x, ctx)
        return self._rforward(P, self.layout.unflatten(np.asarray(v, dtype=float)), trace)


# functional surface -----------------------------------------------------------------

def forward(net, params, example, dropout_context=None):
    return net.forward(params, example, dropout_context)


def backward(net, params, example, targets, dropout_context=None, loss=CROSS_ENTROPY):
    return net.gradient(params, example, targets, dropout_context, loss)


def gauss_newton_product(net, params, v, batch, targets=None, dropout_contexts=None, loss=CROSS_ENTROPY,
                         expected_signature=None):
    """Sum of ``J^T H J v`` over one or more batches.

    ``batch`` is one input array or a list of them (with matching
    ``targets``/``dropout_contexts`` lists). If ``expected_signature`` is
    given, every context must carry it: the curvature must be evaluated with
    the same masks as the gradient.
    """
    from .dropout import DropoutMismatchError

    if not isinstance(batch, (list, tuple)):
        batch, targets, dropout_contexts = [batch], [targets], [dropout_contexts]
    targets = targets if targets is not None else [None] * len(batch)
    dropout_contexts = dropout_contexts if dropout_contexts is not None else [None] * len(batch)
    total = np.zeros(net.num_params)
    for x, t, ctx in zip(batch, targets, dropout_contexts):
        if expected_signature is not None:
            sig = None if ctx is None else ctx.signature
            if sig != expected_signature:
                raise DropoutMismatchError(
                    f"curvature context {sig!r} differs from gradient context {expected_signature!r}")
        total += net.gauss_newton_product(params, v, x, t, ctx, loss)
    return total


# serialization ---------------------------------------------------------------------

def params_checksum(params):
    return hashlib.sha256(np.ascontiguousarray(params, dtype="<f8").tobytes()).hexdigest()


def save_params(path, net, params, extra=None):
    """``.npz`` with the flat vector, the offset table, the topology and a checksum."""
    meta = {"layout": net.layout.to_list(), "spec": net.spec.to_dict(),
            "checksum": params_checksum(params), "extra": extra or {}}
    with open(path, "wb") as fh:
        np.savez(fh, params=np.asarray(params, dtype="<f8"), meta=np.frombuffer(json.dumps(meta).encode(), np.uint8))


def load_params(path):
    """Return ``(network, params, extra)``; raises if the checksum does not match."""
    with np.load(path) as data:
        params = data["params"].astype(float)
        meta = json.loads(bytes(data["meta"]).decode())
    if params_checksum(params) != meta["checksum"]:
        raise ValueError(f"{path}: parameter checksum mismatch")
    net = Network(NetworkSpec.from_dict(meta["spec"]))
    if net.layout.to_list() != meta["layout"]:
        raise ValueError(f"{path}: offset table does not match the stored topology")
    return net, params, meta["extra"]
