"""Topology descriptions and their structural validation.

A network is one or more *streams* that read the same input, a concatenating
merge, and a *trunk* of fully connected layers ending in a softmax output.
The ordinary CNN is a single stream; the multi-scale CNN/DNN has a conv
stream and a fully connected stream.
"""

import dataclasses
from dataclasses import dataclass, field
from typing import List, Optional, Tuple


class ConfigError(ValueError):
    """Structural problem in a topology or experiment config.

    ``problems`` is a list of ``(field_path, message)`` pairs.
    """

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(f"{path}: {msg}" for path, msg in self.problems))


@dataclass
class ConvLayerSpec:
    feature_maps: int
    filter_size: Tuple[int, int]  # (freq, time)
    stride: Tuple[int, int] = (1, 1)
    sharing: str = "full"  # "full" | "limited"
    bands: Optional[List[Tuple[int, int]]] = None  # (start_freq_index, width) in input rows
    num_bands: int = 2  # used to build a default layout when sharing == "limited" and bands is None
    id: str = ""
    type: str = field(default="conv", init=False)


@dataclass
class PoolingSpec:
    kind: str = "max"  # "max" | "lp" | "stochastic"
    size: int = 3
    stride: int = 3
    axis: str = "frequency"  # "frequency" | "time"
    p_exponent: float = 2.0
    normalize: bool = False  # lp: use the mean of a^p instead of the sum
    absolute: bool = False  # lp: pool |a| so negative inputs are allowed
    id: str = ""
    type: str = field(default="pool", init=False)


@dataclass
class FullSpec:
    units: int
    id: str = ""
    type: str = field(default="full", init=False)


@dataclass
class ActivationSpec:
    kind: str = "relu"  # "relu" | "sigmoid"
    id: str = ""
    type: str = field(default="activation", init=False)


@dataclass
class DropoutSpec:
    p: float = 0.5
    id: str = ""
    type: str = field(default="dropout", init=False)


LAYER_TYPES = {
    "conv": ConvLayerSpec,
    "pool": PoolingSpec,
    "full": FullSpec,
    "activation": ActivationSpec,
    "dropout": DropoutSpec,
}


@dataclass
class NetworkSpec:
    input_shape: Tuple[int, int, int]  # (freq, time, channels)
    num_classes: int
    streams: List[list]
    trunk: list = field(default_factory=list)
    nonlocal_rows: int = 0  # trailing frequency rows without locality (energy)
    nonlocal_to_conv: bool = False

    def to_dict(self):
        def layer(l):
            d = dataclasses.asdict(l)
            return {"type": d.pop("type"), **d}
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "streams": [[layer(l) for l in s] for s in self.streams],
            "trunk": [layer(l) for l in self.trunk],
            "nonlocal_rows": self.nonlocal_rows,
            "nonlocal_to_conv": self.nonlocal_to_conv,
        }

    @classmethod
    def from_dict(cls, d):
        problems = []

        def layer(item, path):
            item = dict(item)
            kind = item.pop("type", None)
            if kind not in LAYER_TYPES:
                problems.append((f"{path}.type", f"unknown layer type {kind!r}"))
                return None
            for key in ("filter_size", "stride"):
                if key in item and isinstance(item[key], list):
                    item[key] = tuple(item[key])
            if item.get("bands") is not None:
                item["bands"] = [tuple(b) for b in item["bands"]]
            try:
                return LAYER_TYPES[kind](**item)
            except TypeError as exc:
                problems.append((path, str(exc)))
                return None

        streams = [[layer(l, f"streams[{i}][{j}]") for j, l in enumerate(s)]
                   for i, s in enumerate(d.get("streams", []))]
        trunk = [layer(l, f"trunk[{j}]") for j, l in enumerate(d.get("trunk", []))]
        if problems:
            raise ConfigError(problems)
        spec = cls(tuple(d["input_shape"]), int(d["num_classes"]), streams, trunk,
                   int(d.get("nonlocal_rows", 0)), bool(d.get("nonlocal_to_conv", False)))
        validate_network_spec(spec)
        return spec

    def all_layers(self):
        for s in self.streams:
            yield from s
        yield from self.trunk


def default_bands(freq_extent, filter_freq, stride_freq, num_bands):
    """Split the conv output positions into ``num_bands`` contiguous bands.

    Returns ``(start, width)`` pairs in input rows such that the band outputs
    tile the full-sharing output positions exactly.
    """
    n_out = (freq_extent - filter_freq) // stride_freq + 1
    if num_bands < 1 or num_bands > n_out:
        raise ConfigError([("bands", f"cannot split {n_out} output positions into {num_bands} bands")])
    cuts = [round(i * n_out / num_bands) for i in range(num_bands + 1)]
    return [(a * stride_freq, (b - a - 1) * stride_freq + filter_freq) for a, b in zip(cuts, cuts[1:])]


def band_ownership(bands, freq_extent, filter_freq, stride_freq):
    """Map every conv output position to its band; raise on gaps or overlaps."""
    n_out = (freq_extent - filter_freq) // stride_freq + 1
    owner = [None] * n_out
    problems = []
    for k, (start, width) in enumerate(bands):
        if start % stride_freq:
            problems.append((f"bands[{k}]", f"start {start} is not a multiple of the stride {stride_freq}"))
            continue
        if width < filter_freq or start < 0 or start + width > freq_extent:
            problems.append((f"bands[{k}]", f"band ({start}, {width}) does not fit a filter of {filter_freq} "
                                            f"inside {freq_extent} rows"))
            continue
        first = start // stride_freq
        for j in range((width - filter_freq) // stride_freq + 1):
            pos = first + j
            if owner[pos] is not None:
                problems.append((f"bands[{k}]", f"output position {pos} already owned by band {owner[pos]}"))
            else:
                owner[pos] = k
    gaps = [i for i, o in enumerate(owner) if o is None]
    if gaps and not problems:
        problems.append(("bands", f"output positions {gaps} not covered by any band (frequency gap)"))
    if problems:
        raise ConfigError(problems)
    return owner


def validate_network_spec(spec):
    """Check shapes, strides, band coverage and pooling rules without building anything.

    Also assigns layer ids (``conv1``, ``pool1``, ``full1``, ...) where they are
    missing and fills in default LWS band layouts. Returns ``spec``.
    """
    problems = []
    counters = {}
    seen = set()

    def assign(l):
        prefix = {"activation": "act"}.get(l.type, l.type)
        counters[prefix] = counters.get(prefix, 0) + 1
        if not l.id:
            l.id = f"{prefix}{counters[prefix]}"
        if l.id in seen or l.id == "output":
            problems.append((l.id, "duplicate layer id"))
        seen.add(l.id)

    if len(spec.input_shape) != 3 or min(spec.input_shape) < 1:
        problems.append(("input_shape", f"expected (freq, time, channels) >= 1, got {spec.input_shape}"))
        raise ConfigError(problems)
    if spec.num_classes < 2:
        problems.append(("num_classes", "need at least 2 classes"))
    if not spec.streams:
        problems.append(("streams", "at least one stream is required"))
    if not 0 <= spec.nonlocal_rows < spec.input_shape[0]:
        problems.append(("nonlocal_rows", "must be in [0, freq)"))

    for l in spec.all_layers():
        assign(l)

    for i, stream in enumerate(spec.streams):
        F, T, C = spec.input_shape
        has_conv = any(l.type == "conv" for l in stream)
        if has_conv and not spec.nonlocal_to_conv:
            F -= spec.nonlocal_rows
        flat = False
        for j, l in enumerate(stream):
            path = f"streams[{i}][{j}]({l.id})"
            if l.type == "conv":
                if flat:
                    problems.append((path, "convolution after a fully connected layer"))
                    break
                kf, kt = l.filter_size
                sf, st = l.stride
                if l.feature_maps < 1:
                    problems.append((path + ".feature_maps", "must be >= 1"))
                if min(sf, st) < 1:
                    problems.append((path + ".stride", "must be >= 1"))
                    break
                if kf > F or kt > T or min(kf, kt) < 1:
                    problems.append((path + ".filter_size", f"filter {l.filter_size} does not fit input {F}x{T}"))
                    break
                if l.sharing == "limited":
                    try:
                        if l.bands is None:
                            l.bands = default_bands(F, kf, sf, l.num_bands)
                        band_ownership(l.bands, F, kf, sf)
                    except ConfigError as exc:
                        problems.extend((f"{path}.{p}", m) for p, m in exc.problems)
                elif l.sharing == "full":
                    if l.bands:
                        problems.append((path + ".bands", "full weight sharing takes no bands"))
                else:
                    problems.append((path + ".sharing", f"unknown sharing {l.sharing!r}"))
                F, T, C = (F - kf) // sf + 1, (T - kt) // st + 1, l.feature_maps
            elif l.type == "pool":
                problems.extend(_pool_problems(l, path))
                if flat:
                    problems.append((path, "pooling after a fully connected layer"))
                    break
                extent = F if l.axis == "frequency" else T
                if l.size > extent:
                    problems.append((path + ".size", f"pool size {l.size} exceeds extent {extent}"))
                    break
                n = (extent - l.size) // max(l.stride, 1) + 1
                if l.axis == "frequency":
                    F = n
                else:
                    T = n
            elif l.type == "full":
                if l.units < 1:
                    problems.append((path + ".units", "must be >= 1"))
                flat = True
            elif l.type == "activation":
                if l.kind not in ("relu", "sigmoid"):
                    problems.append((path + ".kind", f"unknown activation {l.kind!r}"))
            elif l.type == "dropout":
                if not 0.0 <= l.p < 1.0:
                    problems.append((path + ".p", "dropout probability must be in [0, 1)"))
    for j, l in enumerate(spec.trunk):
        path = f"trunk[{j}]({l.id})"
        if l.type in ("conv", "pool"):
            problems.append((path, f"{l.type} layers are not allowed after the merge"))
        elif l.type == "full" and l.units < 1:
            problems.append((path + ".units", "must be >= 1"))
        elif l.type == "dropout" and not 0.0 <= l.p < 1.0:
            problems.append((path + ".p", "dropout probability must be in [0, 1)"))
        elif l.type == "activation" and l.kind not in ("relu", "sigmoid"):
            problems.append((path + ".kind", f"unknown activation {l.kind!r}"))
    if problems:
        raise ConfigError(problems)
    return spec


def _pool_problems(l, path):
    problems = []
    if l.kind not in ("max", "lp", "stochastic"):
        problems.append((path + ".kind", f"unknown pooling kind {l.kind!r}"))
    if l.axis not in ("frequency", "time"):
        problems.append((path + ".axis", f"unknown axis {l.axis!r}"))
    if l.size < 1:
        problems.append((path + ".size", "must be >= 1"))
    if not 1 <= l.stride <= l.size:
        problems.append((path + ".stride", "must satisfy 1 <= stride <= size"))
    if l.kind == "lp" and l.p_exponent < 1:
        problems.append((path + ".p_exponent", "must be >= 1"))
    if l.axis == "time" and l.stride >= l.size:
        problems.append((path + ".stride", "pooling in time requires overlapping windows (stride < size); "
                                           "non-overlapping time pooling is plain subsampling"))
    return problems


def conv_stream(maps=(128, 256), filters=((9, 9), (4, 3)), pool=None, sharing="full", activation="relu"):
    """Layer list for a conv stream: conv -> act -> [pool] for each conv layer.

    ``pool`` is a :class:`PoolingSpec` inserted after the first conv layer
    only (defaults to max pooling of size 3 in frequency).
    """
    pool = PoolingSpec("max", 3, 3, "frequency") if pool is None else pool
    layers = []
    for i, (m, f) in enumerate(zip(maps, filters)):
        layers.append(ConvLayerSpec(m, tuple(f), sharing=sharing))
        layers.append(ActivationSpec(activation))
        if i == 0 and pool is not False:
            layers.append(dataclasses.replace(pool))
    return layers


def full_stack(widths, activation="relu", dropout=None):
    """Fully connected layers; ``dropout`` maps a 1-based full-layer index to p."""
    dropout = dropout or {}
    layers = []
    for i, w in enumerate(widths, start=1):
        layers.append(FullSpec(w))
        layers.append(ActivationSpec(activation))
        if dropout.get(i, 0.0) > 0.0:
            layers.append(DropoutSpec(dropout[i]))
    return layers


def default_cnn(input_shape=(40, 11, 3), num_classes=10, hidden=1024, maps=(128, 256),
                filters=((9, 9), (4, 3)), dropout=None, activation="relu"):
    """Two conv layers (pool 3 in frequency after the first) and four full layers."""
    spec = NetworkSpec(tuple(input_shape), num_classes,
                       [conv_stream(maps, filters, activation=activation)],
                       full_stack([hidden] * 4, activation, dropout))
    return validate_network_spec(spec)


def build_multiscale(input_shape, num_classes, conv_layers=None, dnn_widths=(1024, 1024),
                     trunk_widths=(1024,) * 4, activation="relu", dropout=None):
    """Concatenate a conv stream and a fully connected stream before shared full layers.

    With ``dnn_widths`` empty this reduces to the ordinary CNN topology.
    """
    conv_layers = conv_stream(activation=activation) if conv_layers is None else conv_layers
    streams = [list(conv_layers)]
    if dnn_widths:
        streams.append(full_stack(dnn_widths, activation))
    spec = NetworkSpec(tuple(input_shape), num_classes, streams,
                       full_stack(trunk_widths, activation, dropout))
    return validate_network_spec(spec)
