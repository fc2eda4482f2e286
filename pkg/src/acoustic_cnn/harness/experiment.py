"""Experiment configs, end-to-end runs and evaluation.

A config is a JSON-compatible dict with the blocks ``corpus``, ``features``,
``network``, ``optimizer`` plus ``name``, ``seed`` and ``eval_split``. The
resolved config (all defaults filled in) is hashed; the hash names the run
directory and is stamped into every artifact.
"""

import copy
import csv
import hashlib
import io
import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from ..data import FrameData
from ..network.model import Network, save_params
from ..network.spec import (ActivationSpec, ConfigError, ConvLayerSpec, DropoutSpec, FullSpec, NetworkSpec,
                            PoolingSpec, validate_network_spec)
from ..optim.hf import HF_DROPOUT_MODES, HFState, hf_iteration
from ..optim.sgd import SGDSchedule, mean_loss, sgd_train
from .corpus import CorpusSpec, generate_corpus
from .pipeline import FeatureOptions, FeaturePipeline

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "ACOUSTIC_CNN_RUNS"
SERIES_HEADER = ("iteration", "loss", "heldout_loss", "lambda", "cg_iters")
OPTIMIZERS = ("sgd", "hf", "sgd+hf")
NETWORK_BUILDERS = ("cnn", "dnn", "multiscale", "spec")


class ExperimentError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, cause):
        super().__init__(f"stage {stage}: {cause}")
        self.stage = stage
        self.cause = cause


# defaults ------------------------------------------------------------------------

DEFAULT_NETWORK = {
    "builder": "cnn",
    "conv": [
        {"maps": 16, "filter": [8, 5], "pool": {"kind": "max", "size": 3, "stride": 3, "axis": "frequency"}},
        {"maps": 16, "filter": [4, 3]},
    ],
    "dnn_widths": [],
    "hidden": [64, 64, 64, 64],
    "activation": "relu",
    "dropout": {"3": 0.5, "4": 0.5},  # keys count fully connected hidden layers from 1
    "energy_to_conv": False,
}

DEFAULT_SGD = {"initial_rate": 0.05, "anneal_factor": 2.0, "patience": 1e-3, "max_anneals": 5,
               "minibatch_size": 128, "max_epochs": 20, "momentum": 0.0}
DEFAULT_HF = {"iterations": 5, "lam": 1.0, "cg_tolerance": 5e-4, "cg_max_iters": 50,
              "dropout_mode": "fixed_per_utterance", "curvature_fraction": 0.25}


def default_config(name="experiment"):
    return {
        "name": name,
        "seed": 0,
        "eval_split": "heldout",
        "corpus": CorpusSpec().to_dict(),
        "features": FeatureOptions().to_dict(),
        "network": copy.deepcopy(DEFAULT_NETWORK),
        "optimizer": {"kind": "sgd", "sgd": dict(DEFAULT_SGD), "hf": dict(DEFAULT_HF), "anneals_before_hf": 2},
    }


def _merge(base, override, path, problems):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            problems.append((f"{path}{key}", "unknown field"))
        elif isinstance(base[key], dict) and isinstance(value, dict) and key not in ("dropout",):
            out[key] = _merge(base[key], value, f"{path}{key}.", problems)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_config(config):
    """Fill defaults and validate everything that can be checked without data.

    Raises :class:`ConfigError` listing every problem with its field path.
    Returns the resolved config; nothing is written.
    """
    problems = []
    if not isinstance(config, dict):
        raise ConfigError([("", "config must be a mapping")])
    network = config.get("network", {})
    base = default_config()
    if isinstance(network, dict) and network.get("builder") == "spec":
        base["network"] = {"builder": "spec", "spec": None}
    resolved = _merge(base, config, "", problems)
    if not isinstance(resolved["name"], str) or not resolved["name"]:
        problems.append(("name", "must be a non-empty string"))
    if not isinstance(resolved["seed"], int) or isinstance(resolved["seed"], bool) or resolved["seed"] < 0:
        problems.append(("seed", "must be a non-negative integer"))
    if resolved["eval_split"] not in ("heldout", "test"):
        problems.append(("eval_split", "must be 'heldout' or 'test'"))
    corpus = CorpusSpec(**resolved["corpus"])
    problems.extend((f"corpus.{p}", m) for p, m in corpus.problems())
    features = FeatureOptions(**resolved["features"])
    problems.extend((f"features.{p}", m) for p, m in features.problems(corpus.representation))
    if corpus.representation == "spectra" and features.adapt and corpus.spectral_dim < 2:
        problems.append(("corpus.spectral_dim", "adaptation needs at least 2 dimensions"))
    opt = resolved["optimizer"]
    if opt["kind"] not in OPTIMIZERS:
        problems.append(("optimizer.kind", f"must be one of {OPTIMIZERS}"))
    try:
        SGDSchedule(**opt["sgd"])
    except (TypeError, ValueError) as exc:
        problems.append(("optimizer.sgd", str(exc)))
    hf = opt["hf"]
    if hf["dropout_mode"] not in HF_DROPOUT_MODES:
        problems.append(("optimizer.hf.dropout_mode", f"must be one of {HF_DROPOUT_MODES}"))
    if hf["iterations"] < 0:
        problems.append(("optimizer.hf.iterations", "must be >= 0"))
    if hf["lam"] < 0:
        problems.append(("optimizer.hf.lam", "must be >= 0"))
    if not 0.0 < hf["curvature_fraction"] <= 1.0:
        problems.append(("optimizer.hf.curvature_fraction", "must be in (0, 1]"))
    if problems:
        raise ConfigError(problems)
    try:
        build_network_spec(resolved)
    except ConfigError as exc:
        raise ConfigError([(f"network.{p}", m) for p, m in exc.problems]) from None
    return resolved


def config_hash(resolved):
    blob = json.dumps(resolved, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# network construction ----------------------------------------------------------------

def input_shape_for(resolved):
    corpus = CorpusSpec(**resolved["corpus"])
    features = FeatureOptions(**resolved["features"])
    return (corpus.spectral_dim + features.nonlocal_rows, 2 * features.context + 1, features.channels)


def _full_layers(widths, activation, dropout, start=1):
    layers = []
    for i, w in enumerate(widths, start=start):
        layers.append(FullSpec(int(w)))
        layers.append(ActivationSpec(activation))
        p = float(dropout.get(str(i), dropout.get(i, 0.0)))
        if p > 0.0:
            layers.append(DropoutSpec(p))
    return layers


def _conv_layers(conv, activation):
    layers = []
    for j, c in enumerate(conv):
        unknown = set(c) - {"maps", "filter", "stride", "sharing", "bands", "num_bands", "pool"}
        if unknown:
            raise ConfigError([(f"conv[{j}]", f"unknown fields {sorted(unknown)}")])
        bands = c.get("bands")
        layers.append(ConvLayerSpec(int(c["maps"]), tuple(c["filter"]), tuple(c.get("stride", (1, 1))),
                                    c.get("sharing", "full"), [tuple(b) for b in bands] if bands else None,
                                    int(c.get("num_bands", 2))))
        layers.append(ActivationSpec(activation))
        if c.get("pool"):
            try:
                layers.append(PoolingSpec(**c["pool"]))
            except TypeError as exc:
                raise ConfigError([(f"conv[{j}].pool", str(exc))]) from None
    return layers


def build_network_spec(resolved):
    """NetworkSpec for a resolved config; the input shape follows the feature options."""
    net = resolved["network"]
    shape = input_shape_for(resolved)
    num_classes = resolved["corpus"]["num_classes"]
    nonlocal_rows = FeatureOptions(**resolved["features"]).nonlocal_rows
    builder = net.get("builder")
    if builder not in NETWORK_BUILDERS:
        raise ConfigError([("builder", f"must be one of {NETWORK_BUILDERS}")])
    if builder == "spec":
        if not isinstance(net.get("spec"), dict):
            raise ConfigError([("spec", "builder 'spec' needs a full topology under 'spec'")])
        spec = NetworkSpec.from_dict(net["spec"])
        if tuple(spec.input_shape) != shape:
            raise ConfigError([("spec.input_shape", f"{tuple(spec.input_shape)} does not match features {shape}")])
        return spec
    activation = net["activation"]
    dropout = net.get("dropout") or {}
    depth = len(net["hidden"])
    for key, p in dropout.items():
        if str(key) not in {str(i) for i in range(1, depth + 1)}:
            raise ConfigError([(f"dropout.{key}", f"no fully connected hidden layer {key} (there are {depth})")])
        if not 0.0 <= float(p) < 1.0:
            raise ConfigError([(f"dropout.{key}", "probability must be in [0, 1)")])
    conv = [] if builder == "dnn" else _conv_layers(net["conv"], activation)
    streams = [conv]
    if builder == "multiscale":
        streams.append(_full_layers(net["dnn_widths"], activation, {}))
    spec = NetworkSpec(shape, num_classes, streams, _full_layers(net["hidden"], activation, dropout),
                       nonlocal_rows, bool(net.get("energy_to_conv", False)))
    return validate_network_spec(spec)


# evaluation --------------------------------------------------------------------------

@dataclass
class EvalReport:
    name: str
    config_hash: str
    corpus_hash: str
    seed: int
    split: str
    frame_error: float
    cross_entropy: float
    num_params: int = 0
    series: list = field(default_factory=list)  # dict rows with SERIES_HEADER keys
    cg_traces: list = field(default_factory=list)  # per HF iteration: list of phi values
    extra: dict = field(default_factory=dict)
    wall_clock: float = 0.0  # seconds; kept out of report.txt so reruns compare byte-for-byte
    directory: str = ""

    def __post_init__(self):
        if not 0.0 <= self.frame_error <= 1.0:
            raise ValueError("frame error must be in [0, 1]")

    def to_text(self):
        lines = [
            f"name: {self.name}",
            f"config_hash: {self.config_hash}",
            f"corpus_hash: {self.corpus_hash}",
            f"seed: {self.seed}",
            f"split: {self.split}",
            f"frame_error: {float(self.frame_error)!r}",
            f"cross_entropy: {float(self.cross_entropy)!r}",
            f"num_params: {self.num_params}",
            f"iterations: {len(self.series)}",
        ]
        for key in sorted(self.extra):
            lines.append(f"{key}: {self.extra[key]!r}")
        return "\n".join(lines) + "\n"

    def series_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(SERIES_HEADER)
        for row in self.series:
            writer.writerow([_csv_value(row.get(k)) for k in SERIES_HEADER])
        return buf.getvalue()

    def heldout_series(self):
        return [row["heldout_loss"] for row in self.series]


def _csv_value(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def evaluate(net, params, split, context=None, name="", config_hash="", corpus_hash="", seed=0, split_name=""):
    """Frame error and mean cross-entropy with dropout disabled.

    ``split`` is a :class:`FrameData` or a list of labelled utterances (then
    ``context`` is required).
    """
    if not isinstance(split, FrameData):
        if any(u.labels is None for u in split):
            raise ValueError("evaluate: split has unlabeled utterances")
        split = FrameData(split, context)
    errors, total_ce = 0, 0.0
    for rows in split.utterance_chunks():
        logits = net.logits(params, split.inputs[rows])
        errors += int(np.sum(np.argmax(logits, axis=1) != split.targets[rows]))
        total_ce += net.loss(params, split.inputs[rows], split.targets[rows])
    n = len(split)
    return EvalReport(name, config_hash, corpus_hash, seed, split_name, errors / n, float(total_ce / n),
                      net.num_params)


# running -----------------------------------------------------------------------------

@dataclass
class Prepared:
    resolved: dict
    hash: str
    corpus: object
    fitted: object
    train: FrameData
    heldout: FrameData
    evaluation: FrameData
    net: Network


def _stage(stage, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ExperimentError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage attached
        raise ExperimentError(stage, exc) from exc


def prepare(config, corpus_cache=None):
    resolved = resolve_config(config)
    h = config_hash(resolved)
    spec = CorpusSpec(**resolved["corpus"])
    key = spec.hash()
    if corpus_cache is not None and key in corpus_cache:
        corpus = corpus_cache[key]
    else:
        corpus = _stage("corpus", generate_corpus, spec)
        if corpus_cache is not None:
            corpus_cache[key] = corpus
    options = FeatureOptions(**resolved["features"])
    fitted, splits = _stage("features", lambda: FeaturePipeline(options, corpus).fit_transform())
    train = _stage("features", FrameData, splits["train"], options.context)
    heldout = _stage("features", FrameData, splits["heldout"], options.context)
    eval_split = splits[resolved["eval_split"]]
    evaluation = heldout if resolved["eval_split"] == "heldout" else _stage(
        "features", FrameData, eval_split, options.context)
    net = _stage("network", Network, build_network_spec(resolved))
    return Prepared(resolved, h, corpus, fitted, train, heldout, evaluation, net)


def train_network(prep, params=None, log=None):
    """Run the configured optimizer; returns ``(params, series, cg_traces, optimizer_state)``."""
    resolved = prep.resolved
    seed = resolved["seed"]
    net = prep.net
    params = net.init_params(seed) if params is None else np.array(params, dtype=float)
    opt = resolved["optimizer"]
    series, traces, state_out = [], [], {}
    log = log or (lambda msg: None)

    if opt["kind"] in ("sgd", "sgd+hf"):
        sched = dict(opt["sgd"])
        if opt["kind"] == "sgd+hf":
            sched["max_anneals"] = opt["anneals_before_hf"]
        schedule = SGDSchedule(**sched)

        def on_epoch(rec, _params):
            series.append({"iteration": len(series), "loss": float(rec.loss), "heldout_loss": float(rec.heldout_loss),
                           "lambda": None, "cg_iters": None})
            log(f"sgd epoch {rec.epoch} loss {rec.loss!r} heldout {rec.heldout_loss!r} rate {rec.rate!r}"
                f"{' annealed' if rec.annealed else ''}")

        params, history = sgd_train(net, params, prep.train, prep.heldout, schedule, master_seed=seed,
                                    callback=on_epoch)
        state_out["sgd_epochs"] = len(history)
        state_out["sgd_final_rate"] = history[-1].rate if history else schedule.initial_rate

    if opt["kind"] in ("hf", "sgd+hf"):
        hf = opt["hf"]
        state = HFState(lam=hf["lam"], cg_tolerance=hf["cg_tolerance"], cg_max_iters=hf["cg_max_iters"],
                        dropout_mode=hf["dropout_mode"], curvature_fraction=hf["curvature_fraction"],
                        master_seed=seed)
        for _ in range(hf["iterations"]):
            result = hf_iteration(net, params, prep.train, state)
            params = result.params
            held = mean_loss(net, params, prep.heldout)
            series.append({"iteration": len(series), "loss": float(result.new_loss), "heldout_loss": float(held),
                           "lambda": float(result.lam), "cg_iters": result.trace.iterations})
            traces.append(list(result.trace.phi))
            log(f"hf iteration {state.iteration - 1} loss {result.loss!r} -> {result.new_loss!r} heldout {held!r} "
                f"rho {result.rho!r} lambda {result.lam!r} cg {result.trace.iterations} "
                f"({result.trace.termination}) {'accepted' if result.accepted else 'rejected'}")
        state_out["hf"] = state.to_dict()
    return params, series, traces, state_out


def output_root(root=None):
    return root or os.environ.get(OUTPUT_ROOT_ENV) or "runs"


def run_experiment(config, root=None, write=True, corpus_cache=None):
    """Full pipeline: corpus, features, training, evaluation and artifacts.

    Artifacts go to ``<root>/<config-hash>/``: ``config.json`` (resolved
    config), ``report.txt``, ``loss_series.csv``, ``cg_traces.csv``,
    ``model.npz`` and ``train.log``.
    """
    start = time.perf_counter()
    prep = prepare(config, corpus_cache)
    resolved, h = prep.resolved, prep.hash
    log_lines = [f"config_hash {h}", f"corpus_hash {prep.corpus.hash}", f"seed {resolved['seed']}",
                 f"num_params {prep.net.num_params}"]
    params, series, traces, state = _stage("train", train_network, prep, None, log_lines.append)
    report = _stage("evaluate", evaluate, prep.net, params, prep.evaluation, name=resolved["name"],
                    config_hash=h, corpus_hash=prep.corpus.hash, seed=resolved["seed"],
                    split_name=resolved["eval_split"])
    report.series = series
    report.cg_traces = traces
    report.extra = {"train_frames": len(prep.train), "eval_frames": len(prep.evaluation)}
    report.wall_clock = time.perf_counter() - start
    if write:
        directory = os.path.join(output_root(root), h)
        _stage("write", write_run, directory, resolved, report, prep.net, params, state, log_lines)
        report.directory = directory
    return report


def write_run(directory, resolved, report, net, params, state, log_lines):
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "config.json"), "w") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(directory, "report.txt"), "w") as fh:
        fh.write(report.to_text())
    with open(os.path.join(directory, "loss_series.csv"), "w") as fh:
        fh.write(report.series_csv())
    with open(os.path.join(directory, "cg_traces.csv"), "w") as fh:
        fh.write("hf_iteration,cg_iteration,phi\n")
        for i, phis in enumerate(report.cg_traces):
            for k, phi in enumerate(phis, start=1):
                fh.write(f"{i},{k},{float(phi)!r}\n")
    save_params(os.path.join(directory, "model.npz"), net, params,
                {"config_hash": report.config_hash, "seed": report.seed, "optimizer_state": state})
    with open(os.path.join(directory, "train.log"), "w") as fh:
        fh.write("\n".join(log_lines) + f"\nwall_clock_seconds {report.wall_clock:.3f}\n")


def load_config(path):
    with open(path) as fh:
        return json.load(fh)


def with_overrides(config, changes):
    """Deep copy of ``config`` with dotted-path overrides, e.g. ``{"optimizer.kind": "hf"}``."""
    out = copy.deepcopy(config)
    for dotted, value in changes.items():
        node = out
        keys = dotted.split(".")
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    return out

