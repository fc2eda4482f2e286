"""Command-line entry point: ``acoustic-cnn <verb> <subverb> [options]``.

Configs are JSON files; flags only override the seed and paths. The default
output root comes from ``$ACOUSTIC_CNN_RUNS`` (else ``./runs``). Exit codes:
0 on success, 2 for usage errors, 1 for failures (printed with the stage).
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import adaptation, features
from .harness import drivers, experiment
from .harness.corpus import CorpusSpec, generate_corpus
from .harness.pipeline import FeatureOptions, FeaturePipeline
from .network.model import Network, load_params, save_params
from .network.spec import ConfigError, NetworkSpec

logger = logging.getLogger("acoustic_cnn")

ADAPT_DEFAULTS = {"gmm_components": 64, "gmm_iters": 10, "stc_iters": 5, "fmllr_iters": 5, "seed": 0}


class StageError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(message)
        self.stage = stage


# config helpers ---------------------------------------------------------------------

def _read_json(path, stage="config"):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise StageError(stage, f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise StageError(stage, f"{path}: invalid JSON ({exc})") from None


def _experiment_config(args):
    cfg = _read_json(args.config) if args.config else {}
    if args.seed is not None:
        cfg["seed"] = args.seed
    try:
        return experiment.resolve_config(cfg)
    except ConfigError as exc:
        raise StageError("config", _diagnostics(exc)) from None
    except (TypeError, ValueError) as exc:
        raise StageError("config", str(exc)) from None


def _diagnostics(exc):
    return "invalid config:\n" + "\n".join(f"  {path}: {msg}" for path, msg in exc.problems)


def _adapt_config(args):
    cfg = dict(ADAPT_DEFAULTS)
    if args.config:
        raw = _read_json(args.config)
        raw = raw.get("adaptation", raw)
        unknown = sorted(set(raw) - set(ADAPT_DEFAULTS))
        if unknown:
            raise StageError("config", f"invalid config:\n  adaptation: unknown fields {unknown}")
        cfg.update(raw)
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg


def _snapshot(directory, argv, resolved):
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "resolved_config.json"), "w") as fh:
        json.dump({"argv": list(argv), "config": resolved}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _log_resolved(resolved):
    logger.info("resolved config: %s", json.dumps(resolved, sort_keys=True))


# features -------------------------------------------------------------------------------

def cmd_features_extract(args, argv):
    """Generate the configured synthetic corpus and write un-normalized features per split."""
    resolved = _experiment_config(args)
    _log_resolved(resolved)
    spec = CorpusSpec(**resolved["corpus"])
    opts = FeatureOptions(**dict(resolved["features"], adapt=False))
    corpus = generate_corpus(spec)
    pipe = FeaturePipeline(opts, corpus)
    for name in ("train", "heldout", "test"):
        features.write_corpus(os.path.join(args.out, name), pipe.extract(corpus.split(name)))
    _snapshot(args.out, argv, resolved)
    print(f"wrote {len(corpus.train)}/{len(corpus.heldout)}/{len(corpus.test)} utterances under {args.out}")


def cmd_features_normalize(args, argv):
    corpus = _read_corpus(args.input)
    stats = None
    if args.stats:
        with open(args.stats) as fh:
            stats = features.NormalizationStats.from_text(fh.read())
    normalized, stats = features.normalize_corpus(corpus, stats)
    features.write_corpus(args.out, normalized)
    with open(os.path.join(args.out, "stats.txt"), "w") as fh:
        fh.write(stats.to_text())
    _snapshot(args.out, argv, {"input": args.input, "stats": args.stats})
    print(f"normalized {len(normalized)} utterances into {args.out}")


def _read_corpus(directory):
    try:
        return features.read_corpus(directory)
    except (OSError, ValueError) as exc:
        raise StageError("read-features", str(exc)) from None


def _static_frames(corpus):
    return [u.frames[:, :u.frames.shape[1] - u.nonlocal_rows, 0] for u in corpus]


# adaptation --------------------------------------------------------------------------------

def cmd_adapt_train_gmm(args, argv):
    cfg = _adapt_config(args)
    X = np.concatenate(_static_frames(_read_corpus(args.input)), axis=0)
    gmm = adaptation.train_diag_gmm(X, cfg["gmm_components"], cfg["gmm_iters"], seed=cfg["seed"])
    _write_file(args.out, gmm.to_text())
    print(f"gmm: {gmm.num_components} components, log-likelihood {gmm.history[-1]:.6g}")


def cmd_adapt_estimate_stc(args, argv):
    cfg = _adapt_config(args)
    gmm = _read_transform(args.gmm, adaptation.DiagonalGMM)
    X = np.concatenate(_static_frames(_read_corpus(args.input)), axis=0)
    stc = adaptation.estimate_stc(gmm, X, outer_iters=cfg["stc_iters"])
    _write_file(args.out, stc.to_text())
    print(f"stc: objective {stc.history[0]:.6g} -> {stc.history[-1]:.6g}")


def cmd_adapt_estimate_fmllr(args, argv):
    cfg = _adapt_config(args)
    stc = _read_transform(args.stc, adaptation.STCTransform)
    space = stc.transformed_gmm()
    by_speaker = {}
    for u, X in zip(*_pair(_read_corpus(args.input))):
        by_speaker.setdefault(u.speaker_id, []).append(X)
    os.makedirs(args.out, exist_ok=True)
    for sid in sorted(by_speaker):
        X = stc.transform(np.concatenate(by_speaker[sid], axis=0))
        t = adaptation.estimate_fmllr(space, X, iters=cfg["fmllr_iters"], speaker_id=sid)
        adaptation.write_transform(os.path.join(args.out, f"fmllr-{sid}.txt"), t)
    _snapshot(args.out, argv, cfg)
    print(f"fmllr: {len(by_speaker)} speaker transforms in {args.out}")


def _pair(corpus):
    return corpus, _static_frames(corpus)


def cmd_adapt_apply(args, argv):
    stc = _read_transform(args.stc, adaptation.STCTransform)
    corpus = _read_corpus(args.input)
    out = []
    for u in corpus:
        path = os.path.join(args.fmllr, f"fmllr-{u.speaker_id}.txt")
        fmllr = _read_transform(path, adaptation.FMLLRTransform)
        out.append(adaptation.adapt_utterance(u, stc, fmllr))
    features.write_corpus(args.out, out)
    _snapshot(args.out, argv, {"stc": args.stc, "fmllr": args.fmllr, "input": args.input})
    print(f"adapted {len(out)} utterances into {args.out}")


def _read_transform(path, kind):
    try:
        obj = adaptation.read_transform(path)
    except (OSError, ValueError, KeyError, IndexError) as exc:
        raise StageError("read-transform", f"{path}: {exc}") from None
    if not isinstance(obj, kind):
        raise StageError("read-transform", f"{path}: expected {kind.__name__}, found {type(obj).__name__}")
    return obj


def _write_file(path, text):
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(text)


# network / training / evaluation -------------------------------------------------------------

def _network_from_config(args):
    raw = _read_json(args.config) if args.config else {}
    if "input_shape" in raw:  # a bare topology
        try:
            return Network(NetworkSpec.from_dict(raw)), raw
        except ConfigError as exc:
            raise StageError("config", _diagnostics(exc)) from None
    resolved = _experiment_config(args)
    return Network(experiment.build_network_spec(resolved)), resolved


def cmd_net_describe(args, argv):
    net, resolved = _network_from_config(args)
    _log_resolved(resolved)
    print(net.describe())


def cmd_train(args, argv, kind):
    resolved = _experiment_config(args)
    resolved["optimizer"]["kind"] = kind
    _log_resolved(resolved)
    out = args.out or os.path.join(experiment.output_root(), experiment.config_hash(resolved))
    prep = _run_stage("prepare", experiment.prepare, resolved)
    init = None
    if args.init:
        net0, init, _ = _run_stage("load-checkpoint", load_params, args.init)
        if net0.layout.to_list() != prep.net.layout.to_list():
            raise StageError("load-checkpoint", f"{args.init}: topology differs from the config")
    log_lines = []
    params, series, _, state = _run_stage("train", experiment.train_network, prep, init, log_lines.append)
    report = experiment.evaluate(prep.net, params, prep.evaluation, name=resolved["name"],
                                 config_hash=prep.hash, corpus_hash=prep.corpus.hash, seed=resolved["seed"],
                                 split_name=resolved["eval_split"])
    report.series = series
    _snapshot(out, argv, resolved)
    save_params(os.path.join(out, "model.npz"), prep.net, params,
                {"config_hash": prep.hash, "seed": resolved["seed"], "optimizer_state": state})
    with open(os.path.join(out, "loss_series.csv"), "w") as fh:
        fh.write(report.series_csv())
    with open(os.path.join(out, "train.log"), "w") as fh:
        fh.write("\n".join(log_lines) + "\n")
    print(report.to_text(), end="")


def cmd_eval(args, argv):
    resolved = _experiment_config(args)
    _log_resolved(resolved)
    prep = _run_stage("prepare", experiment.prepare, resolved)
    net, params, extra = _run_stage("load-checkpoint", load_params, args.model)
    if net.layout.to_list() != prep.net.layout.to_list():
        raise StageError("load-checkpoint", f"{args.model}: topology differs from the config")
    report = experiment.evaluate(net, params, prep.evaluation, name=resolved["name"], config_hash=prep.hash,
                                 corpus_hash=prep.corpus.hash, seed=resolved["seed"],
                                 split_name=resolved["eval_split"])
    if args.out:
        _snapshot(args.out, argv, resolved)
        with open(os.path.join(args.out, "report.txt"), "w") as fh:
            fh.write(report.to_text())
    print(report.to_text(), end="")


def cmd_experiment(args, argv):
    cfg = _read_json(args.config) if args.config else {}
    if args.seed is not None:
        cfg["seed"] = args.seed
    try:
        arms = drivers.driver_arms(args.driver, cfg)
    except ConfigError as exc:
        raise StageError("config", _diagnostics(exc)) from None
    except ValueError as exc:
        raise StageError("config", str(exc)) from None
    logger.info("%s: %d arms", args.driver, len(arms))
    root = experiment.output_root(args.out)
    reports, table, directory = _run_stage("experiment", drivers.run_driver, args.driver, cfg, root)
    _snapshot(directory, argv, experiment.resolve_config(cfg))
    print(table, end="")
    for r in reports:
        print(f"{r.name}: {r.directory}")


def _run_stage(stage, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except StageError:
        raise
    except experiment.ExperimentError as exc:
        raise StageError(exc.stage, str(exc.cause)) from exc
    except ConfigError as exc:
        raise StageError("config", _diagnostics(exc)) from None
    except Exception as exc:  # noqa: BLE001 - reported with the stage
        raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc


# parser ------------------------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(
        prog="acoustic-cnn",
        description="CNN acoustic models: features, speaker adaptation, SGD/Hessian-free training, "
                    "evaluation and comparison experiments on synthetic corpora.",
        epilog="verbs: features extract|normalize; adapt train-gmm|estimate-stc|estimate-fmllr|apply; "
               "net describe; train ce|hf; eval; experiment table1|table2|figure1|poolsweep|lws-vs-fws. "
               f"Default output root: ${experiment.OUTPUT_ROOT_ENV} or ./runs.")
    verbs = parser.add_subparsers(dest="verb", metavar="VERB", required=True)

    p = verbs.add_parser("features", help="feature extraction and normalization")
    sub = p.add_subparsers(dest="subverb", metavar="SUBVERB", required=True)
    q = sub.add_parser("extract", parents=[common], help="generate a synthetic corpus and write feature files")
    q.add_argument("--config", help="experiment config (corpus and features blocks are used)")
    q.add_argument("--out", required=True, help="output directory (train/heldout/test subdirectories)")
    q.set_defaults(func=cmd_features_extract)
    q = sub.add_parser("normalize", parents=[common], help="global mean/variance normalization")
    q.add_argument("--input", required=True, help="feature corpus directory")
    q.add_argument("--stats", help="apply these statistics instead of estimating them")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_features_normalize)

    p = verbs.add_parser("adapt", help="GMM, STC and fMLLR estimation and application")
    sub = p.add_subparsers(dest="subverb", metavar="SUBVERB", required=True)
    q = sub.add_parser("train-gmm", parents=[common], help="diagonal GMM on pooled static frames")
    q.add_argument("--input", required=True)
    q.add_argument("--config", help="adaptation settings (gmm_components, gmm_iters, ...)")
    q.add_argument("--out", required=True, help="GMM text file")
    q.set_defaults(func=cmd_adapt_train_gmm)
    q = sub.add_parser("estimate-stc", parents=[common], help="semi-tied transform from a GMM")
    q.add_argument("--input", required=True)
    q.add_argument("--gmm", required=True)
    q.add_argument("--config")
    q.add_argument("--out", required=True, help="STC text file")
    q.set_defaults(func=cmd_adapt_estimate_stc)
    q = sub.add_parser("estimate-fmllr", parents=[common], help="per-speaker fMLLR in the STC space")
    q.add_argument("--input", required=True)
    q.add_argument("--stc", required=True)
    q.add_argument("--config")
    q.add_argument("--out", required=True, help="directory for fmllr-<speaker>.txt files")
    q.set_defaults(func=cmd_adapt_estimate_fmllr)
    q = sub.add_parser("apply", parents=[common], help="map features through S^-1 (A S f + b)")
    q.add_argument("--input", required=True)
    q.add_argument("--stc", required=True)
    q.add_argument("--fmllr", required=True, help="directory of fmllr-<speaker>.txt files")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_adapt_apply)

    p = verbs.add_parser("net", help="network topology tools")
    sub = p.add_subparsers(dest="subverb", metavar="SUBVERB", required=True)
    q = sub.add_parser("describe", parents=[common], help="per-layer shapes and parameter counts")
    q.add_argument("--config", help="experiment config or bare topology (with input_shape)")
    q.set_defaults(func=cmd_net_describe)

    p = verbs.add_parser("train", help="train a network")
    sub = p.add_subparsers(dest="subverb", metavar="SUBVERB", required=True)
    for name, kind, text in (("ce", "sgd", "cross-entropy SGD with held-out annealing"),
                             ("hf", "hf", "Hessian-free optimization")):
        q = sub.add_parser(name, parents=[common], help=text)
        q.add_argument("--config", required=True)
        q.add_argument("--init", help="start from this checkpoint (e.g. a CE model before HF)")
        q.add_argument("--out", help="output directory (default <root>/<config-hash>)")
        q.set_defaults(func=lambda a, argv, kind=kind: cmd_train(a, argv, kind))

    q = verbs.add_parser("eval", parents=[common], help="frame error and cross-entropy of a checkpoint")
    q.add_argument("--config", required=True)
    q.add_argument("--model", required=True)
    q.add_argument("--out")
    q.set_defaults(func=cmd_eval)

    q = verbs.add_parser("experiment", parents=[common], help="run a comparison driver")
    q.add_argument("driver", choices=drivers.DRIVERS)
    q.add_argument("--config", help="base experiment config")
    q.add_argument("--out", help="output root")
    q.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args, argv)
    except StageError as exc:
        print(f"acoustic-cnn: error in stage {exc.stage}: {exc}", file=sys.stderr)
        return 1
    except experiment.ExperimentError as exc:
        print(f"acoustic-cnn: error in stage {exc.stage}: {exc.cause}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any other failure is reported with the verb as stage
        stage = " ".join(filter(None, (args.verb, getattr(args, "subverb", None))))
        print(f"acoustic-cnn: error in stage {stage}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
