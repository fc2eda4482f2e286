"""Experiment drivers: groups of arms that differ in one factor.

Arm names start with an ordinal so the name-sorted comparison table keeps
the intended row order.
"""

import copy
import os

from ..network.model import Network
from .experiment import build_network_spec, config_hash, output_root, resolve_config, run_experiment
from .report import emit_report

DRIVERS = ("table1", "table2", "figure1", "poolsweep", "lws-vs-fws")

FEATURE_ROWS = (
    ("1-mel", {"warp": False, "adapt": False, "deltas": False, "energy": False}),
    ("2-vtln", {"warp": True, "adapt": False, "deltas": False, "energy": False}),
    ("3-vtln+fmllr", {"warp": True, "adapt": True, "deltas": False, "energy": False}),
    ("4-vtln+fmllr+d+dd", {"warp": True, "adapt": True, "deltas": True, "energy": False}),
    ("5-vtln+fmllr+d+dd+energy", {"warp": True, "adapt": True, "deltas": True, "energy": True}),
)

CONV_LADDER = (
    {"maps": 16, "filter": [8, 5], "pool": {"kind": "max", "size": 3, "stride": 3, "axis": "frequency"}},
    {"maps": 16, "filter": [4, 3]},
    {"maps": 16, "filter": [3, 1]},
)


def _arm(base, name, changes):
    cfg = copy.deepcopy(base)
    cfg["name"] = name
    for block, values in changes.items():
        cfg.setdefault(block, {}).update(copy.deepcopy(values))
    return cfg


def table1_arms(base):
    cfg = copy.deepcopy(base)
    cfg.setdefault("corpus", {})["representation"] = "spectra"
    return [_arm(cfg, f"table1/{name}", {"features": opts}) for name, opts in FEATURE_ROWS]


def count_params(cfg):
    return Network(build_network_spec(resolve_config(cfg))).num_params


def _match_width(cfg, target, depth, low=4, high=4096):
    """Smallest hidden width whose parameter count is closest to ``target``."""
    def params_at(w):
        trial = copy.deepcopy(cfg)
        trial["network"]["hidden"] = [w] * depth
        return count_params(trial)

    lo, hi = low, high
    while lo < hi:  # first width reaching the target
        mid = (lo + hi) // 2
        if params_at(mid) < target:
            lo = mid + 1
        else:
            hi = mid
    best = min((w for w in (lo - 1, lo) if w >= low), key=lambda w: abs(params_at(w) - target))
    return best, params_at(best)


def table2_arms(base, conv_counts=(0, 1, 2, 3), tolerance=0.02, reference=2):
    """Topology sweep over the number of conv layers at a matched parameter count.

    The trunk width of every arm is chosen so its total parameter count is
    within ``tolerance`` of the ``reference``-conv-layer arm.
    """
    resolved = resolve_config(base)
    depth = len(resolved["network"]["hidden"])

    def with_convs(n):
        cfg = copy.deepcopy(base)
        net = copy.deepcopy(resolved["network"])
        net["builder"] = "cnn" if n > 0 else "dnn"
        net["conv"] = copy.deepcopy(list(CONV_LADDER[:n]))
        cfg["network"] = net
        return cfg

    target = count_params(with_convs(reference))
    arms = []
    for n in conv_counts:
        cfg = with_convs(n)
        width, count = _match_width(cfg, target, depth)
        if abs(count - target) > tolerance * target:
            raise ValueError(f"cannot match {target} parameters with {n} conv layers (best {count})")
        cfg["network"]["hidden"] = [width] * depth
        cfg["name"] = f"table2/{n}-conv"
        arms.append(cfg)
    return arms


def figure1_arms(base):
    arms = []
    for i, mode in enumerate(("fixed_per_utterance", "per_cg_iteration"), start=1):
        cfg = copy.deepcopy(base)
        opt = cfg.setdefault("optimizer", {})
        if opt.get("kind", "sgd") == "sgd":
            opt["kind"] = "hf"
        opt.setdefault("hf", {})["dropout_mode"] = mode
        cfg["name"] = f"figure1/{i}-{mode}"
        arms.append(cfg)
    return arms


POOL_VARIANTS = (
    ("1-max", {"kind": "max", "size": 3, "stride": 3}),
    ("2-max-overlap", {"kind": "max", "size": 3, "stride": 2}),
    ("3-lp", {"kind": "lp", "size": 3, "stride": 3, "p_exponent": 2.0}),
    ("4-lp-overlap", {"kind": "lp", "size": 3, "stride": 2, "p_exponent": 2.0}),
    ("5-stochastic", {"kind": "stochastic", "size": 3, "stride": 3}),
    ("6-stochastic-overlap", {"kind": "stochastic", "size": 3, "stride": 2}),
)


def poolsweep_arms(base):
    resolved = resolve_config(base)
    arms = []
    for name, pool in POOL_VARIANTS:
        net = copy.deepcopy(resolved["network"])
        if not net.get("conv"):
            raise ValueError("poolsweep needs a network with at least one conv layer")
        net["conv"][0]["pool"] = dict(pool, axis="frequency")
        cfg = copy.deepcopy(base)
        cfg["network"] = net
        cfg["name"] = f"poolsweep/{name}"
        arms.append(cfg)
    return arms


def lws_vs_fws_arms(base, num_bands=2):
    resolved = resolve_config(base)
    arms = []
    for name, sharing in (("1-fws", "full"), ("2-lws", "limited")):
        net = copy.deepcopy(resolved["network"])
        if not net.get("conv"):
            raise ValueError("lws-vs-fws needs a network with at least one conv layer")
        net["conv"][0]["sharing"] = sharing
        net["conv"][0]["num_bands"] = num_bands
        net["conv"][0].pop("bands", None)
        cfg = copy.deepcopy(base)
        cfg["network"] = net
        cfg["name"] = f"lws-vs-fws/{name}"
        arms.append(cfg)
    return arms


ARM_BUILDERS = {
    "table1": table1_arms,
    "table2": table2_arms,
    "figure1": figure1_arms,
    "poolsweep": poolsweep_arms,
    "lws-vs-fws": lws_vs_fws_arms,
}


def driver_arms(driver, base):
    try:
        builder = ARM_BUILDERS[driver]
    except KeyError:
        raise ValueError(f"unknown driver {driver!r}; choose from {DRIVERS}") from None
    arms = builder(base)
    for cfg in arms:
        resolve_config(cfg)
    return arms


def run_driver(driver, base, root=None):
    """Run every arm, then write the comparison table (and plot data) under
    ``<root>/<driver>-<base-config-hash>/``. Returns ``(reports, table, directory)``."""
    arms = driver_arms(driver, base)
    root = output_root(root)
    cache = {}
    reports = [run_experiment(cfg, root=root, corpus_cache=cache) for cfg in arms]
    figures = {}
    if driver == "figure1":
        figures["figure1_heldout"] = {r.name.split("/", 1)[1]: [(row["iteration"], row["heldout_loss"])
                                                               for row in r.series] for r in reports}
        figures["figure1_phi"] = {f"{r.name.split('/', 1)[1]}/hf{i}": list(enumerate(phis, start=1))
                                  for r in reports for i, phis in enumerate(r.cg_traces)}
    directory = os.path.join(root, f"{driver}-{config_hash(resolve_config(base))}")
    table = emit_report(reports, directory, figures, title=driver)
    return reports, table, directory
