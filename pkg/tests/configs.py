"""Small experiment configs shared by the harness, CLI and acceptance tests."""

import copy


def tiny_config(name="tiny", seed=0, optimizer="sgd"):
    """A config that trains in about a second."""
    return {
        "name": name,
        "seed": seed,
        "corpus": {"num_speakers": 4, "utterances_per_speaker": 3, "frames_per_utterance": 40, "num_classes": 4,
                   "spectral_dim": 12, "test_speakers": 1, "master_seed": 0},
        "features": {"context": 2, "deltas": False},
        "network": {"conv": [{"maps": 4, "filter": [4, 3], "pool": {"kind": "max", "size": 2, "stride": 2}}],
                    "hidden": [16, 16], "dropout": {}},
        "optimizer": {"kind": optimizer, "sgd": {"max_epochs": 2, "minibatch_size": 32},
                      "hf": {"iterations": 2, "lam": 0.1, "cg_max_iters": 10}},
    }


def with_changes(config, **blocks):
    out = copy.deepcopy(config)
    for block, values in blocks.items():
        if isinstance(values, dict):
            out.setdefault(block, {}).update(values)
        else:
            out[block] = values
    return out
