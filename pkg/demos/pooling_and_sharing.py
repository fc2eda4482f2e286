"""Pooling operators and weight sharing on toy inputs.

Run: python demos/pooling_and_sharing.py
"""

import numpy as np

from acoustic_cnn import rng
from acoustic_cnn.network import (ConvLayerSpec, Network, NetworkSpec, pool_lp, pool_max, pool_stochastic,
                                  stochastic_probabilities)
from acoustic_cnn.network.layers import Conv


def pooling():
    region = np.array([1.0, 2.0, 5.0])
    print("region", region)
    print("  max            ", pool_max(region))
    for p in (1, 2, 4, 100):
        print(f"  lp p={p:<3}       {pool_lp(region, p):.4f}")
    print("  stochastic probs", stochastic_probabilities(region))
    g = rng.generator(0, "demo")
    picks = [pool_stochastic(region, g)[1] for _ in range(10000)]
    print("  stochastic freq ", np.bincount(picks, minlength=3) / 10000)
    print("  stochastic test ", pool_stochastic(region, phase="test")[0])


def sharing():
    # three frequency bands, each with its own filters; tying them reproduces full sharing
    F, T, C = 12, 5, 1
    bands = [(0, 5), (3, 5), (6, 6)]
    spec = ConvLayerSpec(2, (3, 2), sharing="limited", bands=bands, id="c")
    limited = Conv(spec, (F, T, C))
    full = Conv(ConvLayerSpec(2, (3, 2), id="c"), (F, T, C))
    g = np.random.default_rng(0)
    W, b = g.standard_normal((1, 6, 2)), g.standard_normal((1, 2))
    x = g.standard_normal((1, F, T, C))
    tied = limited.forward(x, {"W": np.repeat(W, 3, 0), "b": np.repeat(b, 3, 0)}, None)[0]
    shared = full.forward(x, {"W": W, "b": b}, None)[0]
    print("limited sharing output", tied.shape, "identical to full sharing when tied:", np.array_equal(tied, shared))
    net = Network(NetworkSpec((F, T, C), 4, [[spec]]))
    print(net.describe())


if __name__ == "__main__":
    pooling()
    print()
    sharing()
